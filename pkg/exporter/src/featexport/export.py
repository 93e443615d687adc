"""Directory-level export: images in, SALF feature files out."""

from __future__ import annotations

import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .backbone import load_backbone, normalize_image, patch_grid
from .salf import read_geotag_csv, write_salf

IMAGE_SUFFIXES = (".jpg", ".jpeg", ".png", ".bmp", ".webp", ".ppm", ".tif", ".tiff")


@dataclass
class ExportConfig:
    """What to export and how.

    ``size`` is (height, width) in pixels after resize; both must be
    divisible by the 14-pixel patch size. ``checkpoint`` optionally points
    to a local state-dict file for the frozen backbone; without one the
    backbone is deterministically seeded.
    """

    images: str | Path
    out_dir: str | Path
    size: tuple[int, int] = (322, 322)
    variant: str = "base"
    geotags: str | Path | None = None
    checkpoint: str | Path | None = None
    seed: int = 0

    def __post_init__(self):
        patch_grid(*self.size)  # validates divisibility


@dataclass
class ExportSummary:
    written: int = 0
    skipped: list[str] = field(default_factory=list)


def list_images(directory) -> list[Path]:
    directory = Path(directory)
    if directory.is_file():
        return [directory]
    return sorted(
        p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES and p.is_file()
    )


def _load_image(path, size: tuple[int, int]) -> np.ndarray:
    with Image.open(path) as img:
        rgb = img.convert("RGB").resize((size[1], size[0]), Image.BILINEAR)
    return np.asarray(rgb)


def export_features(config: ExportConfig) -> ExportSummary:
    """Forward every readable image through the frozen backbone and write
    one SALF file per image (named after the image stem)."""
    files = list_images(config.images)
    if not files:
        raise FileNotFoundError(f"no image files under {config.images}")
    tags = read_geotag_csv(config.geotags) if config.geotags else {}
    model = load_backbone(
        variant=config.variant, seed=config.seed, checkpoint=config.checkpoint
    )
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    summary = ExportSummary()
    for path in files:
        try:
            array = _load_image(path, config.size)
        except Exception as exc:  # unreadable image: warn, count, continue
            print(f"warning: skipping {path}: {exc}", file=sys.stderr)
            summary.skipped.append(str(path))
            continue
        tokens, global_token = model(normalize_image(array))
        write_salf(
            out_dir / f"{path.stem}.salf",
            image_id=path.stem,
            tokens=tokens.numpy(),
            global_token=global_token.numpy(),
            geotag=tags.get(path.stem),
        )
        summary.written += 1
    if summary.written == 0:
        raise RuntimeError(f"no image could be exported ({len(summary.skipped)} skipped)")
    return summary
