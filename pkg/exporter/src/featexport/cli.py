"""Command line for the feature exporter."""

from __future__ import annotations

import argparse
import sys

from .backbone import VARIANTS
from .export import ExportConfig, export_features


def _parse_size(text: str) -> tuple[int, int]:
    if "x" in text.lower():
        h, w = text.lower().split("x", 1)
        return int(h), int(w)
    side = int(text)
    return side, side


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="featexport",
        description="Extract patch and global tokens from images into SALF feature files.",
    )
    parser.add_argument("--images", required=True, help="image directory (or single file)")
    parser.add_argument("--out", required=True, help="output directory for *.salf files")
    parser.add_argument(
        "--size", default="322", help="target size: SIDE or HxW, divisible by 14"
    )
    parser.add_argument("--variant", choices=sorted(VARIANTS), default="base")
    parser.add_argument("--geotags", help="id,x,y / id,frame CSV to embed")
    parser.add_argument("--checkpoint", help="local state-dict file for the backbone")
    parser.add_argument("--seed", type=int, default=0, help="init seed when no checkpoint")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = ExportConfig(
            images=args.images,
            out_dir=args.out,
            size=_parse_size(args.size),
            variant=args.variant,
            geotags=args.geotags,
            checkpoint=args.checkpoint,
            seed=args.seed,
        )
        summary = export_features(config)
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"exported {summary.written} images, skipped {len(summary.skipped)}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
