"""Frozen vision-transformer backbone producing patch and global tokens.

The architecture is the standard pre-norm ViT with a 14 x 14 patch
embedding, a class token used as the global token, and learned position
embeddings that are bicubically resized whenever the input grid differs
from the native 23 x 23 (322 x 322 pixels).

Weights come from a local ``state_dict`` checkpoint when one is given;
otherwise they are drawn deterministically from the seed, which keeps
exports reproducible in environments without access to pretrained
checkpoints. A randomly initialized backbone preserves every output
contract (shapes, determinism, file format) but of course not the
descriptive quality of a pretrained one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

PATCH_SIZE = 14
NATIVE_GRID = 23  # 322 / 14

# channel statistics used by the standard pretraining pipelines
IMAGE_MEAN = (0.485, 0.456, 0.406)
IMAGE_STD = (0.229, 0.224, 0.225)


@dataclass(frozen=True)
class VariantSpec:
    dim: int
    depth: int
    heads: int


VARIANTS = {
    "small": VariantSpec(dim=384, depth=12, heads=6),
    "base": VariantSpec(dim=768, depth=12, heads=12),
    "large": VariantSpec(dim=1024, depth=24, heads=16),
    "giant": VariantSpec(dim=1536, depth=40, heads=24),
}


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        b, t, c = x.shape
        qkv = self.qkv(x).reshape(b, t, 3, self.heads, c // self.heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)
        attn = (q @ k.transpose(-2, -1)) * self.scale
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, t, c)
        return self.proj(out)


class Block(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, dim * 4),
            nn.GELU(),
            nn.Linear(dim * 4, dim),
        )

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        x = x + self.mlp(self.norm2(x))
        return x


class TokenBackbone(nn.Module):
    """ViT trunk exposing (patch tokens, global token) per image."""

    def __init__(self, variant: str = "base", seed: int = 0):
        super().__init__()
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}, expected one of {sorted(VARIANTS)}")
        spec = VARIANTS[variant]
        self.variant = variant
        self.dim = spec.dim
        torch.manual_seed(seed)
        self.patch_embed = nn.Conv2d(3, spec.dim, kernel_size=PATCH_SIZE, stride=PATCH_SIZE)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, spec.dim))
        self.pos_embed = nn.Parameter(torch.zeros(1, NATIVE_GRID * NATIVE_GRID + 1, spec.dim))
        self.blocks = nn.ModuleList(Block(spec.dim, spec.heads) for _ in range(spec.depth))
        self.norm = nn.LayerNorm(spec.dim)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)

    def _positions(self, grid_h: int, grid_w: int) -> torch.Tensor:
        if grid_h == NATIVE_GRID and grid_w == NATIVE_GRID:
            return self.pos_embed
        cls_pos = self.pos_embed[:, :1]
        patch_pos = self.pos_embed[:, 1:].reshape(1, NATIVE_GRID, NATIVE_GRID, self.dim)
        patch_pos = F.interpolate(
            patch_pos.permute(0, 3, 1, 2),
            size=(grid_h, grid_w),
            mode="bicubic",
            align_corners=False,
        )
        patch_pos = patch_pos.permute(0, 2, 3, 1).reshape(1, grid_h * grid_w, self.dim)
        return torch.cat([cls_pos, patch_pos], dim=1)

    @torch.inference_mode()
    def forward(self, image: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(1, 3, H, W) normalized image -> ((n, dim) patch tokens, (dim,) global)."""
        if image.ndim != 4 or image.shape[0] != 1 or image.shape[1] != 3:
            raise ValueError(f"expected a (1, 3, H, W) batch, got {tuple(image.shape)}")
        h, w = image.shape[2], image.shape[3]
        if h % PATCH_SIZE or w % PATCH_SIZE:
            raise ValueError(f"image size {h}x{w} is not divisible by {PATCH_SIZE}")
        x = self.patch_embed(image)  # (1, dim, H/p, W/p)
        grid_h, grid_w = x.shape[2], x.shape[3]
        x = x.flatten(2).transpose(1, 2)  # (1, n, dim)
        x = torch.cat([self.cls_token, x], dim=1)
        x = x + self._positions(grid_h, grid_w)
        for block in self.blocks:
            x = block(x)
        x = self.norm(x)
        return x[0, 1:], x[0, 0]


def load_backbone(variant: str = "base", seed: int = 0, checkpoint: str | None = None) -> TokenBackbone:
    """Build a frozen backbone; load a local state-dict checkpoint if given."""
    model = TokenBackbone(variant=variant, seed=seed)
    if checkpoint is not None:
        state = torch.load(checkpoint, map_location="cpu", weights_only=True)
        model.load_state_dict(state, strict=True)
    return model


def normalize_image(array) -> torch.Tensor:
    """HWC uint8/float RGB array in [0, 255] -> normalized (1, 3, H, W) tensor."""
    array = np.array(array, dtype=np.float32, copy=True)  # PIL arrays are read-only
    t = torch.from_numpy(array) / 255.0
    t = (t - torch.tensor(IMAGE_MEAN)) / torch.tensor(IMAGE_STD)
    return t.permute(2, 0, 1).unsqueeze(0).contiguous()


def patch_grid(height: int, width: int) -> tuple[int, int]:
    if height % PATCH_SIZE or width % PATCH_SIZE:
        raise ValueError(
            f"target size {height}x{width} must be divisible by the patch size {PATCH_SIZE}"
        )
    return height // PATCH_SIZE, width // PATCH_SIZE


def token_count(height: int, width: int) -> int:
    gh, gw = patch_grid(height, width)
    return gh * gw
