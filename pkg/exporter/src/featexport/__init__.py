"""Image-to-feature exporter: frozen ViT tokens written as SALF files."""

from .backbone import IMAGE_MEAN, IMAGE_STD, PATCH_SIZE, VARIANTS, TokenBackbone, load_backbone, token_count
from .export import ExportConfig, ExportSummary, export_features, list_images
from .salf import FrameTag, PlanarTag, read_geotag_csv, write_salf

__version__ = "0.1.0"

__all__ = [
    "ExportConfig",
    "ExportSummary",
    "FrameTag",
    "IMAGE_MEAN",
    "IMAGE_STD",
    "PATCH_SIZE",
    "PlanarTag",
    "TokenBackbone",
    "VARIANTS",
    "export_features",
    "list_images",
    "load_backbone",
    "read_geotag_csv",
    "token_count",
    "write_salf",
]
