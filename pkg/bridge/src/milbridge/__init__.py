"""Slide-to-features adapter: tissue segmentation, tiling, backbone
embeddings, MILF export."""

__version__ = "0.1.0"

from .backbones import REGISTRY, Backbone, load_backbone
from .errors import BridgeError, EmptySlideError, SlideError, WeightLoadError
from .extract import ExtractionJob, extract, extract_directory
from .tiling import TilingConfig, load_slide, tile_grid, tissue_mask

__all__ = [
    "REGISTRY",
    "Backbone",
    "BridgeError",
    "EmptySlideError",
    "ExtractionJob",
    "SlideError",
    "TilingConfig",
    "WeightLoadError",
    "extract",
    "extract_directory",
    "load_backbone",
    "load_slide",
    "tile_grid",
    "tissue_mask",
]
