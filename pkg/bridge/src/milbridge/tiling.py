"""Tissue segmentation and patch tiling.

Segmentation follows the usual H&E recipe: threshold the HSV saturation
channel after a median blur, close small holes, and keep contours above a
minimum area. Tiles come from a fixed grid; a tile survives when enough
of it lies on tissue. Both steps are deterministic for a given slide and
config, and the grid does not depend on the backbone, so every extractor
sees the identical tile set.
"""

from __future__ import annotations

from dataclasses import dataclass

import cv2
import numpy as np
from PIL import Image

from .errors import EmptySlideError, SlideError

Image.MAX_IMAGE_PIXELS = None  # WSIs exceed PIL's default bomb guard


@dataclass(frozen=True)
class TilingConfig:
    patch_size: int = 256          # pixels at the working magnification
    magnification: float = 20.0    # recorded; plain images are taken as-is
    sat_threshold: int = 8         # HSV saturation cut for tissue
    median_kernel: int = 7
    close_kernel: int = 4
    min_contour_area: float = 64.0  # in downsampled-mask pixels
    min_tissue_fraction: float = 0.5


def load_slide(path) -> np.ndarray:
    """Slide pixels as an RGB uint8 array (plain-image containers)."""
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("RGB"))
    except (OSError, ValueError) as exc:
        raise SlideError(f"cannot decode slide {path}: {exc}") from None


def tissue_mask(rgb: np.ndarray, cfg: TilingConfig) -> np.ndarray:
    """Boolean tissue mask at slide resolution."""
    hsv = cv2.cvtColor(rgb, cv2.COLOR_RGB2HSV)
    sat = cv2.medianBlur(hsv[:, :, 1], cfg.median_kernel)
    _, binary = cv2.threshold(sat, cfg.sat_threshold, 255, cv2.THRESH_BINARY)
    if cfg.close_kernel > 1:
        kernel = np.ones((cfg.close_kernel, cfg.close_kernel), dtype=np.uint8)
        binary = cv2.morphologyEx(binary, cv2.MORPH_CLOSE, kernel)
    contours, _ = cv2.findContours(binary, cv2.RETR_EXTERNAL, cv2.CHAIN_APPROX_SIMPLE)
    mask = np.zeros(binary.shape, dtype=np.uint8)
    kept = [c for c in contours if cv2.contourArea(c) >= cfg.min_contour_area]
    if kept:
        cv2.drawContours(mask, kept, -1, 255, thickness=cv2.FILLED)
    return mask > 0


def tile_grid(rgb: np.ndarray, cfg: TilingConfig) -> tuple[np.ndarray, np.ndarray]:
    """(patches, coords): tissue tiles in row-major grid order.

    patches: (m, patch, patch, 3) uint8; coords: (m, 2) int32 level-0
    x,y origins. Raises EmptySlideError when no tile clears the tissue
    fraction.
    """
    mask = tissue_mask(rgb, cfg)
    p = cfg.patch_size
    h, w = rgb.shape[:2]
    patches, coords = [], []
    for y in range(0, h - p + 1, p):
        for x in range(0, w - p + 1, p):
            frac = mask[y:y + p, x:x + p].mean()
            if frac >= cfg.min_tissue_fraction:
                patches.append(rgb[y:y + p, x:x + p])
                coords.append((x, y))
    if not patches:
        raise EmptySlideError(
            f"no tissue tiles at patch_size={p} "
            f"(threshold {cfg.min_tissue_fraction:.2f})"
        )
    return np.stack(patches), np.asarray(coords, dtype=np.int32)
