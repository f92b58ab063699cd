import numpy as np
import pytest
from PIL import Image


def paint_slide(width=768, height=768):
    """Synthetic H&E-ish slide: saturated tissue blobs on white glass."""
    rgb = np.full((height, width, 3), 245, dtype=np.uint8)
    yy, xx = np.mgrid[0:height, 0:width]
    blobs = [
        (260, 260, 210, (186, 100, 160)),   # eosin-pink lobe
        (540, 420, 150, (120, 70, 150)),    # hematoxylin-purple lobe
    ]
    for cx, cy, r, color in blobs:
        mask = (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
        for c in range(3):
            rgb[..., c][mask] = color[c]
    # achromatic texture: per-pixel luminance jitter keeps glass unsaturated
    rng = np.random.default_rng(7)
    noise = rng.integers(-12, 13, size=(height, width, 1), dtype=np.int16)
    return np.clip(rgb.astype(np.int16) + noise, 0, 255).astype(np.uint8)


@pytest.fixture(scope="session")
def slide_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("slides") / "case_a.png"
    Image.fromarray(paint_slide()).save(path)
    return path


@pytest.fixture(scope="session")
def blank_slide_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("slides") / "blank.png"
    Image.fromarray(np.full((512, 512, 3), 250, dtype=np.uint8)).save(path)
    return path
