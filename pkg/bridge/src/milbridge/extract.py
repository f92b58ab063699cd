"""Slide-to-MILF extraction jobs.

Tiling is computed once per slide from the image alone, so running several
backbones over the same slide yields byte-identical coordinate lists —
the alignment contract ensemble fusion depends on.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from . import milf
from .backbones import Backbone, load_backbone
from .tiling import TilingConfig, load_slide, tile_grid


@dataclass
class ExtractionJob:
    slide_path: Path
    backbone_id: str
    out_path: Path
    patch_size: int = 256
    magnification: float = 20.0
    batch_size: int = 32
    weights: str = "pretrained"
    seed: int = 0
    tiling: TilingConfig = field(init=False)

    def __post_init__(self):
        self.slide_path = Path(self.slide_path)
        self.out_path = Path(self.out_path)
        self.tiling = TilingConfig(patch_size=self.patch_size,
                                   magnification=self.magnification)


def extract(job: ExtractionJob, backbone: Backbone | None = None) -> Path:
    """Run one job; returns the written MILF path.

    Pass a preloaded ``backbone`` when batching many slides so the model
    loads once.
    """
    if backbone is None:
        backbone = load_backbone(job.backbone_id, weights=job.weights, seed=job.seed)
    rgb = load_slide(job.slide_path)
    patches, coords = tile_grid(rgb, job.tiling)
    values = backbone.embed(patches, batch_size=job.batch_size)
    milf.write(job.out_path, backbone.name, values, coords)
    return job.out_path


def extract_directory(slide_dir, out_dir, backbone_id: str, patch_size: int = 256,
                      magnification: float = 20.0, batch_size: int = 32,
                      weights: str = "pretrained", seed: int = 0,
                      suffixes=(".png", ".jpg", ".jpeg", ".tif", ".tiff")) -> list[Path]:
    """One MILF per slide image under ``out_dir/<backbone_id>/``."""
    slide_dir, out_dir = Path(slide_dir), Path(out_dir)
    slides = sorted(p for p in slide_dir.iterdir()
                    if p.suffix.lower() in suffixes and p.is_file())
    backbone = load_backbone(backbone_id, weights=weights, seed=seed)
    written = []
    for slide in slides:
        job = ExtractionJob(slide, backbone_id, out_dir / backbone_id / f"{slide.stem}.milf",
                            patch_size=patch_size, magnification=magnification,
                            batch_size=batch_size, weights=weights, seed=seed)
        written.append(extract(job, backbone=backbone))
    return written
