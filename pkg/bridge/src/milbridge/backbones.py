"""Patch-embedding backbones.

Three extractors with registry-pinned output dimensions:

- ``resnet50``: torchvision ResNet-50 truncated after its third stage and
  globally average-pooled (1024-d), the truncation whose dimension the
  downstream registry expects.
- ``uni``: ViT-L/16 (1024-d CLS token).
- ``hibou-base``: ViT-B/14 with 4 register tokens (768-d CLS token).

``weights="pretrained"`` pulls the published checkpoints and raises
WeightLoadError when they are unreachable (offline environments);
``weights="random"`` builds the same architectures with a seeded
initialization so pipelines and conformance tests run without downloads.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .errors import BackboneError, WeightLoadError

# name -> (embedding dim, model input size)
REGISTRY: dict[str, tuple[int, int]] = {
    "resnet50": (1024, 256),
    "uni": (1024, 224),
    "hibou-base": (768, 224),
}

_IMAGENET_MEAN = (0.485, 0.456, 0.406)
_IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass
class Backbone:
    """A frozen feature extractor with its preprocessing contract."""

    name: str
    dim: int
    input_size: int
    module: nn.Module

    @torch.no_grad()
    def embed(self, patches: np.ndarray, batch_size: int = 32) -> np.ndarray:
        """(m, p, p, 3) uint8 patches -> (m, dim) float32 embeddings."""
        if patches.ndim != 4 or patches.shape[-1] != 3:
            raise BackboneError(f"expected (m, p, p, 3) uint8 patches, got {patches.shape}")
        out = []
        mean = torch.tensor(_IMAGENET_MEAN).view(1, 3, 1, 1)
        std = torch.tensor(_IMAGENET_STD).view(1, 3, 1, 1)
        for start in range(0, len(patches), batch_size):
            chunk = patches[start:start + batch_size]
            x = torch.from_numpy(chunk).permute(0, 3, 1, 2).float() / 255.0
            if x.shape[-1] != self.input_size:
                x = nn.functional.interpolate(
                    x, size=(self.input_size, self.input_size),
                    mode="bilinear", align_corners=False)
            x = (x - mean) / std
            out.append(self.module(x).numpy())
        emb = np.concatenate(out, axis=0).astype(np.float32)
        if emb.shape != (len(patches), self.dim):
            raise BackboneError(f"{self.name}: bad embedding shape {emb.shape}")
        return emb


class _ResnetTrunk(nn.Module):
    """ResNet-50 through stage 3, then global average pooling (1024-d)."""

    def __init__(self, resnet: nn.Module):
        super().__init__()
        self.trunk = nn.Sequential(*list(resnet.children())[:-3])
        self.pool = nn.AdaptiveAvgPool2d(1)

    def forward(self, x):
        return self.pool(self.trunk(x)).flatten(1)


class _VitCls(nn.Module):
    """CLS-token readout of a Hugging Face ViT-style encoder."""

    def __init__(self, encoder: nn.Module):
        super().__init__()
        self.encoder = encoder

    def forward(self, x):
        return self.encoder(pixel_values=x).last_hidden_state[:, 0]


def _seed_for(name: str, seed: int) -> int:
    digest = hashlib.sha256(f"{name}:{seed}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


def _build_resnet50(weights: str, seed: int) -> nn.Module:
    import torchvision

    if weights == "pretrained":
        try:
            net = torchvision.models.resnet50(
                weights=torchvision.models.ResNet50_Weights.IMAGENET1K_V1)
        except Exception as exc:  # download failure surfaces as URLError etc.
            raise WeightLoadError(f"resnet50 weights unavailable: {exc}") from None
    else:
        torch.manual_seed(_seed_for("resnet50", seed))
        net = torchvision.models.resnet50(weights=None)
    return _ResnetTrunk(net)


def _build_uni(weights: str, seed: int) -> nn.Module:
    from transformers import ViTConfig, ViTModel

    if weights == "pretrained":
        try:
            from transformers import AutoModel

            return _VitCls(AutoModel.from_pretrained("MahmoodLab/UNI"))
        except Exception as exc:
            raise WeightLoadError(f"uni weights unavailable: {exc}") from None
    torch.manual_seed(_seed_for("uni", seed))
    config = ViTConfig(hidden_size=1024, num_hidden_layers=24, num_attention_heads=16,
                       intermediate_size=4096, image_size=224, patch_size=16)
    return _VitCls(ViTModel(config))


def _build_hibou_base(weights: str, seed: int) -> nn.Module:
    from transformers import Dinov2WithRegistersConfig, Dinov2WithRegistersModel

    if weights == "pretrained":
        try:
            from transformers import AutoModel

            return _VitCls(AutoModel.from_pretrained("histai/hibou-b",
                                                     trust_remote_code=True))
        except Exception as exc:
            raise WeightLoadError(f"hibou-base weights unavailable: {exc}") from None
    torch.manual_seed(_seed_for("hibou-base", seed))
    config = Dinov2WithRegistersConfig(hidden_size=768, num_hidden_layers=12,
                                       num_attention_heads=12, patch_size=14,
                                       image_size=224, num_register_tokens=4)
    return _VitCls(Dinov2WithRegistersModel(config))


_BUILDERS = {
    "resnet50": _build_resnet50,
    "uni": _build_uni,
    "hibou-base": _build_hibou_base,
}


def load_backbone(name: str, weights: str = "pretrained", seed: int = 0) -> Backbone:
    if name not in REGISTRY:
        raise BackboneError(f"unknown backbone {name!r}; expected one of {sorted(REGISTRY)}")
    if weights not in ("pretrained", "random"):
        raise BackboneError(f"weights must be 'pretrained' or 'random', got {weights!r}")
    dim, input_size = REGISTRY[name]
    module = _BUILDERS[name](weights, seed)
    module.eval()
    return Backbone(name=name, dim=dim, input_size=input_size, module=module)
