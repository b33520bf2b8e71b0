"""Encoders that back the export jobs.

Images go through a torchvision backbone with the classification head cut
off, so a forward pass returns penultimate features. Backbone weights are
initialized from a fixed seed instead of downloaded checkpoints; the
consumer needs rows that live on the simplex and keep class structure, not
ImageNet accuracy, and a fixed seed keeps exports reproducible offline.

Prompts have no text tower here, so they are embedded with a hashing
encoder: every token owns a Gaussian vector seeded from its sha256 digest,
and a prompt embeds as the mean of its token vectors. That is deterministic
across processes and platforms, which the manifest digest relies on.
"""

from __future__ import annotations

import hashlib
from collections.abc import Sequence
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from torch import nn
from torchvision.models import resnet18

from .errors import ExportError

IMAGE_MODELS = {"resnet18": 512}

EXPORT_RESOLUTION = 64

__all__ = [
    "IMAGE_MODELS",
    "EXPORT_RESOLUTION",
    "model_width",
    "build_image_encoder",
    "load_image",
    "image_features",
    "embed_prompts",
]


def model_width(model_id: str) -> int:
    if model_id not in IMAGE_MODELS:
        known = ", ".join(sorted(IMAGE_MODELS))
        raise ExportError(f"unknown model id {model_id!r}, expected one of: {known}")
    return IMAGE_MODELS[model_id]


def build_image_encoder(model_id: str) -> tuple[nn.Module, int]:
    """Return an eval-mode feature extractor and its output width."""
    width = model_width(model_id)
    torch.manual_seed(0)
    net = resnet18(weights=None)
    net.fc = nn.Identity()
    net.eval()
    return net, width


def load_image(path: Path) -> torch.Tensor:
    """Load one image as a CHW float tensor at the export resolution."""
    with Image.open(path) as img:
        rgb = img.convert("RGB").resize(
            (EXPORT_RESOLUTION, EXPORT_RESOLUTION), Image.Resampling.BILINEAR
        )
    arr = np.asarray(rgb, dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


@torch.no_grad()
def image_features(net: nn.Module, batch: torch.Tensor) -> np.ndarray:
    """Run one image batch and return penultimate features as float64."""
    return net(batch).double().numpy()


def _token_vector(token: str, dim: int) -> np.ndarray:
    seed = int.from_bytes(hashlib.sha256(token.encode("utf-8")).digest()[:8], "little")
    return np.random.default_rng(seed).standard_normal(dim)


def embed_prompts(prompts: Sequence[str], dim: int) -> np.ndarray:
    """Embed each prompt as the mean of its token vectors, shape (len, dim)."""
    out = np.zeros((len(prompts), dim), dtype=np.float64)
    for i, prompt in enumerate(prompts):
        tokens = prompt.lower().split()
        if not tokens:
            raise ExportError(f"prompt {i} is empty")
        out[i] = np.mean([_token_vector(tok, dim) for tok in tokens], axis=0)
    return out
