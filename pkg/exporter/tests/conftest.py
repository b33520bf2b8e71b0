"""Shared fixtures: synthetic image datasets written to a session tmp dir.

Images are flat color blocks plus seeded Gaussian noise, one brightness band
per class, so exports stay fast while still giving each class its own
feature distribution.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest
from PIL import Image


def make_dataset(root: Path, classes: list[str], per_class: int, seed: int = 7) -> Path:
    rng = np.random.default_rng(seed)
    root.mkdir(parents=True, exist_ok=True)
    (root / "manifest.json").write_text(json.dumps({"classes": classes}), encoding="utf-8")
    for k, cls in enumerate(classes):
        folder = root / cls
        folder.mkdir(exist_ok=True)
        base = 40.0 + 150.0 * k / max(1, len(classes) - 1)
        for i in range(per_class):
            noise = rng.normal(0.0, 25.0, size=(64, 64, 3))
            arr = np.clip(base + noise, 0, 255).astype(np.uint8)
            Image.fromarray(arr).save(folder / f"img_{i:03d}.png")
    return root


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory) -> Path:
    return make_dataset(tmp_path_factory.mktemp("small") / "dataset", ["cat", "dog"], per_class=3)


@pytest.fixture(scope="session")
def large_dataset(tmp_path_factory) -> Path:
    return make_dataset(tmp_path_factory.mktemp("large") / "dataset", ["cat", "dog"], per_class=52)
