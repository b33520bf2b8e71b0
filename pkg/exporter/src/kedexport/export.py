"""Export jobs: encode a labeled image folder into KED files.

A dataset is a directory holding ``manifest.json`` with a ``classes`` list
plus one subdirectory per class containing the images. Class labels are the
positions in that list, so the manifest order is the label order.

Both export paths push raw features through the same temperature softmax
with max-subtraction that the consumer applies to logits, then quantize to
f32 before writing. Inference runs in batches; the output file is written
in one pass, in dataset order.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from math import isfinite
from pathlib import Path

import numpy as np
import torch

from .encoders import build_image_encoder, embed_prompts, image_features, load_image, model_width
from .errors import ExportError
from .kedio import write_rows

CLASS_PLACEHOLDER = "[CLASS]"

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")

__all__ = ["CLASS_PLACEHOLDER", "ExportJob", "scan_dataset", "export_image_embeddings", "export_text_prototypes"]


@dataclass(frozen=True)
class ExportJob:
    model_id: str
    dataset_path: str
    out_embeddings: str = ""
    out_prototypes: str = ""
    prompt_template: str = f"a photo of {CLASS_PLACEHOLDER}"
    temperature: float = 1.0
    batch_size: int = 16

    def __post_init__(self) -> None:
        hits = self.prompt_template.count(CLASS_PLACEHOLDER)
        if hits != 1:
            raise ExportError(
                f"prompt template must contain {CLASS_PLACEHOLDER} exactly once, found {hits}"
            )
        if not (isfinite(self.temperature) and self.temperature > 0.0):
            raise ExportError(f"temperature must be positive, got {self.temperature!r}")
        if self.batch_size < 1:
            raise ExportError(f"batch size must be >= 1, got {self.batch_size}")


def scan_dataset(dataset_path: str) -> list[str]:
    """Return the class list after checking it against the directories on disk."""
    root = Path(dataset_path)
    manifest = root / "manifest.json"
    if not manifest.is_file():
        raise ExportError(f"no manifest.json under {root}")
    doc = json.loads(manifest.read_text(encoding="utf-8"))
    classes = doc.get("classes")
    if not isinstance(classes, list) or not classes or not all(isinstance(c, str) for c in classes):
        raise ExportError("dataset manifest needs a non-empty 'classes' list of strings")
    on_disk = sorted(p.name for p in root.iterdir() if p.is_dir())
    if sorted(classes) != on_disk:
        raise ExportError(
            f"dataset manifest lists {len(classes)} classes {sorted(classes)} "
            f"but the directories on disk are {on_disk}"
        )
    return classes


def _class_images(root: Path, cls: str) -> list[Path]:
    return sorted(p for p in (root / cls).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def _simplex_rows(features: np.ndarray, temperature: float) -> np.ndarray:
    z = features / temperature
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _write_sidecar(out_path: str, job: ExportJob, rows: int, classes: list[str]) -> dict:
    doc = {
        "producer": "kedexport",
        "model_id": job.model_id,
        "temperature": job.temperature,
        "rows": rows,
        "classes": len(classes),
        "sha256": hashlib.sha256(Path(out_path).read_bytes()).hexdigest(),
    }
    sidecar = Path(out_path + ".manifest.json")
    sidecar.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return doc


def export_image_embeddings(job: ExportJob) -> dict:
    """Encode every dataset image into one KED row; returns the sidecar manifest."""
    if not job.out_embeddings:
        raise ExportError("job has no embeddings output path")
    classes = scan_dataset(job.dataset_path)
    net, width = build_image_encoder(job.model_id)
    root = Path(job.dataset_path)
    labels: list[int] = []
    paths: list[Path] = []
    for idx, cls in enumerate(classes):
        images = _class_images(root, cls)
        if not images:
            raise ExportError(f"class directory {cls!r} holds no images")
        labels.extend([idx] * len(images))
        paths.extend(images)
    features = np.empty((len(paths), width), dtype=np.float64)
    for start in range(0, len(paths), job.batch_size):
        chunk = paths[start : start + job.batch_size]
        batch = torch.stack([load_image(p) for p in chunk])
        features[start : start + len(chunk)] = image_features(net, batch)
    write_rows(job.out_embeddings, labels, _simplex_rows(features, job.temperature), m=len(classes))
    return _write_sidecar(job.out_embeddings, job, len(paths), classes)


def export_text_prototypes(job: ExportJob, class_names: list[str]) -> dict:
    """Embed one prompt per class into a KED prototype file; returns the manifest.

    ``class_names`` are the words substituted into the prompt template; they
    may be friendlier than the directory names but must match the dataset
    class count, and their order fixes the prototype labels.
    """
    if not job.out_prototypes:
        raise ExportError("job has no prototypes output path")
    classes = scan_dataset(job.dataset_path)
    if len(class_names) != len(classes):
        raise ExportError(
            f"{len(class_names)} prototype names against {len(classes)} dataset classes"
        )
    width = model_width(job.model_id)
    prompts = [job.prompt_template.replace(CLASS_PLACEHOLDER, name) for name in class_names]
    rows = _simplex_rows(embed_prompts(prompts, width), job.temperature)
    write_rows(job.out_prototypes, list(range(len(classes))), rows, m=len(classes))
    return _write_sidecar(job.out_prototypes, job, len(classes), classes)
