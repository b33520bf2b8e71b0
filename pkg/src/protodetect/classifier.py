"""Centroid fitting, per-head prediction, and the disagreement decision rule."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .core import EmbeddingDataset, as_simplex
from .errors import DimensionError, FitError, InvalidInput
from .metrics import L0Params, cosine_similarity, kl_divergence, l0_distance

__all__ = [
    "DetectionOutcome",
    "Head",
    "HeadSelection",
    "PrototypeSet",
    "detect",
    "detect_dataset",
    "fit_prototypes",
    "predict_head",
]

log = logging.getLogger(__name__)


class Head(str, Enum):
    KL = "kl"
    L0 = "l0"
    COSINE = "cosine"


@dataclass(frozen=True)
class HeadSelection:
    """An ordered selection of at least two distinct heads."""

    heads: tuple[Head, ...]

    def __post_init__(self):
        object.__setattr__(self, "heads", tuple(Head(h) for h in self.heads))
        if len(self.heads) < 2:
            raise InvalidInput("head selection needs at least two heads")
        if len(set(self.heads)) != len(self.heads):
            raise InvalidInput(f"duplicate heads in selection {self.heads}")

    @classmethod
    def parse(cls, spec: str) -> "HeadSelection":
        """Parse a comma-separated list such as 'kl,l0' or 'kl,l0,cosine'."""
        names = [part.strip().lower() for part in spec.split(",") if part.strip()]
        try:
            return cls(tuple(Head(name) for name in names))
        except ValueError:
            valid = ", ".join(h.value for h in Head)
            raise InvalidInput(f"unknown head in {spec!r}; valid heads: {valid}") from None


DEFAULT_HEADS = HeadSelection((Head.KL, Head.L0))


@dataclass(frozen=True)
class PrototypeSet:
    """Class centroids: row k of ``vectors`` is the prototype of class k."""

    vectors: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64)
        object.__setattr__(self, "vectors", v)
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 2:
            raise InvalidInput(f"prototype matrix must be (m, d) with d >= 2, got {v.shape}")
        for k in range(v.shape[0]):
            # The 1e-6 tolerance admits prototypes read back from f32 files.
            as_simplex(v[k], sum_tol=1e-6)

    @property
    def m(self) -> int:
        return self.vectors.shape[0]

    @property
    def d(self) -> int:
        return self.vectors.shape[1]


@dataclass(frozen=True)
class DetectionOutcome:
    """Decision-rule output: flag raised means abstention (predicted_class None)."""

    attack_flag: bool
    predicted_class: int | None
    per_head: dict[Head, int]

    def __post_init__(self):
        if self.attack_flag != (self.predicted_class is None):
            raise InvalidInput("attack_flag must be raised exactly when the class is withheld")


def fit_prototypes(train: EmbeddingDataset) -> PrototypeSet:
    """Per-class arithmetic means of a clean dataset.

    Requires every attacked flag to be 0 and at least one example per class.
    The mean of simplex vectors stays on the simplex (convexity), so no
    renormalization happens here.
    """
    if np.any(train.attacked_flags()):
        raise FitError("prototype fitting requires a clean dataset (attacked flags all 0)")
    labels = train.labels()
    emb = train.embeddings()
    vectors = np.zeros((train.m, train.d))
    for k in range(train.m):
        mask = labels == k
        if not np.any(mask):
            raise FitError(f"class {k} has no examples")
        vectors[k] = emb[mask].mean(axis=0)
    return PrototypeSet(vectors=vectors)


def _head_scores(p: np.ndarray, protos: PrototypeSet, head: Head, params: L0Params) -> np.ndarray:
    if head is Head.KL:
        return np.array([kl_divergence(protos.vectors[k], p) for k in range(protos.m)])
    if head is Head.L0:
        return np.array([l0_distance(protos.vectors[k], p, params) for k in range(protos.m)], dtype=np.float64)
    return np.array([-cosine_similarity(protos.vectors[k], p) for k in range(protos.m)])


def predict_head(p, protos: PrototypeSet, head: Head, params: L0Params) -> int:
    """argmin over classes of the head's distance (argmax for cosine).

    Ties break to the lowest class index; the integer-valued L0 head ties
    often, so ties are logged at debug level rather than treated as errors.
    """
    p = np.asarray(p, dtype=np.float64)
    if p.shape != (protos.d,):
        raise DimensionError(f"embedding shape {p.shape} != ({protos.d},)")
    scores = _head_scores(p, protos, Head(head), params)
    best = int(np.argmin(scores))
    if np.count_nonzero(scores == scores[best]) > 1:
        log.debug("head %s tie at score %r, broken to class %d", Head(head).value, scores[best], best)
    return best


def detect(p, protos: PrototypeSet, heads: HeadSelection, params: L0Params) -> DetectionOutcome:
    """Flag unless every selected head predicts the same class.

    With exactly the KL and L0 heads this is the two-head disagreement rule;
    larger selections flag on any disagreement.
    """
    per_head = {h: predict_head(p, protos, h, params) for h in heads.heads}
    classes = set(per_head.values())
    if len(classes) == 1:
        return DetectionOutcome(attack_flag=False, predicted_class=classes.pop(), per_head=per_head)
    return DetectionOutcome(attack_flag=True, predicted_class=None, per_head=per_head)


def detect_dataset(
    ds: EmbeddingDataset,
    protos: PrototypeSet,
    heads: HeadSelection,
    params: L0Params,
    threads: int = 1,
) -> list[tuple[str, DetectionOutcome]]:
    """Order-preserving detection over a dataset; thread count never changes output."""
    if ds.d != protos.d:
        raise DimensionError(f"dataset dimension {ds.d} != prototype dimension {protos.d}")

    def one(row):
        return (row.id, detect(row.embedding, protos, heads, params))

    if threads <= 1:
        return [one(row) for row in ds]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(one, ds.rows))
