"""Domain types and simplex arithmetic shared by every other module.

Embeddings live on the interior of the probability simplex: strictly positive
coordinates summing to 1 within ``SUM_TOL``. Everything downstream (the KL head
in particular) relies on strict positivity, so normalization clamps instead of
allowing exact zeros.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, InvalidInput

__all__ = [
    "SUM_TOL",
    "POSITIVITY_FLOOR",
    "AssumptionVerdict",
    "EmbeddingDataset",
    "LabeledEmbedding",
    "Perturbation",
    "as_simplex",
    "is_simplex",
    "normalize_to_simplex",
    "validate_assumptions",
]

# Absolute tolerance on sum(values) == 1 for in-memory vectors and CSV rows.
SUM_TOL = 1e-9

# Softmax outputs are clamped up to this to keep log terms finite. The value is
# representable in float32 so binary serialization preserves positivity.
POSITIVITY_FLOOR = 1e-30


def as_simplex(values, *, sum_tol: float = SUM_TOL) -> np.ndarray:
    """Validate ``values`` as a simplex vector and return it as float64.

    Raises InvalidInput when the vector is not finite, not strictly positive,
    shorter than 2 entries, or off the simplex by more than ``sum_tol``.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1 or v.size < 2:
        raise InvalidInput(f"simplex vector needs >= 2 entries in one axis, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise InvalidInput("simplex vector has non-finite entries")
    if np.any(v <= 0.0):
        raise InvalidInput("simplex vector must be strictly positive")
    if np.any(v > 1.0 + sum_tol):
        raise InvalidInput("simplex vector has an entry above 1")
    total = float(np.sum(v))
    if abs(total - 1.0) > sum_tol:
        raise InvalidInput(f"simplex vector sums to {total!r}, outside tolerance {sum_tol}")
    return v


def is_simplex(values, *, sum_tol: float = SUM_TOL) -> bool:
    """Non-raising twin of as_simplex."""
    try:
        as_simplex(values, sum_tol=sum_tol)
    except InvalidInput:
        return False
    return True


def normalize_to_simplex(raw, temperature: float) -> np.ndarray:
    """Temperature softmax with max-subtraction, clamped to stay positive.

    exp(raw_i / temperature) / sum_j exp(raw_j / temperature), computed after
    subtracting the maximum so saturated inputs cannot overflow. Outputs are
    clamped to at least POSITIVITY_FLOOR; the clamp never moves the sum outside
    SUM_TOL because it adds less than d * 1e-30.
    """
    x = np.asarray(raw, dtype=np.float64)
    if x.ndim != 1 or x.size < 2:
        raise InvalidInput(f"expected a vector with >= 2 entries, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise InvalidInput("cannot normalize non-finite input")
    if not (temperature > 0.0):
        raise InvalidInput(f"temperature must be positive, got {temperature!r}")
    z = x / temperature
    z = z - np.max(z)
    e = np.exp(z)
    p = e / np.sum(e)
    return np.maximum(p, POSITIVITY_FLOOR)


@dataclass(frozen=True)
class LabeledEmbedding:
    """One dataset row. ``attacked`` is the ground-truth flag a."""

    id: str
    label: int
    attacked: bool
    embedding: np.ndarray


@dataclass(frozen=True)
class EmbeddingDataset:
    """A fixed-dimension collection of labeled rows; m is the class count."""

    d: int
    m: int
    rows: tuple[LabeledEmbedding, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "rows", tuple(self.rows))
        if self.d < 2:
            raise InvalidInput(f"dataset dimension must be >= 2, got {self.d}")
        if self.m < 1:
            raise InvalidInput(f"dataset class count must be >= 1, got {self.m}")
        for i, row in enumerate(self.rows):
            if row.embedding.shape != (self.d,):
                raise DimensionError(f"row {i}: embedding shape {row.embedding.shape} != ({self.d},)")
            if not 0 <= row.label < self.m:
                raise InvalidInput(f"row {i}: label {row.label} outside [0, {self.m})")

    def __len__(self) -> int:
        return len(self.rows)

    def __iter__(self):
        return iter(self.rows)

    def embeddings(self) -> np.ndarray:
        """All embeddings stacked as an (n, d) array."""
        if not self.rows:
            return np.empty((0, self.d))
        return np.stack([r.embedding for r in self.rows])

    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.rows], dtype=np.int64)

    def attacked_flags(self) -> np.ndarray:
        return np.array([r.attacked for r in self.rows], dtype=bool)


@dataclass(frozen=True)
class Perturbation:
    """An additive perturbation with its energy budget.

    The budget bound is deliberately not enforced at construction: the whole
    point of validate_assumptions is to report when ||delta||_2 exceeds epsilon,
    which requires representing the violating pair.
    """

    delta: np.ndarray
    epsilon: float

    @property
    def within_budget(self) -> bool:
        return float(np.linalg.norm(self.delta)) <= self.epsilon + 1e-9


@dataclass(frozen=True)
class AssumptionVerdict:
    """Independent verdicts for the detector's standing assumptions.

    simplex_clean / simplex_attacked: p and p + delta lie on the simplex.
    within_budget: ||delta||_2 <= epsilon.
    bounded_ratio: |delta_i| <= (3/2) |p_i| coordinate-wise.
    """

    simplex_clean: bool
    simplex_attacked: bool
    within_budget: bool
    bounded_ratio: bool

    @property
    def all_hold(self) -> bool:
        return self.simplex_clean and self.simplex_attacked and self.within_budget and self.bounded_ratio


def validate_assumptions(p, pert: Perturbation) -> AssumptionVerdict:
    """Check each detector assumption independently for (p, p + delta)."""
    p = np.asarray(p, dtype=np.float64)
    delta = np.asarray(pert.delta, dtype=np.float64)
    if p.shape != delta.shape:
        raise DimensionError(f"p has shape {p.shape} but delta has shape {delta.shape}")
    attacked = p + delta
    return AssumptionVerdict(
        simplex_clean=is_simplex(p),
        simplex_attacked=is_simplex(attacked),
        within_budget=pert.within_budget,
        bounded_ratio=bool(np.all(np.abs(delta) <= 1.5 * np.abs(p) + 1e-12)),
    )
