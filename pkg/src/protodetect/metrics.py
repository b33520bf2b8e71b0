"""Similarity and distance heads over simplex vectors, plus training surrogates.

All functions take the prototype-style vector as the first argument and the
embedding as the second. Order matters: KL divergence is asymmetric and every
head here follows the prototype-first convention, so tests must not assume
symmetry.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, InvalidInput

__all__ = [
    "L0Params",
    "cosine_similarity",
    "grad_sim_kl_wrt_p",
    "grad_smooth_l0_wrt_p",
    "kl_divergence",
    "l0_distance",
    "mean_abs_gap",
    "sigmoid",
    "sim_kl",
    "sim_l0",
    "smooth_l0",
]


@dataclass(frozen=True)
class L0Params:
    """Relative threshold tau in [0,1] and surrogate smoothness phi > 0."""

    tau: float = 0.75
    phi: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise InvalidInput(f"tau must be in [0,1], got {self.tau!r}")
        if not self.phi > 0.0:
            raise InvalidInput(f"phi must be positive, got {self.phi!r}")


def _pair(c, p) -> tuple[np.ndarray, np.ndarray]:
    c = np.asarray(c, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    if c.shape != p.shape:
        raise DimensionError(f"shape mismatch {c.shape} vs {p.shape}")
    return c, p


def kl_divergence(c, p) -> float:
    """KL(c || p) = sum_i c_i ln(c_i / p_i), natural log.

    Non-negative for simplex inputs, zero exactly when c == p. Both inputs must
    be strictly positive; that is the A-series simplex invariant, not re-checked
    here for speed.
    """
    c, p = _pair(c, p)
    return float(np.sum(c * (np.log(c) - np.log(p))))


def mean_abs_gap(c, p) -> float:
    """mu(c, p) = (1/d) sum_i |c_i - p_i|. Symmetric."""
    c, p = _pair(c, p)
    return float(np.mean(np.abs(c - p)))


def l0_distance(c, p, params: L0Params) -> int:
    """Count of coordinates whose gap strictly exceeds tau * mu(c, p).

    card{ i : |c_i - p_i| - tau * mu(c,p) > 0 }. The inequality is strict, so a
    coordinate sitting exactly at the threshold does not count, and c == p
    yields 0 (mu = 0 and no strict exceedance).
    """
    c, p = _pair(c, p)
    gaps = np.abs(c - p)
    return int(np.count_nonzero(gaps - params.tau * np.mean(gaps) > 0.0))


def sigmoid(x):
    """Numerically stable logistic function, elementwise."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def smooth_l0(c, p, params: L0Params) -> float:
    """Differentiable surrogate of l0_distance.

    sum_i sigmoid((|c_i - p_i| - tau * mu(c,p)) / phi). Converges to the hard
    count as phi -> 0 away from threshold ties. At c == p every argument is 0,
    so the value is d/2 (sigmoid(0) = 1/2); trainers should avoid identical
    pairs rather than expect a zero floor.
    """
    c, p = _pair(c, p)
    gaps = np.abs(c - p)
    u = gaps - params.tau * np.mean(gaps)
    return float(np.sum(sigmoid(u / params.phi)))


def sim_kl(c, p) -> float:
    """exp(-KL(c || p)), a similarity in (0, 1]."""
    return float(np.exp(-kl_divergence(c, p)))


def sim_l0(c, p, params: L0Params) -> float:
    """1 - smooth_l0(c, p) / d, a similarity in [0, 1]."""
    c, p = _pair(c, p)
    return 1.0 - smooth_l0(c, p, params) / c.size


def cosine_similarity(c, p) -> float:
    """<c, p> / (||c|| ||p||); lands in (0, 1] for simplex inputs."""
    c, p = _pair(c, p)
    return float(np.dot(c, p) / (np.linalg.norm(c) * np.linalg.norm(p)))


def grad_sim_kl_wrt_p(c, p) -> np.ndarray:
    """d sim_kl(c, p) / d p, analytic.

    sim_kl = exp(-sum c_i (ln c_i - ln p_i)) so the partial w.r.t. p_l is
    sim_kl * c_l / p_l.
    """
    c, p = _pair(c, p)
    return sim_kl(c, p) * c / p


def grad_smooth_l0_wrt_p(c, p, params: L0Params) -> np.ndarray:
    """d smooth_l0(c, p) / d p, analytic.

    With u_i = |c_i - p_i| - tau * mu and sgn_i = sign(c_i - p_i):

        d smooth_l0 / d p_l = (sgn_l / phi) * (tau / d * sum_i s'_i - s'_l)

    where s'_i is the sigmoid derivative at u_i / phi. The |.| kink at
    c_l == p_l uses subgradient 0 (np.sign returns 0 there), which keeps
    training deterministic and matches finite differences away from kinks.
    """
    c, p = _pair(c, p)
    d = c.size
    gaps = np.abs(c - p)
    u = gaps - params.tau * np.mean(gaps)
    s = sigmoid(u / params.phi)
    sprime = s * (1.0 - s)
    sgn = np.sign(c - p)
    return (sgn / params.phi) * (params.tau / d * np.sum(sprime) - sprime)
