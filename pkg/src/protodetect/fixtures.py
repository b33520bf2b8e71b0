"""Bundled reference cases and synthetic instance generators.

METRIC_CASES carries hand-evaluated values for the distance and similarity
functions; CONFUSION_CASES carries the eight reference confusion-count rows
(two backbones, two attack budgets, split by guarantee coverage) together
with the published two-decimal metric values they must reproduce. Sources
are tagged "hand" (worked arithmetic), "table" (published reference
numbers) or "trivial" (structural identities).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .classifier import PrototypeSet
from .core import EmbeddingDataset, LabeledEmbedding, normalize_to_simplex
from .errors import InvalidInput

__all__ = [
    "CONFUSION_CASES",
    "FixtureCase",
    "METRIC_CASES",
    "generate_gaussian_clusters",
    "generate_separable_instance",
]


@dataclass(frozen=True)
class FixtureCase:
    name: str
    inputs: dict
    expected: dict
    source: str
    note: str = ""

    def __post_init__(self):
        if self.source not in ("hand", "table", "trivial"):
            raise InvalidInput(f"unknown fixture source {self.source!r}")


METRIC_CASES: tuple[FixtureCase, ...] = (
    FixtureCase(
        name="kl_half_half_vs_quarter",
        inputs={"c": [0.5, 0.5], "p": [0.25, 0.75]},
        expected={"kl": 0.14384103622589046, "sim_kl": 0.8660254037844386},
        source="hand",
        note="0.5 ln 2 + 0.5 ln(2/3); sim_kl = exp(-kl) = sqrt(3)/2",
    ),
    FixtureCase(
        name="cosine_same_pair",
        inputs={"c": [0.5, 0.5], "p": [0.25, 0.75]},
        expected={"cosine": 0.8944271909999159},
        source="hand",
        note="(1/sqrt(2)) * 1 / sqrt(0.625) = 2/sqrt(5)",
    ),
    FixtureCase(
        name="l0_quarter_spike_d4",
        inputs={
            "c": [0.7, 0.1, 0.1, 0.1],
            "p": [0.25, 0.25, 0.25, 0.25],
            "tau": 0.75,
        },
        expected={"mu": 0.225, "threshold": 0.16875, "l0": 1},
        source="hand",
        note="gaps (0.45, 3x0.15); only 0.45 exceeds tau*mu",
    ),
    FixtureCase(
        name="smooth_l0_d2",
        inputs={"c": [0.6, 0.4], "p": [0.4, 0.6], "tau": 0.75, "phi": 0.5},
        expected={"smooth_l0": 1.04995837495788, "sim_l0": 0.47502081252106},
        source="hand",
        note="both gaps 0.2, mu 0.2; 2 sigma(0.1) = 1 + tanh(0.05)",
    ),
    FixtureCase(
        name="softmax_ln3",
        inputs={"raw": [1.0986122886681098, 0.0], "temperature": 1.0},
        expected={"p": [0.75, 0.25]},
        source="hand",
        note="exp(ln 3) = 3 against 1",
    ),
    FixtureCase(
        name="predict_kl_two_protos",
        inputs={
            "p": [0.6, 0.4],
            "protos": [[0.7, 0.3], [0.3, 0.7]],
        },
        expected={"kl_to_0": 0.021600854143546535, "kl_to_1": 0.18378689738681228, "argmin": 0},
        source="hand",
        note="prototype-first KL: 0.0216 to class 0 beats 0.1838 to class 1",
    ),
    FixtureCase(
        name="bce_half",
        inputs={"s": 0.5, "y": 1},
        expected={"bce": 0.6931471805599453},
        source="hand",
        note="-ln 0.5",
    ),
    FixtureCase(
        name="sphere_max_d2",
        inputs={"v": [3.0, 4.0], "epsilon": 1.0},
        expected={"delta": [0.6, 0.8], "objective": 5.0},
        source="hand",
        note="Cauchy-Schwarz equality at eps v / ||v||",
    ),
    FixtureCase(
        name="waterfill_pinned_d3",
        inputs={
            "v": [0.5, 3.0, 3.0],
            "epsilon": 1.0,
            "min_bounds": [0.9, 1.2, 1.3],
            "k": 1,
        },
        expected={
            "objective": 2.299324200890693,
            "pinned": [0],
            "epsilon_remain": 0.4358898943540674,
            "water_level": 0.10274023338281627,
        },
        source="hand",
        note="pin coordinate 0 at 0.9; residual sqrt(0.19) spread over v[1:]",
    ),
)


def _confusion_case(name, tp, fn, fp, tn, acc, prec, rec, f1):
    return FixtureCase(
        name=name,
        inputs={"tp": tp, "fn": fn, "fp": fp, "tn": tn},
        expected={"accuracy": acc, "precision": prec, "recall": rec, "f1": f1},
        source="table",
    )


CONFUSION_CASES: tuple[FixtureCase, ...] = (
    _confusion_case("resnet_eps2_compliant", 3345, 0, 0, 3345, 1.00, 1.00, 1.00, 1.00),
    _confusion_case("resnet_eps2_non_compliant", 690, 965, 260, 1395, 0.63, 0.73, 0.42, 0.53),
    _confusion_case("resnet_eps4_compliant", 2967, 0, 0, 2967, 1.00, 1.00, 1.00, 1.00),
    _confusion_case("resnet_eps4_non_compliant", 919, 1114, 260, 1773, 0.66, 0.78, 0.45, 0.57),
    _confusion_case("clip_eps2_compliant", 510, 0, 0, 510, 1.00, 1.00, 1.00, 1.00),
    _confusion_case("clip_eps2_non_compliant", 3762, 728, 2206, 2284, 0.67, 0.63, 0.84, 0.72),
    _confusion_case("clip_eps4_compliant", 556, 0, 0, 556, 1.00, 1.00, 1.00, 1.00),
    _confusion_case("clip_eps4_non_compliant", 3555, 889, 2206, 2238, 0.65, 0.62, 0.80, 0.70),
)


def generate_separable_instance(
    m: int,
    d: int,
    separation: float,
    seed: int,
    n_per_class: int = 10,
    noise: float = 0.1,
) -> tuple[PrototypeSet, EmbeddingDataset]:
    """Synthetic prototypes with one dominant coordinate per class, plus samples.

    Class k's prototype is softmax(separation * e_{h_k}) for a seeded choice of
    distinct home coordinates h_k, so the gap between any two prototypes
    concentrates on two coordinates and grows with ``separation``. Each sample
    sharpens its own prototype along the home coordinate: a convex mixture
    (1 - lam) p + lam softmax(s' e_h) with lam up to ``noise`` and s' drawn
    above ``separation``. Every spike softmax is uniform off its home
    coordinate, so the mixture's deviation from p is one large home gap plus
    d - 1 equal small gaps. Against the own prototype only the home gap
    crosses the relative threshold (for d >= 4 and tau near the default),
    while a rival prototype disagrees on two spike coordinates, which keeps
    both heads pointed at the true class. For d <= 3 a zero-sum deviation
    always concentrates at least half its mass on one coordinate and the
    count degenerates to a tie, so samples there sit exactly at the
    prototype. With separation near zero the classes collapse toward uniform
    and nothing is compliant; large separation with a small budget yields
    compliant samples.
    """
    if m < 1 or d < 2:
        raise InvalidInput(f"need m >= 1 and d >= 2, got m={m}, d={d}")
    if m > d:
        raise InvalidInput(f"distinct class spikes need m <= d, got m={m}, d={d}")
    if separation < 0.0 or noise < 0.0:
        raise InvalidInput("separation and noise must be non-negative")
    rng = np.random.default_rng(seed)
    homes = rng.permutation(d)[:m]

    def spike(home: int, strength: float) -> np.ndarray:
        logits = np.zeros(d)
        logits[home] = strength
        return normalize_to_simplex(logits, 1.0)

    protos = np.stack([spike(homes[k], separation) for k in range(m)])
    rows = []
    idx = 0
    for k in range(m):
        for _ in range(n_per_class):
            if d <= 3 or noise == 0.0:
                emb = protos[k].copy()
            else:
                lam = noise * rng.uniform(0.25, 1.0)
                sharper = spike(homes[k], separation + rng.uniform(0.5, 1.5))
                emb = (1.0 - lam) * protos[k] + lam * sharper
            rows.append(LabeledEmbedding(id=str(idx), label=k, attacked=False, embedding=emb))
            idx += 1
    return PrototypeSet(vectors=protos), EmbeddingDataset(d=d, m=m, rows=tuple(rows))


def generate_gaussian_clusters(f: int, m: int, n: int, seed: int, spread: float = 0.5):
    """n raw-feature samples in m Gaussian clusters; returns [(x, class), ...].

    Cluster centers are seeded standard normal scaled by 2 so that classes are
    linearly separable at the default spread; rows cycle through classes so
    every class gets n // m or n // m + 1 samples.
    """
    if f < 1 or m < 1 or n < 1:
        raise InvalidInput(f"need positive f, m, n; got f={f}, m={m}, n={n}")
    rng = np.random.default_rng(seed)
    centers = 2.0 * rng.standard_normal((m, f))
    data = []
    for i in range(n):
        cls = i % m
        data.append((centers[cls] + spread * rng.standard_normal(f), cls))
    return data
