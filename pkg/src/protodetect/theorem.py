"""Mechanized mutual-exclusion analysis for the dual-head detector.

The chain of reasoning, each step its own operation so tests can probe it:

1. A KL flip under budget epsilon forces v . delta > delta_kl(p*) where
   v_i = (c_hat_i - c*_i) / p*_i (compute_kl_flip, kl_flip_lhs).
2. An L0 flip forces at least one coordinate to move by min_i
   (compute_l0_flip, with the unknown ||delta||_1 replaced by sqrt(d) eps).
3. Spending budget on forced coordinates caps what remains for the KL
   objective; build_partition and tau_condition_holds express that cap, and
   the cap is computed through the exact constrained maximizer so the
   condition agrees with the solver by construction.
4. gamma_threshold turns the same tension into a per-coordinate gap threshold
   Gamma_j(eps); a coordinate whose inter-prototype gap exceeds it witnesses
   that no single perturbation can fool both heads toward that rival.
5. classify_compliance runs the full per-rival gate and adds a second-order
   safety margin kappa eps^2 (kappa = max_i |c_hat_i - c*_i| / p*_i^2) that
   accounts for the curvature the linearized KL condition drops.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .attack import ConstrainedMaxProblem, _solve_details, forced_min_bounds
from .classifier import PrototypeSet
from .core import as_simplex
from .errors import DimensionError, GammaUndefined, Infeasible, InvalidInput
from .metrics import kl_divergence

__all__ = [
    "ComplianceReport",
    "ExclusionPartition",
    "FlipContext",
    "KLFlipQuantities",
    "L0FlipQuantities",
    "build_partition",
    "classify_compliance",
    "compute_kl_flip",
    "compute_l0_flip",
    "gamma_threshold",
    "kl_flip_lhs",
    "tau_condition_holds",
]

_BOUND_SLACK = 1e-12


@dataclass(frozen=True)
class FlipContext:
    """One (clean embedding, true prototype, rival prototype) triple under budget."""

    p_star: np.ndarray
    c_star: np.ndarray
    c_hat: np.ndarray
    epsilon: float
    tau: float

    def __post_init__(self):
        object.__setattr__(self, "p_star", as_simplex(self.p_star))
        object.__setattr__(self, "c_star", as_simplex(self.c_star))
        object.__setattr__(self, "c_hat", as_simplex(self.c_hat))
        if not (self.p_star.shape == self.c_star.shape == self.c_hat.shape):
            raise DimensionError("p_star, c_star and c_hat must share a dimension")
        if np.array_equal(self.c_star, self.c_hat):
            raise InvalidInput("c_star and c_hat must be distinct prototypes")
        if not self.epsilon >= 0.0:
            raise InvalidInput(f"epsilon must be >= 0, got {self.epsilon!r}")
        if not 0.0 <= self.tau <= 1.0:
            raise InvalidInput(f"tau must lie in [0, 1], got {self.tau!r}")

    @property
    def d(self) -> int:
        return self.p_star.size


@dataclass(frozen=True)
class KLFlipQuantities:
    v: np.ndarray
    delta_kl_pstar: float


@dataclass(frozen=True)
class L0FlipQuantities:
    A: tuple[int, ...]
    B: tuple[int, ...]
    delta_l0_pstar: int
    min_i: np.ndarray
    mu_hat: float
    mu_star: float


@dataclass(frozen=True)
class ExclusionPartition:
    delta_max: np.ndarray
    S_unchange: tuple[int, ...]
    S_change: tuple[int, ...]
    S_remain: tuple[int, ...]
    epsilon_remain: float
    k: int


@dataclass(frozen=True)
class ComplianceReport:
    compliant: bool
    witness_coordinate: int | None
    gamma_j: float | None
    gap_j: float | None
    tau_interval: tuple[float, float] | None
    worst_adversary_class: int | None
    reason: str | None = None


def compute_kl_flip(ctx: FlipContext) -> KLFlipQuantities:
    """Direction v and clean KL margin for a flip toward ctx.c_hat."""
    v = (ctx.c_hat - ctx.c_star) / ctx.p_star
    delta = kl_divergence(ctx.c_hat, ctx.p_star) - kl_divergence(ctx.c_star, ctx.p_star)
    return KLFlipQuantities(v=v, delta_kl_pstar=float(delta))


def kl_flip_lhs(ctx: FlipContext, delta) -> float:
    """v . delta, the linearized KL displacement a perturbation achieves."""
    delta = np.asarray(delta, dtype=np.float64)
    if delta.shape != ctx.p_star.shape:
        raise DimensionError(f"delta shape {delta.shape} != context dimension {ctx.d}")
    return float(np.dot(compute_kl_flip(ctx).v, delta))


def compute_l0_flip(ctx: FlipContext) -> L0FlipQuantities:
    """Exceedance sets, clean L0 margin and the per-coordinate spend bound.

    A holds coordinates counted against c_hat but not against c_star on the
    clean embedding; B is the mirror image. Their size difference equals
    L0(c_hat, p*) - L0(c*, p*). min_i is the magnitude an L0 flip must spend
    on coordinate i in the worst case, with the attack's unknown ||delta||_1
    bounded by sqrt(d) epsilon.
    """
    gaps_hat = np.abs(ctx.c_hat - ctx.p_star)
    gaps_star = np.abs(ctx.c_star - ctx.p_star)
    mu_hat = float(np.mean(gaps_hat))
    mu_star = float(np.mean(gaps_star))
    exceed_hat = gaps_hat > ctx.tau * mu_hat
    exceed_star = gaps_star > ctx.tau * mu_star
    a_set = tuple(int(i) for i in np.nonzero(exceed_hat & ~exceed_star)[0])
    b_set = tuple(int(i) for i in np.nonzero(~exceed_hat & exceed_star)[0])
    bounds = forced_min_bounds(
        ctx.p_star, ctx.c_star, ctx.c_hat, ctx.tau, math.sqrt(ctx.d) * ctx.epsilon
    )
    return L0FlipQuantities(
        A=a_set,
        B=b_set,
        delta_l0_pstar=len(a_set) - len(b_set),
        min_i=bounds,
        mu_hat=mu_hat,
        mu_star=mu_star,
    )


def build_partition(ctx: FlipContext, l0q: L0FlipQuantities) -> ExclusionPartition:
    """Split coordinates by how an optimal dual attack would spend its budget.

    When the unconstrained KL maximizer delta_max = eps v / ||v|| already
    satisfies k = delta_l0 forced bounds, those coordinates form S_unchange
    and nothing is pinned. Otherwise the exact constrained maximizer decides
    which coordinates get pinned at their bounds (S_change); the coordinates
    it leaves proportional to v land in S_remain so that epsilon_remain
    accounts for their spend exactly. Either way the budget identity

        epsilon_remain^2 + sum_change min_i^2 + sum_unchange (delta_max_i)^2 = eps^2

    holds, and the bound evaluated by tau_condition_holds equals the exact
    constrained maximum.
    """
    klq = compute_kl_flip(ctx)
    vnorm = float(np.linalg.norm(klq.v))
    if vnorm == 0.0:
        raise InvalidInput("build_partition requires distinct prototypes relative to p_star")
    k = l0q.delta_l0_pstar
    solver_k = max(k, 0)
    d = ctx.d
    eps = ctx.epsilon
    bounds = l0q.min_i
    delta_max = (eps / vnorm) * klq.v
    satisfied = np.abs(delta_max) >= bounds - _BOUND_SLACK
    all_idx = set(range(d))
    if int(np.count_nonzero(satisfied)) >= solver_k:
        unchanged = tuple(int(i) for i in np.nonzero(satisfied)[0])
        spent = float(np.sum(delta_max[list(unchanged)] ** 2)) if unchanged else 0.0
        eps_remain = math.sqrt(max(eps * eps - spent, 0.0))
        return ExclusionPartition(
            delta_max=delta_max,
            S_unchange=unchanged,
            S_change=(),
            S_remain=tuple(sorted(all_idx - set(unchanged))),
            epsilon_remain=eps_remain,
            k=k,
        )
    if eps == 0.0:
        raise Infeasible("L0 flip impossible: zero budget cannot reach the forced bounds")
    try:
        sol = _solve_details(ConstrainedMaxProblem(v=klq.v, epsilon=eps, min_bounds=bounds, k=solver_k))
    except Infeasible:
        raise Infeasible(
            "L0 flip impossible: the forced coordinate bounds exceed the budget"
        ) from None
    changed = sol.pinned
    spent = float(np.sum(bounds[list(changed)] ** 2)) if changed else 0.0
    eps_remain = math.sqrt(max(eps * eps - spent, 0.0))
    return ExclusionPartition(
        delta_max=delta_max,
        S_unchange=(),
        S_change=changed,
        S_remain=tuple(sorted(all_idx - set(changed))),
        epsilon_remain=eps_remain,
        k=k,
    )


def tau_condition_holds(ctx: FlipContext, part: ExclusionPartition, klq: KLFlipQuantities) -> bool:
    """Whether the budget split leaves the KL flip out of reach.

    Evaluates

        sum_{S_unchange} delta_max_i v_i
        + sum_{S_change} min_i |v_i|
        + epsilon_remain * sqrt(sum_{S_remain} v_i^2)  <  delta_kl(p*).

    The first term is written as a dot product; it equals the quotient form
    (||v||/eps) sum (delta_max_i)^2 whenever eps > 0 and stays defined in the
    zero-budget limit. |v_i| in the second term charges pinned coordinates
    sign-aligned with v, the best an attacker can do.
    """
    bounds = compute_l0_flip(ctx).min_i
    v = klq.v
    unch = list(part.S_unchange)
    chg = list(part.S_change)
    rem = list(part.S_remain)
    lhs = 0.0
    if unch:
        lhs += float(np.dot(part.delta_max[unch], v[unch]))
    if chg:
        lhs += float(np.sum(bounds[chg] * np.abs(v[chg])))
    if rem:
        lhs += part.epsilon_remain * float(np.linalg.norm(v[rem]))
    return lhs < klq.delta_kl_pstar


def gamma_threshold(ctx: FlipContext, j: int) -> float:
    """Coordinate-gap threshold Gamma_j(eps); gaps above it witness exclusion.

    Two branches are maximized. The first charges the L0 side: keeping
    coordinate j counted against the rival while the mean gap can drift by
    sqrt(d) eps / d costs M |c*_j - p*_j| inflated by ||v|| p*_j / (||v|| p*_j - eps),
    where M = mu_hat/mu_star + sqrt(d) eps / (d mu_star) - 1. The second adds
    the KL side's room sqrt(eps^2 ||v||^2 - delta_kl^2), floored at zero so the
    branch degrades continuously to the budget-free limit. A branch whose
    denominator is not positive cannot be met and reports +inf; both together
    raise GammaUndefined. An embedding sitting exactly on its prototype
    (mu_star = 0) pays no clean-side persistence cost, so M's contribution is
    taken as zero there.
    """
    if not 0 <= j < ctx.d:
        raise InvalidInput(f"witness coordinate {j} outside dimension {ctx.d}")
    klq = compute_kl_flip(ctx)
    vnorm = float(np.linalg.norm(klq.v))
    d = ctx.d
    gaps_hat = np.abs(ctx.c_hat - ctx.p_star)
    gaps_star = np.abs(ctx.c_star - ctx.p_star)
    mu_hat = float(np.mean(gaps_hat))
    mu_star = float(np.mean(gaps_star))
    if mu_star > 0.0:
        m_factor = mu_hat / mu_star + math.sqrt(d) * ctx.epsilon / (d * mu_star) - 1.0
        m_gap = m_factor * float(gaps_star[j])
    else:
        m_gap = 0.0
    p_j = float(ctx.p_star[j])
    den1 = vnorm * p_j - ctx.epsilon
    branch1 = m_gap * vnorm * p_j / den1 if den1 > 0.0 else math.inf
    sign_j = 1.0 if ctx.c_hat[j] >= ctx.c_star[j] else -1.0
    den2 = vnorm * vnorm * p_j - klq.delta_kl_pstar * sign_j
    if den2 > 0.0:
        disc = max(ctx.epsilon**2 * vnorm**2 - klq.delta_kl_pstar**2, 0.0)
        branch2 = (p_j * vnorm * math.sqrt(disc) + m_gap * vnorm * vnorm * p_j) / den2
    else:
        branch2 = math.inf
    if math.isinf(branch1) and math.isinf(branch2):
        raise GammaUndefined(
            f"coordinate {j} cannot witness: both branch denominators are non-positive"
        )
    return max(branch1, branch2, 0.0)


def _tau_interval(ctx: FlipContext, l0q: L0FlipQuantities, j: int) -> tuple[float, float]:
    """Open tau range over which coordinate j separates the two exceedance tests."""
    lo = float(np.abs(ctx.c_star[j] - ctx.p_star[j])) / l0q.mu_star if l0q.mu_star > 0.0 else 0.0
    hi = float(np.abs(ctx.c_hat[j] - ctx.p_star[j])) / l0q.mu_hat if l0q.mu_hat > 0.0 else 0.0
    return (lo, hi)


def _exclusion_margin(ctx: FlipContext, klq: KLFlipQuantities, l0q: L0FlipQuantities) -> float | None:
    """Certified slack delta_kl - (best dual-flip KL displacement + kappa eps^2).

    Returns None when no certificate is available (budget too large for the
    second-order bound), +inf when the forced bounds alone rule the flip out.
    The kappa eps^2 term covers the curvature dropped by the linearized KL
    condition; it is valid while every |delta_i| <= p*_i / 2, guaranteed by
    eps <= min_i p*_i / 2.
    """
    if ctx.epsilon > float(np.min(ctx.p_star)) / 2.0:
        return None
    w = ctx.c_hat - ctx.c_star
    kappa = float(np.max(np.abs(w) / ctx.p_star**2))
    second_order = kappa * ctx.epsilon**2
    vnorm = float(np.linalg.norm(klq.v))
    free_margin = klq.delta_kl_pstar - ctx.epsilon * vnorm - second_order
    if free_margin > 0.0:
        return free_margin
    if ctx.epsilon == 0.0:
        return klq.delta_kl_pstar - second_order
    try:
        sol = _solve_details(
            ConstrainedMaxProblem(v=klq.v, epsilon=ctx.epsilon, min_bounds=l0q.min_i, k=1)
        )
    except Infeasible:
        return math.inf
    return klq.delta_kl_pstar - sol.objective - second_order


def classify_compliance(p_star, label: int, protos: PrototypeSet, epsilon: float, tau: float) -> ComplianceReport:
    """Full per-rival compliance gate for one clean embedding.

    Against every rival prototype the sample must (a) be cleanly aligned on
    both heads with positive margins, (b) present a witness coordinate whose
    inter-prototype gap exceeds gamma_threshold, and (c) carry a positive
    certified exclusion margin. The report names the rival with the smallest
    margin and that rival's best witness. Any failure returns immediately
    with the first failing rival (ascending class order) and a reason.
    """
    p_star = as_simplex(p_star)
    if p_star.size != protos.d:
        raise DimensionError(f"embedding dimension {p_star.size} != prototype dimension {protos.d}")
    if not 0 <= label < protos.m:
        raise InvalidInput(f"label {label} outside class range [0, {protos.m})")
    c_star = protos.vectors[label]
    rivals = [r for r in range(protos.m) if r != label]
    if not rivals:
        return ComplianceReport(
            compliant=True, witness_coordinate=None, gamma_j=None, gap_j=None,
            tau_interval=None, worst_adversary_class=None, reason="no rival classes",
        )

    weakest = None  # (margin, rival, witness_j, gamma_j, gap_j, tau_interval)
    for rival in rivals:
        ctx = FlipContext(p_star=p_star, c_star=c_star, c_hat=protos.vectors[rival],
                          epsilon=epsilon, tau=tau)
        klq = compute_kl_flip(ctx)
        l0q = compute_l0_flip(ctx)
        if klq.delta_kl_pstar <= 0.0 or l0q.delta_l0_pstar < 1:
            return ComplianceReport(
                compliant=False, witness_coordinate=None, gamma_j=None, gap_j=None,
                tau_interval=None, worst_adversary_class=rival,
                reason=(
                    f"clean alignment fails against class {rival}: "
                    f"delta_kl={klq.delta_kl_pstar:.6g}, delta_l0={l0q.delta_l0_pstar}"
                ),
            )
        gaps = np.abs(ctx.c_hat - ctx.c_star)
        best = None  # (headroom, j, gamma_j, gap_j)
        undefined = 0
        for j in range(ctx.d):
            try:
                gamma_j = gamma_threshold(ctx, j)
            except GammaUndefined:
                undefined += 1
                continue
            gap_j = float(gaps[j])
            if gap_j > gamma_j and (best is None or gap_j - gamma_j > best[0]):
                best = (gap_j - gamma_j, j, gamma_j, gap_j)
        if best is None:
            note = f" ({undefined} coordinates had no defined threshold)" if undefined else ""
            return ComplianceReport(
                compliant=False, witness_coordinate=None, gamma_j=None, gap_j=None,
                tau_interval=None, worst_adversary_class=rival,
                reason=f"no coordinate gap exceeds its threshold against class {rival}{note}",
            )
        margin = _exclusion_margin(ctx, klq, l0q)
        if margin is None:
            return ComplianceReport(
                compliant=False, witness_coordinate=None, gamma_j=None, gap_j=None,
                tau_interval=None, worst_adversary_class=rival,
                reason=(
                    f"budget {epsilon!r} exceeds half the smallest clean coordinate; "
                    "no certified exclusion margin"
                ),
            )
        if margin <= 0.0:
            return ComplianceReport(
                compliant=False, witness_coordinate=None, gamma_j=None, gap_j=None,
                tau_interval=None, worst_adversary_class=rival,
                reason=f"exclusion margin non-positive against class {rival}",
            )
        _, j, gamma_j, gap_j = best
        interval = _tau_interval(ctx, l0q, j)
        if weakest is None or margin < weakest[0]:
            weakest = (margin, rival, j, gamma_j, gap_j, interval)

    _, rival, j, gamma_j, gap_j, interval = weakest
    return ComplianceReport(
        compliant=True, witness_coordinate=j, gamma_j=gamma_j, gap_j=gap_j,
        tau_interval=interval, worst_adversary_class=rival, reason=None,
    )
