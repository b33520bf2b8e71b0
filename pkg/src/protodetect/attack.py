"""Constrained-maximization engines and the embedding-space attack search.

Two independent solvers answer the same question, what is the largest value of
v . delta over the epsilon-sphere when at least k coordinates must satisfy
|delta_i| >= min_i:

* solve_closed_form runs exact KKT water-filling over every k-subset of
  forced coordinates (certificates). Within a certificate the optimum pins a
  coordinate at its bound, sign-aligned with v, exactly while the water level
  t keeps t |v_i| below min_i; everything else scales with t along v.
* brute_force_max enumerates support patterns (every subset pinned at its
  bound, remainder proportional to v) plus dense sphere scans. It shares no
  water-filling logic with the closed form, which is what makes the
  equivalence test between them meaningful.

search_dual_flip drives the mutual-exclusion experiments: it hunts for one
perturbation that flips both detector heads to the same wrong class.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .classifier import DEFAULT_HEADS, Head, PrototypeSet, detect, predict_head
from .core import EmbeddingDataset, LabeledEmbedding
from .errors import DimensionError, Infeasible, InvalidInput
from .metrics import L0Params, sigmoid

__all__ = [
    "AttackResult",
    "ConstrainedMaxProblem",
    "brute_force_max",
    "craft_attacked_dataset",
    "forced_min_bounds",
    "search_dual_flip",
    "solve_closed_form",
]

_FEAS_SLACK = 1e-12


@dataclass(frozen=True)
class ConstrainedMaxProblem:
    """Maximize v . delta over ||delta||_2 = epsilon with k forced coordinates."""

    v: np.ndarray
    epsilon: float
    min_bounds: np.ndarray
    k: int

    def __post_init__(self):
        v = np.asarray(self.v, dtype=np.float64)
        b = np.asarray(self.min_bounds, dtype=np.float64)
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "min_bounds", b)
        if v.ndim != 1 or v.size < 1:
            raise InvalidInput(f"v must be a vector, got shape {v.shape}")
        if b.shape != v.shape:
            raise DimensionError(f"min_bounds shape {b.shape} != v shape {v.shape}")
        if not self.epsilon > 0.0:
            raise InvalidInput(f"epsilon must be positive, got {self.epsilon!r}")
        if not 0 <= self.k <= v.size:
            raise InvalidInput(f"k must lie in [0, {v.size}], got {self.k}")
        if np.any(b < 0.0):
            raise InvalidInput("min_bounds must be non-negative")

    @property
    def d(self) -> int:
        return self.v.size


@dataclass(frozen=True)
class _MaxSolution:
    delta: np.ndarray
    objective: float
    pinned: tuple[int, ...]
    free_certificate: bool


def _satisfied_count(delta: np.ndarray, bounds: np.ndarray) -> int:
    return int(np.count_nonzero(np.abs(delta) >= bounds - _FEAS_SLACK))


def _waterfill(v: np.ndarray, eps: float, bounds: np.ndarray, forced: tuple[int, ...]):
    """Exact maximum of v . delta on the eps-sphere with |delta_i| >= bounds_i on ``forced``.

    Returns (delta, objective, pinned_indices) or None when the forced bounds
    alone exceed the budget. The water level t solves

        sum_{i in forced} max(bounds_i, t |v_i|)^2 + t^2 sum_{i not forced} v_i^2 = eps^2,

    a non-decreasing function of t that reaches 0 by t = eps / ||v||, so a
    bisection bracket is available analytically; the level is then re-derived
    in closed form from the pinned set for machine accuracy.
    """
    d = v.size
    fmask = np.zeros(d, dtype=bool)
    fmask[list(forced)] = True
    pin_budget = float(np.sum(bounds[fmask] ** 2))
    eps_sq = eps * eps
    if pin_budget > eps_sq + 1e-15:
        return None
    absv = np.abs(v)
    vnorm = float(np.linalg.norm(v))

    def overshoot(t: float) -> float:
        contrib = np.where(fmask, np.maximum(bounds, t * absv), t * absv)
        return float(np.sum(contrib * contrib)) - eps_sq

    if overshoot(0.0) >= 0.0:
        t = 0.0
    else:
        lo, hi = 0.0, eps / vnorm
        for _ in range(90):
            mid = 0.5 * (lo + hi)
            if overshoot(mid) < 0.0:
                lo = mid
            else:
                hi = mid
        t = hi
    pinned = fmask & (bounds > t * absv)
    s2 = float(np.sum(bounds[pinned] ** 2))
    w2 = float(np.sum(v[~pinned] ** 2))
    if w2 > 0.0:
        # Exact level for the identified pinned set. Misclassification can only
        # happen within the 2^-90 bisection window of a breakpoint, where both
        # branches give the same delta to machine precision.
        t = math.sqrt(max(eps_sq - s2, 0.0) / w2)
    signs = np.where(v >= 0.0, 1.0, -1.0)
    delta = t * v
    delta[pinned] = signs[pinned] * bounds[pinned]
    return delta, float(np.dot(v, delta)), tuple(int(i) for i in np.nonzero(pinned)[0])


def _solve_details(problem: ConstrainedMaxProblem) -> _MaxSolution:
    v, eps, bounds, k = problem.v, problem.epsilon, problem.min_bounds, problem.k
    vnorm = float(np.linalg.norm(v))
    if vnorm == 0.0:
        raise InvalidInput("solve_closed_form requires a non-zero direction v")
    free = eps * v / vnorm
    if _satisfied_count(free, bounds) >= k:
        return _MaxSolution(delta=free, objective=eps * vnorm, pinned=(), free_certificate=True)
    best = None
    for forced in combinations(range(problem.d), k):
        result = _waterfill(v, eps, bounds, forced)
        if result is None:
            continue
        delta, objective, pinned = result
        if best is None or objective > best.objective + 1e-15:
            best = _MaxSolution(delta=delta, objective=objective, pinned=pinned, free_certificate=False)
    if best is None:
        raise Infeasible(
            f"no choice of {k} forced coordinates fits the budget "
            f"(smallest bounds already exceed epsilon={eps!r})"
        )
    return best


def solve_closed_form(problem: ConstrainedMaxProblem) -> tuple[np.ndarray, float]:
    """Exact constrained maximizer; returns (delta_prime, objective).

    Raises Infeasible when no k coordinates can reach their bounds within the
    budget, which happens exactly when the k smallest bounds already spend more
    than epsilon^2 in squared norm.
    """
    sol = _solve_details(problem)
    return sol.delta, sol.objective


def brute_force_max(problem: ConstrainedMaxProblem, resolution: float = 1e-3, seed: int = 0):
    """Independent oracle for solve_closed_form, limited to d <= 4.

    Layers, merged by taking the best feasible candidate:

    * support patterns: every subset A is pinned at sign-aligned bounds and the
      residual radius goes to v restricted off A (or, when v vanishes there, to
      each single off-A coordinate in turn);
    * an angular grid at step ``resolution`` radians for d = 2 and d = 3;
    * 200000 seeded uniform sphere directions for d = 4.

    Candidates must sit on the sphere within 1e-9 and satisfy at least k bounds
    within 1e-12 to count.
    """
    if problem.d > 4:
        raise InvalidInput(f"brute force supports d <= 4, got d={problem.d}")
    v, eps, bounds, k = problem.v, problem.epsilon, problem.min_bounds, problem.k
    d = problem.d
    eps_sq = eps * eps
    best_delta, best_obj = None, -math.inf

    def consider(delta: np.ndarray):
        nonlocal best_delta, best_obj
        if abs(float(np.linalg.norm(delta)) - eps) > 1e-9 * max(1.0, eps):
            return
        if _satisfied_count(delta, bounds) < k:
            return
        obj = float(np.dot(v, delta))
        if obj > best_obj:
            best_delta, best_obj = delta, obj

    signs = np.where(v >= 0.0, 1.0, -1.0)
    for size in range(d + 1):
        for pattern in combinations(range(d), size):
            idx = list(pattern)
            spent = float(np.sum(bounds[idx] ** 2))
            if spent > eps_sq + 1e-15:
                continue
            residual = math.sqrt(max(eps_sq - spent, 0.0))
            base = np.zeros(d)
            base[idx] = signs[idx] * bounds[idx]
            rest = [i for i in range(d) if i not in pattern]
            v_rest = v[rest]
            rest_norm = float(np.linalg.norm(v_rest))
            if rest and rest_norm > 0.0:
                delta = base.copy()
                delta[rest] = residual * v_rest / rest_norm
                consider(delta)
            elif rest:
                for j in rest:
                    delta = base.copy()
                    delta[j] = residual
                    consider(delta)
                    delta = base.copy()
                    delta[j] = -residual
                    consider(delta)
            elif residual <= 1e-12:
                consider(base)

    def scan(points: np.ndarray):
        nonlocal best_delta, best_obj
        feasible = np.count_nonzero(np.abs(points) >= bounds[None, :] - _FEAS_SLACK, axis=1) >= k
        if np.any(feasible):
            objs = points[feasible] @ v
            j = int(np.argmax(objs))
            if float(objs[j]) > best_obj:
                best_delta, best_obj = points[feasible][j].copy(), float(objs[j])

    if d == 2:
        theta = np.arange(0.0, 2.0 * math.pi, resolution)
        scan(eps * np.stack([np.cos(theta), np.sin(theta)], axis=1))
    elif d == 3:
        # Band the polar angle so the grid never materializes all at once.
        polar = np.arange(0.0, math.pi + resolution, resolution)
        azimuth = np.arange(0.0, 2.0 * math.pi, resolution)
        cos_a, sin_a = np.cos(azimuth), np.sin(azimuth)
        for start in range(0, polar.size, 64):
            band = polar[start:start + 64]
            sin_p, cos_p = np.sin(band), np.cos(band)
            scan(eps * np.stack(
                [
                    np.outer(sin_p, cos_a).ravel(),
                    np.outer(sin_p, sin_a).ravel(),
                    np.outer(cos_p, np.ones_like(azimuth)).ravel(),
                ],
                axis=1,
            ))
    else:
        rng = np.random.default_rng(seed)
        g = rng.standard_normal((200_000, d))
        scan(eps * g / np.linalg.norm(g, axis=1, keepdims=True))

    if best_delta is None:
        raise Infeasible(f"no point on the sphere satisfies {k} bounds within epsilon={eps!r}")
    return best_delta, best_obj


def forced_min_bounds(p_star, c_star, c_hat, tau: float, l1_bound: float) -> np.ndarray:
    """Per-coordinate magnitude an L0 flip necessarily spends.

    min_i = max(0, min(|h_i(c_hat)|, |h_i(c_star)|) - tau * l1_bound / d) where
    h_i(c) = |c_i - p*_i| - tau * mu(c, p*). The l1_bound stands in for the
    unknown ||delta||_1 (callers pass sqrt(d) * epsilon, the worst case on the
    epsilon-ball).
    """
    p_star = np.asarray(p_star, dtype=np.float64)
    c_star = np.asarray(c_star, dtype=np.float64)
    c_hat = np.asarray(c_hat, dtype=np.float64)
    d = p_star.size
    gaps_hat = np.abs(c_hat - p_star)
    gaps_star = np.abs(c_star - p_star)
    h_hat = gaps_hat - tau * float(np.mean(gaps_hat))
    h_star = gaps_star - tau * float(np.mean(gaps_star))
    return np.maximum(0.0, np.minimum(np.abs(h_hat), np.abs(h_star)) - tau * l1_bound / d)


@dataclass(frozen=True)
class AttackResult:
    """Best perturbation found plus what it achieved."""

    delta: np.ndarray
    flipped_kl: bool
    flipped_l0: bool
    dual_flip_same_class: bool
    iterations: int


class _Found(Exception):
    def __init__(self, delta):
        self.delta = delta


def _batch_predictions(p_hat: np.ndarray, protos: np.ndarray, tau: float):
    """Vectorized KL and L0 head argmins for a batch of embeddings (n, d)."""
    log_p = np.log(p_hat)
    proto_entropy = np.sum(protos * np.log(protos), axis=1)
    kl = proto_entropy[None, :] - log_p @ protos.T
    gaps = np.abs(p_hat[:, None, :] - protos[None, :, :])
    mu = gaps.mean(axis=2)
    l0 = np.sum(gaps > tau * mu[:, :, None], axis=2)
    return np.argmin(kl, axis=1), np.argmin(l0, axis=1), kl


def _project_batch(deltas: np.ndarray, p_star: np.ndarray, eps: float, free_delta: bool) -> np.ndarray:
    """Map arbitrary deltas into the feasible set.

    Tangent projection (sum zero) unless free_delta, then a scalar shrink into
    the epsilon-ball, then a second scalar shrink so that negative coordinates
    keep p_star + delta strictly positive and positive coordinates respect the
    3/2 ratio bound. Scalar shrinks preserve the tangent property.
    """
    out = np.array(deltas, dtype=np.float64)
    if out.ndim == 1:
        out = out[None, :]
    if not free_delta:
        out -= out.mean(axis=1, keepdims=True)
    norms = np.linalg.norm(out, axis=1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        shrink = np.where(norms > eps, eps / norms, 1.0)
    out *= np.where(np.isfinite(shrink), shrink, 1.0)
    limit = np.where(out < 0.0, 0.999 * p_star[None, :], 1.5 * p_star[None, :])
    absd = np.abs(out)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = np.where(absd > 0.0, limit / absd, np.inf)
    out *= np.minimum(1.0, ratios.min(axis=1))[:, None]
    return out


def _two_class_margin(p_hat: np.ndarray, c_rival: np.ndarray, c_star: np.ndarray, tau: float, phi: float):
    """Smooth surrogate of 'rival beats true class on both heads' (negative is good)."""
    p_hat = np.maximum(p_hat, 1e-30)
    log_p = np.log(p_hat)
    kl_r = float(np.sum(c_rival * np.log(c_rival))) - log_p @ c_rival
    kl_s = float(np.sum(c_star * np.log(c_star))) - log_p @ c_star
    d = p_hat.shape[1]
    g_r = np.abs(p_hat - c_rival[None, :])
    g_s = np.abs(p_hat - c_star[None, :])
    s_r = sigmoid((g_r - tau * g_r.mean(axis=1, keepdims=True)) / phi).sum(axis=1)
    s_s = sigmoid((g_s - tau * g_s.mean(axis=1, keepdims=True)) / phi).sum(axis=1)
    return (kl_r - kl_s) + (s_r - s_s) / d


class _Search:
    """One seeded search for a flip at a single clean embedding."""

    def __init__(self, p_star, label, protos, eps, tau, *, free_delta, seed, mode):
        self.p_star = np.asarray(p_star, dtype=np.float64)
        self.label = int(label)
        self.protos = protos
        self.eps = float(eps)
        self.tau = float(tau)
        self.free_delta = free_delta
        self.rng = np.random.default_rng(seed)
        self.mode = mode
        self.params = L0Params(tau=tau, phi=0.5)
        self.iterations = 0
        self.best_single = None  # (displacement, delta)
        self.best_any = None

    def _success_mask(self, kl_pred, l0_pred):
        kl_flip = kl_pred != self.label
        l0_flip = l0_pred != self.label
        if self.mode == "kl":
            return kl_flip
        if self.mode == "l0":
            return l0_flip
        return kl_flip & l0_flip & (kl_pred == l0_pred)

    def _confirm(self, delta) -> bool:
        """Re-check a vectorized hit through the scalar public path."""
        p_hat = self.p_star + delta
        kl_c = predict_head(p_hat, self.protos, Head.KL, self.params)
        l0_c = predict_head(p_hat, self.protos, Head.L0, self.params)
        if self.mode == "kl":
            return kl_c != self.label
        if self.mode == "l0":
            return l0_c != self.label
        return kl_c == l0_c and kl_c != self.label

    def consider(self, deltas: np.ndarray):
        if deltas.size == 0:
            return
        p_hat = self.p_star[None, :] + deltas
        kl_pred, l0_pred, kl = _batch_predictions(p_hat, self.protos.vectors, self.tau)
        self.iterations += deltas.shape[0]
        displacement = kl[:, self.label]
        hits = self._success_mask(kl_pred, l0_pred)
        for idx in np.nonzero(hits)[0]:
            if self._confirm(deltas[idx]):
                raise _Found(deltas[idx])
        single = (kl_pred != self.label) ^ (l0_pred != self.label)
        for pool_mask, attr in ((single, "best_single"), (np.ones_like(single), "best_any")):
            if np.any(pool_mask):
                rows = np.nonzero(pool_mask)[0]
                top = rows[int(np.argmax(displacement[rows]))]
                current = getattr(self, attr)
                if current is None or displacement[top] > current[0]:
                    setattr(self, attr, (float(displacement[top]), deltas[top].copy()))

    def deterministic_candidates(self) -> np.ndarray:
        c_star = self.protos.vectors[self.label]
        rows = []
        for rival in range(self.protos.m):
            if rival == self.label:
                continue
            c_r = self.protos.vectors[rival]
            toward = c_r - self.p_star  # sums to zero by construction
            for frac in (1.0, 0.9, 0.75, 0.5, 0.25):
                rows.append(frac * toward)
            v = (c_r - c_star) / self.p_star
            vn = float(np.linalg.norm(v))
            if vn > 0.0:
                rows.append(self.eps * v / vn)
                bounds = forced_min_bounds(
                    self.p_star, c_star, c_r, self.tau, math.sqrt(self.p_star.size) * self.eps
                )
                try:
                    delta, _ = solve_closed_form(
                        ConstrainedMaxProblem(v=v, epsilon=self.eps, min_bounds=bounds, k=1)
                    )
                    rows.append(delta)
                except Infeasible:
                    pass
        return np.array(rows) if rows else np.empty((0, self.p_star.size))

    def run_random(self, budget: int, chunk: int = 20_000):
        remaining = budget
        while remaining > 0:
            n = min(chunk, remaining)
            remaining -= n
            g = self.rng.standard_normal((n, self.p_star.size))
            self.consider(_project_batch(self.eps * g / np.linalg.norm(g, axis=1, keepdims=True),
                                         self.p_star, self.eps, self.free_delta))

    def run_ascent(self, restarts: int, steps: int):
        rivals = [r for r in range(self.protos.m) if r != self.label]
        if not rivals or restarts <= 0:
            return
        c_star = self.protos.vectors[self.label]
        per = max(1, restarts // len(rivals))
        h = 1e-6
        step_len = self.eps / 20.0
        d = self.p_star.size
        eye = np.eye(d)
        for rival in rivals:
            c_r = self.protos.vectors[rival]
            starts = [c_r - self.p_star, self.eps * (c_r - c_star) / self.p_star]
            g = self.rng.standard_normal((max(per - len(starts), 0), d))
            if g.size:
                radii = self.eps * self.rng.uniform(0.5, 1.0, size=(g.shape[0], 1))
                starts.extend(radii * g / np.linalg.norm(g, axis=1, keepdims=True))
            current = _project_batch(np.array(starts[:per]), self.p_star, self.eps, self.free_delta)
            for _ in range(steps):
                self.consider(current)
                probes_plus = current[:, None, :] + h * eye[None, :, :]
                probes_minus = current[:, None, :] - h * eye[None, :, :]
                flat = np.concatenate([probes_plus, probes_minus]).reshape(-1, d)
                margins = _two_class_margin(self.p_star[None, :] + flat, c_r, c_star, self.tau, 0.05)
                self.iterations += flat.shape[0]
                half = margins.size // 2
                grad = (margins[:half].reshape(-1, d) - margins[half:].reshape(-1, d)) / (2.0 * h)
                norms = np.linalg.norm(grad, axis=1, keepdims=True)
                grad = np.where(norms > 0.0, grad / np.maximum(norms, 1e-30), 0.0)
                current = _project_batch(current - step_len * grad, self.p_star, self.eps, self.free_delta)
            self.consider(current)

    def result(self, delta=None) -> AttackResult:
        if delta is None:
            for pool in (self.best_single, self.best_any):
                if pool is not None:
                    delta = pool[1]
                    break
            else:
                delta = np.zeros_like(self.p_star)
        p_hat = self.p_star + delta
        kl_c = predict_head(p_hat, self.protos, Head.KL, self.params)
        l0_c = predict_head(p_hat, self.protos, Head.L0, self.params)
        return AttackResult(
            delta=delta,
            flipped_kl=kl_c != self.label,
            flipped_l0=l0_c != self.label,
            dual_flip_same_class=(kl_c == l0_c and kl_c != self.label),
            iterations=self.iterations,
        )


def search_dual_flip(
    p_star,
    label: int,
    protos: PrototypeSet,
    epsilon: float,
    tau: float,
    budget: int,
    *,
    restarts: int = 100,
    ascent_steps: int = 40,
    free_delta: bool = False,
    seed: int = 0,
    mode: str = "dual",
) -> AttackResult:
    """Multi-strategy search for a perturbation flipping both heads the same way.

    Strategies run in a fixed order: closed-form candidates per rival class
    (the line toward the rival prototype at several fractions, the steepest
    KL-flip direction, the forced-coordinate maximizer), then ``budget`` random
    tangent directions, then ``restarts`` finite-difference ascent runs of
    ``ascent_steps`` steps each. Every candidate is projected into the feasible
    set (epsilon-ball, strict positivity, the 3/2 ratio bound, and sum-zero
    unless free_delta). The first vectorized hit is confirmed through the
    scalar prediction path before the search stops; exhausting the budget
    without a hit is a result, not an error.

    Requires the clean embedding to be correctly classified by both heads.
    """
    if mode not in ("kl", "l0", "dual"):
        raise InvalidInput(f"mode must be kl, l0 or dual, got {mode!r}")
    p_star = np.asarray(p_star, dtype=np.float64)
    params = L0Params(tau=tau, phi=0.5)
    clean = detect(p_star, protos, DEFAULT_HEADS, params)
    if clean.attack_flag or clean.predicted_class != label:
        raise InvalidInput(
            f"search precondition violated: clean prediction {clean.per_head} != label {label}"
        )
    if epsilon == 0.0:
        return AttackResult(np.zeros_like(p_star), False, False, False, 0)
    search = _Search(p_star, label, protos, epsilon, tau, free_delta=free_delta, seed=seed, mode=mode)
    try:
        search.consider(_project_batch(search.deterministic_candidates(), p_star, epsilon, free_delta))
        search.run_random(budget)
        search.run_ascent(restarts, ascent_steps)
    except _Found as found:
        return search.result(found.delta)
    return search.result()


def craft_attacked_dataset(
    clean: EmbeddingDataset,
    protos: PrototypeSet,
    epsilon: float,
    tau: float,
    budget: int,
    *,
    restarts: int = 20,
    ascent_steps: int = 25,
    seed: int = 0,
) -> EmbeddingDataset:
    """Emit each clean row plus an attacked twin sharing its id.

    The twin's embedding is p* + delta for the best delta found, preferring a
    single-head flip, then a dual flip, then the largest displacement of the
    true-class KL score. Deltas stay on the simplex tangent so twins remain
    valid simplex rows; budget 0 degenerates to delta = 0. Per-row searches are
    seeded independently from ``seed`` so results do not depend on row order
    or thread count.
    """
    if np.any(clean.attacked_flags()):
        raise InvalidInput("craft_attacked_dataset expects a clean dataset")
    params = L0Params(tau=tau, phi=0.5)
    rows = []
    for i, row in enumerate(clean):
        best = np.zeros(clean.d)
        if budget > 0 and epsilon > 0.0:
            search = _Search(
                row.embedding, row.label, protos, epsilon, tau,
                free_delta=False, seed=seed + i, mode="dual",
            )
            clean_outcome = detect(row.embedding, protos, DEFAULT_HEADS, params)
            aligned = (not clean_outcome.attack_flag) and clean_outcome.predicted_class == row.label
            single_hit = None
            dual_hit = None
            try:
                search.consider(
                    _project_batch(search.deterministic_candidates(), row.embedding, epsilon, False)
                )
                search.run_random(budget)
                if aligned:
                    search.run_ascent(restarts, ascent_steps)
            except _Found as found:
                dual_hit = found.delta
            if search.best_single is not None:
                single_hit = search.best_single[1]
            if single_hit is not None:
                best = single_hit
            elif dual_hit is not None:
                best = dual_hit
            elif search.best_any is not None:
                best = search.best_any[1]
        p_hat = row.embedding + best
        rows.append(row)
        rows.append(LabeledEmbedding(id=row.id, label=row.label, attacked=True, embedding=p_hat))
    return EmbeddingDataset(d=clean.d, m=clean.m, rows=tuple(rows))
