"""Constrained-maximizer tests: closed form vs brute force, plus the flip search."""

from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from protodetect import (
    DEFAULT_HEADS,
    ConstrainedMaxProblem,
    DimensionError,
    Infeasible,
    InvalidInput,
    L0Params,
    METRIC_CASES,
    brute_force_max,
    craft_attacked_dataset,
    detect,
    forced_min_bounds,
    generate_separable_instance,
    search_dual_flip,
    solve_closed_form,
)
from protodetect.attack import _FEAS_SLACK

CASES = {case.name: case for case in METRIC_CASES}


def satisfied(delta: np.ndarray, bounds: np.ndarray) -> int:
    return int(np.count_nonzero(np.abs(delta) >= bounds - _FEAS_SLACK))


class TestProblemValidation:
    def test_matrix_v_rejected(self):
        with pytest.raises(InvalidInput):
            ConstrainedMaxProblem(v=[[1.0, 2.0]], epsilon=1.0, min_bounds=[[0.0, 0.0]], k=1)

    def test_bounds_shape_mismatch(self):
        with pytest.raises(DimensionError):
            ConstrainedMaxProblem(v=[1.0, 2.0], epsilon=1.0, min_bounds=[0.0], k=1)

    def test_epsilon_must_be_positive(self):
        for eps in (0.0, -1.0, math.nan):
            with pytest.raises(InvalidInput):
                ConstrainedMaxProblem(v=[1.0, 2.0], epsilon=eps, min_bounds=[0.0, 0.0], k=1)

    def test_k_range(self):
        for k in (-1, 3):
            with pytest.raises(InvalidInput):
                ConstrainedMaxProblem(v=[1.0, 2.0], epsilon=1.0, min_bounds=[0.0, 0.0], k=k)

    def test_negative_bounds_rejected(self):
        with pytest.raises(InvalidInput):
            ConstrainedMaxProblem(v=[1.0, 2.0], epsilon=1.0, min_bounds=[-0.1, 0.0], k=1)

    def test_d_property(self):
        prob = ConstrainedMaxProblem(v=[1.0, 2.0, 3.0], epsilon=1.0, min_bounds=[0.0] * 3, k=0)
        assert prob.d == 3


def test_unconstrained_sphere_max_fixture():
    case = CASES["sphere_max_d2"]
    prob = ConstrainedMaxProblem(
        v=case.inputs["v"], epsilon=case.inputs["epsilon"], min_bounds=[0.0, 0.0], k=0
    )
    delta, obj = solve_closed_form(prob)
    assert np.allclose(delta, case.expected["delta"], atol=1e-12)
    assert obj == pytest.approx(case.expected["objective"], abs=1e-12)


def test_waterfill_fixture_with_pinned_coordinate():
    case = CASES["waterfill_pinned_d3"]
    prob = ConstrainedMaxProblem(
        v=case.inputs["v"],
        epsilon=case.inputs["epsilon"],
        min_bounds=case.inputs["min_bounds"],
        k=case.inputs["k"],
    )
    delta, obj = solve_closed_form(prob)
    assert obj == pytest.approx(case.expected["objective"], abs=1e-12)
    pinned = case.expected["pinned"]
    assert [i for i in range(prob.d) if abs(delta[i]) == prob.min_bounds[i]] == pinned
    free = [i for i in range(prob.d) if i not in pinned]
    assert np.linalg.norm(delta[free]) == pytest.approx(case.expected["epsilon_remain"], abs=1e-12)
    # off the pinned set delta is t * v, so the level is recoverable per coordinate
    for i in free:
        assert delta[i] / prob.v[i] == pytest.approx(case.expected["water_level"], abs=1e-12)


def test_forced_coordinate_can_unpin():
    # Forcing {0, 1} here leaves only coordinate 1 pinned: the water level
    # t = sqrt(0.095) rises past bound 0.1, so coordinate 0 rides t * v freely.
    prob = ConstrainedMaxProblem(
        v=[1.0, 1.0, 1.0], epsilon=1.0, min_bounds=[0.1, 0.9, 0.9], k=2
    )
    delta, obj = solve_closed_form(prob)
    t = math.sqrt(0.095)
    assert np.allclose(delta, [t, 0.9, t], atol=1e-12)
    assert obj == pytest.approx(2.0 * t + 0.9, abs=1e-12)


def test_only_one_certificate_fits_budget():
    # Coordinate 0 carries the larger v but its bound 1.01 exceeds the budget,
    # so the optimum pins coordinate 1 and spends the rest along v.
    prob = ConstrainedMaxProblem(v=[3.0, 1.0], epsilon=1.0, min_bounds=[1.01, 0.9], k=1)
    delta, obj = solve_closed_form(prob)
    s = math.sqrt(0.19)
    assert np.allclose(delta, [s, 0.9], atol=1e-12)
    assert obj == pytest.approx(3.0 * s + 0.9, abs=1e-12)


def test_bounds_consuming_exact_budget():
    prob = ConstrainedMaxProblem(v=[1.0, 1.0], epsilon=1.0, min_bounds=[0.6, 0.8], k=2)
    delta, obj = solve_closed_form(prob)
    assert np.allclose(delta, [0.6, 0.8], atol=1e-12)
    assert obj == pytest.approx(1.4, abs=1e-12)


def test_signs_follow_v():
    prob = ConstrainedMaxProblem(v=[-2.0, 1.0], epsilon=1.0, min_bounds=[0.9, 0.05], k=2)
    delta, _ = solve_closed_form(prob)
    assert delta[0] == pytest.approx(-0.9, abs=1e-12)
    assert delta[1] == pytest.approx(math.sqrt(0.19), abs=1e-12)


def test_free_certificate_when_bounds_are_zero():
    v = np.array([1.0, -2.0, 0.5])
    prob = ConstrainedMaxProblem(v=v, epsilon=0.7, min_bounds=[0.0] * 3, k=3)
    delta, obj = solve_closed_form(prob)
    assert np.allclose(delta, 0.7 * v / np.linalg.norm(v), atol=1e-12)
    assert obj == pytest.approx(0.7 * np.linalg.norm(v), abs=1e-12)


def test_zero_direction_rejected():
    prob = ConstrainedMaxProblem(v=[0.0, 0.0], epsilon=1.0, min_bounds=[0.0, 0.0], k=0)
    with pytest.raises(InvalidInput):
        solve_closed_form(prob)


def test_infeasible_when_k_smallest_bounds_exceed_budget():
    prob = ConstrainedMaxProblem(v=[1.0, 1.0], epsilon=1.0, min_bounds=[0.8, 0.9], k=2)
    with pytest.raises(Infeasible):
        solve_closed_form(prob)
    with pytest.raises(Infeasible):
        brute_force_max(prob, resolution=1e-2)


def test_brute_force_dimension_cap():
    prob = ConstrainedMaxProblem(v=[1.0] * 5, epsilon=1.0, min_bounds=[0.0] * 5, k=0)
    with pytest.raises(InvalidInput):
        brute_force_max(prob)


def random_problem(rng: np.random.Generator, d: int) -> ConstrainedMaxProblem:
    v = rng.standard_normal(d)
    while np.linalg.norm(v) < 1e-6:
        v = rng.standard_normal(d)
    return ConstrainedMaxProblem(
        v=v,
        epsilon=float(rng.uniform(0.2, 1.5)),
        min_bounds=np.abs(rng.standard_normal(d)) * 0.4,
        k=int(rng.integers(0, d + 1)),
    )


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), d=st.integers(2, 7))
def test_solution_is_feasible_and_infeasibility_is_exact(seed, d):
    rng = np.random.default_rng(seed)
    prob = random_problem(rng, d)
    k_smallest = float(np.sum(np.sort(prob.min_bounds)[: prob.k] ** 2))
    assume(abs(k_smallest - prob.epsilon**2) > 1e-9)
    try:
        delta, obj = solve_closed_form(prob)
    except Infeasible:
        assert k_smallest > prob.epsilon**2
        return
    assert k_smallest < prob.epsilon**2 or prob.k == 0
    assert np.linalg.norm(delta) == pytest.approx(prob.epsilon, abs=1e-9)
    assert satisfied(delta, prob.min_bounds) >= prob.k
    assert obj == pytest.approx(float(np.dot(prob.v, delta)), abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), d=st.integers(2, 6))
def test_solver_dominates_random_feasible_points(seed, d):
    rng = np.random.default_rng(seed)
    prob = random_problem(rng, d)
    g = rng.standard_normal((400, d))
    points = prob.epsilon * g / np.linalg.norm(g, axis=1, keepdims=True)
    feasible = [p for p in points if satisfied(p, prob.min_bounds) >= prob.k]
    try:
        _, obj = solve_closed_form(prob)
    except Infeasible:
        assert not feasible
        return
    for p in feasible:
        assert float(np.dot(prob.v, p)) <= obj + 1e-9


def test_closed_form_matches_brute_force():
    # The acceptance suite runs the large sweep; this is the fast canary.
    rng = np.random.default_rng(42)
    checked = 0
    for d, resolution, trials in ((2, 1e-3, 8), (3, 1e-2, 4), (4, 1e-2, 2)):
        for _ in range(trials):
            prob = random_problem(rng, d)
            try:
                _, exact = solve_closed_form(prob)
            except Infeasible:
                with pytest.raises(Infeasible):
                    brute_force_max(prob, resolution=resolution)
                continue
            _, approx = brute_force_max(prob, resolution=resolution)
            assert approx <= exact + 1e-9
            assert exact - approx <= 5e-3 * max(1.0, abs(exact))
            checked += 1
    assert checked > 0


def test_forced_min_bounds_hand_case():
    # gaps 0.2 vs 0.1 with tau 0.75 leave headroom 0.05 and 0.025; the smaller
    # one minus the mean-shift allowance 0.015 leaves 0.01 per coordinate.
    bounds = forced_min_bounds(
        [0.5, 0.5], [0.4, 0.6], [0.7, 0.3], tau=0.75, l1_bound=0.04
    )
    assert np.allclose(bounds, [0.01, 0.01], atol=1e-12)


def test_forced_min_bounds_zero_when_prototype_equals_clean():
    bounds = forced_min_bounds(
        [0.5, 0.3, 0.2], [0.5, 0.3, 0.2], [0.2, 0.5, 0.3], tau=0.75, l1_bound=0.1
    )
    assert np.array_equal(bounds, np.zeros(3))


def test_forced_min_bounds_never_negative():
    rng = np.random.default_rng(0)
    for _ in range(20):
        w = rng.uniform(0.05, 1.0, size=(3, 5))
        p, cs, ch = (row / row.sum() for row in w)
        assert np.all(forced_min_bounds(p, cs, ch, tau=0.75, l1_bound=0.3) >= 0.0)


@pytest.fixture(scope="module")
def crowded_instance():
    # Prototypes close enough that the budget reaches a rival's neighbourhood.
    return generate_separable_instance(3, 6, 0.35, seed=2, n_per_class=2, noise=0.2)


class TestSearchDualFlip:
    def test_mode_validated(self, crowded_instance):
        protos, data = crowded_instance
        row = data.rows[2]
        with pytest.raises(InvalidInput):
            search_dual_flip(row.embedding, row.label, protos, 0.25, 0.75, budget=10, mode="both")

    def test_precondition_requires_correct_clean_prediction(self, crowded_instance):
        protos, data = crowded_instance
        row = data.rows[2]
        wrong = (row.label + 1) % protos.m
        with pytest.raises(InvalidInput, match="precondition"):
            search_dual_flip(row.embedding, wrong, protos, 0.25, 0.75, budget=10)

    def test_zero_epsilon_returns_zero_delta(self, crowded_instance):
        protos, data = crowded_instance
        row = data.rows[2]
        res = search_dual_flip(row.embedding, row.label, protos, 0.0, 0.75, budget=100)
        assert not res.flipped_kl and not res.flipped_l0 and not res.dual_flip_same_class
        assert np.array_equal(res.delta, np.zeros(6))
        assert res.iterations == 0

    def test_finds_dual_flip_in_crowded_instance(self, crowded_instance):
        protos, data = crowded_instance
        row = data.rows[2]
        res = search_dual_flip(
            row.embedding, row.label, protos, 0.25, 0.75,
            budget=2000, restarts=10, ascent_steps=20, seed=5,
        )
        assert res.dual_flip_same_class
        assert res.flipped_kl and res.flipped_l0
        assert np.linalg.norm(res.delta) <= 0.25 + 1e-9
        assert abs(res.delta.sum()) < 1e-9  # tangent: the attacked point stays on the simplex

    def test_search_is_deterministic(self, crowded_instance):
        protos, data = crowded_instance
        row = data.rows[3]
        kwargs = dict(budget=500, restarts=4, ascent_steps=10, seed=9)
        a = search_dual_flip(row.embedding, row.label, protos, 0.25, 0.75, **kwargs)
        b = search_dual_flip(row.embedding, row.label, protos, 0.25, 0.75, **kwargs)
        assert np.array_equal(a.delta, b.delta)
        assert a.iterations == b.iterations
        assert a.dual_flip_same_class == b.dual_flip_same_class

    def test_no_flip_still_reports_best_delta(self):
        # Compliant regime: tight budget, far prototypes, no flip expected.
        protos, data = generate_separable_instance(3, 6, 3.0, seed=1, n_per_class=1, noise=0.2)
        row = data.rows[0]
        res = search_dual_flip(
            row.embedding, row.label, protos, 0.005, 0.75,
            budget=400, restarts=2, ascent_steps=5,
        )
        assert not res.dual_flip_same_class
        assert res.iterations >= 400
        assert np.linalg.norm(res.delta) <= 0.005 + 1e-9


class TestCraftAttackedDataset:
    def test_rejects_attacked_input(self, crowded_instance):
        protos, _ = crowded_instance
        attacked = craft_attacked_dataset(
            generate_separable_instance(2, 4, 0.5, seed=3, n_per_class=1, noise=0.1)[1],
            generate_separable_instance(2, 4, 0.5, seed=3, n_per_class=1, noise=0.1)[0],
            epsilon=0.0, tau=0.75, budget=0,
        )
        with pytest.raises(InvalidInput):
            craft_attacked_dataset(attacked, protos, epsilon=0.1, tau=0.75, budget=0)

    def test_twin_structure(self):
        protos, clean = generate_separable_instance(2, 4, 0.5, seed=4, n_per_class=2, noise=0.1)
        out = craft_attacked_dataset(
            clean, protos, epsilon=0.15, tau=0.75, budget=200, restarts=2, ascent_steps=5
        )
        assert len(out) == 2 * len(clean)
        for i, row in enumerate(clean):
            orig, twin = out.rows[2 * i], out.rows[2 * i + 1]
            assert orig == row
            assert twin.id == row.id and twin.label == row.label and twin.attacked
            assert abs(twin.embedding.sum() - 1.0) < 1e-9
            assert np.all(twin.embedding > 0.0)
            assert np.linalg.norm(twin.embedding - row.embedding) <= 0.15 + 1e-9

    def test_zero_budget_copies_embeddings(self):
        protos, clean = generate_separable_instance(2, 4, 0.5, seed=4, n_per_class=2, noise=0.1)
        out = craft_attacked_dataset(clean, protos, epsilon=0.15, tau=0.75, budget=0)
        for i, row in enumerate(clean):
            assert np.array_equal(out.rows[2 * i + 1].embedding, row.embedding)

    def test_crafting_is_deterministic(self):
        protos, clean = generate_separable_instance(2, 4, 0.5, seed=8, n_per_class=2, noise=0.1)
        kwargs = dict(epsilon=0.15, tau=0.75, budget=150, restarts=2, ascent_steps=5, seed=3)
        a = craft_attacked_dataset(clean, protos, **kwargs)
        b = craft_attacked_dataset(clean, protos, **kwargs)
        for ra, rb in zip(a, b):
            assert np.array_equal(ra.embedding, rb.embedding)
