import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from protodetect import (
    DimensionError,
    EmbeddingDataset,
    InvalidInput,
    LabeledEmbedding,
    Perturbation,
    as_simplex,
    is_simplex,
    normalize_to_simplex,
    validate_assumptions,
)
from protodetect.core import POSITIVITY_FLOOR, SUM_TOL


def test_as_simplex_accepts_exact():
    v = as_simplex([0.25, 0.75])
    assert v.dtype == np.float64
    assert v.shape == (2,)


def test_as_simplex_rejects_bad_sum():
    with pytest.raises(InvalidInput):
        as_simplex([0.3, 0.8])


def test_as_simplex_rejects_zero_and_negative():
    with pytest.raises(InvalidInput):
        as_simplex([0.0, 1.0])
    with pytest.raises(InvalidInput):
        as_simplex([-0.1, 1.1])


def test_as_simplex_rejects_scalar_and_matrix():
    with pytest.raises(InvalidInput):
        as_simplex(1.0)
    with pytest.raises(InvalidInput):
        as_simplex([[0.5, 0.5]])


def test_as_simplex_sum_tolerance_boundary():
    # Off by slightly less than the tolerance passes, slightly more fails.
    ok = np.array([0.5, 0.5 + 0.9 * SUM_TOL])
    as_simplex(ok)
    bad = np.array([0.5, 0.5 + 10 * SUM_TOL])
    with pytest.raises(InvalidInput):
        as_simplex(bad)


def test_is_simplex_mirrors_as_simplex():
    assert is_simplex([0.5, 0.5])
    assert not is_simplex([0.5, 0.6])
    assert not is_simplex([1.0, 0.0])


@given(st.lists(st.floats(-30, 30), min_size=2, max_size=8), st.floats(0.1, 5.0))
@settings(max_examples=200, deadline=None)
def test_normalize_always_lands_on_simplex(logits, temperature):
    p = normalize_to_simplex(np.array(logits), temperature)
    assert is_simplex(p)
    assert np.all(p >= POSITIVITY_FLOOR)


@given(st.lists(st.floats(-20, 20), min_size=2, max_size=6), st.floats(-50, 50))
@settings(max_examples=200, deadline=None)
def test_normalize_shift_invariance(logits, shift):
    """softmax(z + c) == softmax(z), the max-subtraction guarantee."""
    z = np.array(logits)
    a = normalize_to_simplex(z, 1.0)
    b = normalize_to_simplex(z + shift, 1.0)
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


def test_normalize_extreme_logits_stay_positive():
    p = normalize_to_simplex(np.array([800.0, -800.0]), 1.0)
    assert p[1] >= POSITIVITY_FLOOR
    assert is_simplex(p)


def test_normalize_temperature_sharpens():
    z = np.array([1.0, 0.0, 0.0])
    hot = normalize_to_simplex(z, 2.0)
    cold = normalize_to_simplex(z, 0.5)
    assert cold[0] > hot[0]


def test_normalize_rejects_nonpositive_temperature():
    with pytest.raises(InvalidInput):
        normalize_to_simplex(np.array([0.0, 1.0]), 0.0)


def test_dataset_validates_labels_and_shapes():
    row = LabeledEmbedding(id="0", label=0, attacked=False,
                           embedding=np.array([0.5, 0.5]))
    ds = EmbeddingDataset(d=2, m=1, rows=(row,))
    assert len(ds) == 1
    assert ds.labels().tolist() == [0]
    assert ds.attacked_flags().tolist() == [False]
    with pytest.raises(InvalidInput):
        EmbeddingDataset(d=2, m=1, rows=(
            LabeledEmbedding(id="0", label=1, attacked=False,
                             embedding=np.array([0.5, 0.5])),))
    with pytest.raises(DimensionError):
        EmbeddingDataset(d=3, m=1, rows=(row,))


def test_dataset_embeddings_stack():
    rows = tuple(
        LabeledEmbedding(id=str(i), label=0, attacked=False,
                         embedding=np.array([0.25, 0.75]))
        for i in range(3)
    )
    ds = EmbeddingDataset(d=2, m=1, rows=rows)
    assert ds.embeddings().shape == (3, 2)
    assert EmbeddingDataset(d=2, m=1, rows=()).embeddings().shape == (0, 2)


class TestValidateAssumptions:
    def test_all_hold(self):
        p = np.array([0.5, 0.3, 0.2])
        pert = Perturbation(delta=np.array([0.01, -0.005, -0.005]), epsilon=0.05)
        verdict = validate_assumptions(p, pert)
        assert verdict.simplex_clean
        assert verdict.simplex_attacked
        assert verdict.within_budget
        assert verdict.bounded_ratio

    def test_budget_violation(self):
        p = np.array([0.5, 0.5])
        pert = Perturbation(delta=np.array([0.2, -0.2]), epsilon=0.01)
        assert not validate_assumptions(p, pert).within_budget

    def test_ratio_violation(self):
        """Coordinate moves beyond 1.5x its clean mass."""
        p = np.array([0.9, 0.05, 0.05])
        pert = Perturbation(delta=np.array([-0.1, 0.1, 0.0]), epsilon=1.0)
        assert not validate_assumptions(p, pert).bounded_ratio

    def test_attacked_off_simplex(self):
        p = np.array([0.5, 0.5])
        pert = Perturbation(delta=np.array([0.1, 0.0]), epsilon=1.0)
        v = validate_assumptions(p, pert)
        assert v.simplex_clean and not v.simplex_attacked

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            validate_assumptions(np.array([0.5, 0.5]),
                                 Perturbation(delta=np.zeros(3), epsilon=1.0))
