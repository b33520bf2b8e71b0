"""Encoder, composite loss, analytic gradient and checkpoint tests."""

from __future__ import annotations

import math

import numpy as np
import pytest

from protodetect import (
    EncoderParams,
    FormatError,
    InvalidInput,
    L0Params,
    METRIC_CASES,
    PrototypeSet,
    TrainConfig,
    TrainError,
    clean_agreement,
    forward,
    generate_gaussian_clusters,
    grad_loss,
    loss_components,
    loss_total,
    read_encoder,
    train,
    write_encoder,
)
from protodetect.training import _bce

CASES = {case.name: case for case in METRIC_CASES}


def small_encoder() -> EncoderParams:
    weight = np.array([[0.5, -0.25, 1.0], [0.0, 0.75, -0.5], [-1.0, 0.5, 0.25]])
    bias = np.array([0.125, -0.5, 0.25])
    return EncoderParams(weight=weight, bias=bias, temperature=1.0)


class TestEncoderParams:
    def test_requires_matrix_weight(self):
        with pytest.raises(InvalidInput):
            EncoderParams(weight=np.ones(3), bias=np.zeros(3), temperature=1.0)

    def test_bias_shape_checked(self):
        with pytest.raises(InvalidInput):
            EncoderParams(weight=np.ones((3, 2)), bias=np.zeros(2), temperature=1.0)

    def test_rejects_non_finite(self):
        w = np.ones((2, 2))
        w[0, 0] = math.inf
        with pytest.raises(InvalidInput):
            EncoderParams(weight=w, bias=np.zeros(2), temperature=1.0)

    def test_temperature_positive(self):
        for t in (0.0, -1.0):
            with pytest.raises(InvalidInput):
                EncoderParams(weight=np.ones((2, 2)), bias=np.zeros(2), temperature=t)

    def test_shape_properties(self):
        enc = small_encoder()
        assert enc.d == 3 and enc.f == 3


class TestTrainConfig:
    def test_defaults_weight_l0_heavier(self):
        cfg = TrainConfig()
        assert cfg.w_l0 > cfg.w_kl > 0.0

    def test_rejects_negative_weights(self):
        with pytest.raises(InvalidInput):
            TrainConfig(w_l0=-0.1)

    def test_rejects_all_zero_weights(self):
        with pytest.raises(InvalidInput):
            TrainConfig(w_l0=0.0, w_kl=0.0)

    def test_tau_range_shared_with_l0_params(self):
        with pytest.raises(InvalidInput):
            TrainConfig(tau=1.5)

    def test_epoch_and_batch_bounds(self):
        with pytest.raises(InvalidInput):
            TrainConfig(epochs=-1)
        with pytest.raises(InvalidInput):
            TrainConfig(batch_size=0)


def test_forward_matches_manual_softmax():
    enc = small_encoder()
    x = np.array([1.0, 2.0, -1.0])
    logits = enc.weight @ x + enc.bias
    manual = np.exp(logits) / np.sum(np.exp(logits))
    assert np.allclose(forward(enc, x), manual, atol=1e-12)


def test_forward_applies_temperature():
    enc = small_encoder()
    sharp = EncoderParams(weight=enc.weight, bias=enc.bias, temperature=0.25)
    x = np.array([1.0, 2.0, -1.0])
    p_warm, p_sharp = forward(enc, x), forward(sharp, x)
    assert p_sharp.max() > p_warm.max()
    assert abs(p_sharp.sum() - 1.0) < 1e-12


def test_forward_checks_feature_shape():
    with pytest.raises(InvalidInput):
        forward(small_encoder(), np.ones(4))


def test_bce_fixture():
    case = CASES["bce_half"]
    got = _bce(np.array([[case.inputs["s"]]]), np.array([[case.inputs["y"]]], dtype=float))
    assert got == pytest.approx(case.expected["bce"], abs=1e-12)


def test_bce_clamp_keeps_loss_finite():
    assert math.isfinite(_bce(np.array([[0.0]]), np.array([[1.0]])))
    assert math.isfinite(_bce(np.array([[1.0]]), np.array([[0.0]])))


def tiny_batch(seed: int = 0):
    rng = np.random.default_rng(seed)
    batch = [(rng.standard_normal(3), i % 2) for i in range(6)]
    w = rng.uniform(0.2, 1.0, size=(2, 3))
    protos = PrototypeSet(vectors=w / w.sum(axis=1, keepdims=True))
    return batch, protos


def test_loss_total_combines_components():
    batch, protos = tiny_batch()
    cfg = TrainConfig(w_l0=0.7, w_kl=0.3)
    enc = small_encoder()
    l_kl, l_l0 = loss_components(enc, batch, protos, cfg)
    assert loss_total(enc, batch, protos, cfg) == pytest.approx(
        0.7 * l_l0 + 0.3 * l_kl, abs=1e-15
    )
    assert l_kl > 0.0 and l_l0 > 0.0


def test_grad_matches_finite_differences():
    # The acceptance suite sweeps 50 instances; two seeds here as the canary.
    h = 1e-6
    cfg = TrainConfig()
    for seed in (0, 1):
        batch, protos = tiny_batch(seed)
        rng = np.random.default_rng(seed + 100)
        enc = EncoderParams(
            weight=0.5 * rng.standard_normal((3, 3)),
            bias=0.1 * rng.standard_normal(3),
            temperature=1.0,
        )
        g = grad_loss(enc, batch, protos, cfg)

        def loss_at(w, b, t):
            return loss_total(EncoderParams(weight=w, bias=b, temperature=t), batch, protos, cfg)

        for i in range(3):
            for j in range(3):
                bump = np.zeros((3, 3))
                bump[i, j] = h
                fd = (loss_at(enc.weight + bump, enc.bias, 1.0)
                      - loss_at(enc.weight - bump, enc.bias, 1.0)) / (2 * h)
                assert g.weight[i, j] == pytest.approx(fd, rel=1e-4, abs=1e-8)
        for i in range(3):
            bump = np.zeros(3)
            bump[i] = h
            fd = (loss_at(enc.weight, enc.bias + bump, 1.0)
                  - loss_at(enc.weight, enc.bias - bump, 1.0)) / (2 * h)
            assert g.bias[i] == pytest.approx(fd, rel=1e-4, abs=1e-8)
        fd_t = (loss_at(enc.weight, enc.bias, 1.0 + h)
                - loss_at(enc.weight, enc.bias, 1.0 - h)) / (2 * h)
        assert g.temperature == pytest.approx(fd_t, rel=1e-4, abs=1e-8)


@pytest.fixture(scope="module")
def trained():
    data = generate_gaussian_clusters(8, 2, 80, seed=0, spread=0.4)
    cfg = TrainConfig(epochs=150, seed=0)
    return data, cfg, train(data, cfg, dim_out=4)


class TestTrain:
    def test_validates_dim_out(self):
        data = generate_gaussian_clusters(4, 2, 8, seed=0)
        with pytest.raises(InvalidInput):
            train(data, TrainConfig(epochs=1), dim_out=1)

    def test_rejects_empty_data(self):
        with pytest.raises(InvalidInput):
            train([], TrainConfig(epochs=1), dim_out=3)

    def test_rejects_negative_labels(self):
        data = [(np.ones(3), -1), (np.ones(3), 0)]
        with pytest.raises(InvalidInput):
            train(data, TrainConfig(epochs=1), dim_out=3)

    def test_missing_class_raises(self):
        rng = np.random.default_rng(0)
        data = [(rng.standard_normal(3), c) for c in (0, 0, 2, 2)]
        with pytest.raises(TrainError, match="class 1"):
            train(data, TrainConfig(epochs=1), dim_out=3)

    def test_history_shape(self, trained):
        data, cfg, (enc, protos, history) = trained
        assert len(history) == cfg.epochs
        assert [row[0] for row in history] == list(range(cfg.epochs))
        for _, l_kl, l_l0, total in history:
            assert total == pytest.approx(cfg.w_l0 * l_l0 + cfg.w_kl * l_kl, abs=1e-12)

    def test_temperature_stays_fixed(self, trained):
        _, _, (enc, _, _) = trained
        assert enc.temperature == 1.0

    def test_prototype_count_matches_classes(self, trained):
        data, _, (_, protos, _) = trained
        assert protos.m == 2 and protos.d == 4

    def test_reaches_clean_agreement(self, trained):
        data, cfg, (enc, protos, _) = trained
        assert clean_agreement(enc, data, protos, L0Params(tau=cfg.tau)) >= 0.9

    def test_deterministic(self, trained):
        data, cfg, (enc, protos, history) = trained
        enc2, protos2, history2 = train(data, cfg, dim_out=4)
        assert np.array_equal(enc.weight, enc2.weight)
        assert np.array_equal(enc.bias, enc2.bias)
        assert np.array_equal(protos.vectors, protos2.vectors)
        assert history == history2


def test_clean_agreement_empty_data_is_zero():
    protos = PrototypeSet(vectors=np.array([[0.6, 0.4], [0.4, 0.6]]))
    assert clean_agreement(small_encoder(), [], protos, L0Params()) == 0.0


class TestEncoderCheckpoint:
    def test_round_trip_exact_for_f32_values(self, tmp_path):
        enc = small_encoder()  # all entries are exact in float32
        path = tmp_path / "enc.kenc"
        write_encoder(path, enc)
        back = read_encoder(path)
        assert np.array_equal(back.weight, enc.weight)
        assert np.array_equal(back.bias, enc.bias)
        assert back.temperature == enc.temperature

    def test_round_trip_quantizes_general_values(self, tmp_path):
        rng = np.random.default_rng(5)
        enc = EncoderParams(
            weight=rng.standard_normal((4, 6)),
            bias=rng.standard_normal(4),
            temperature=0.875,
        )
        path = tmp_path / "enc.kenc"
        write_encoder(path, enc)
        back = read_encoder(path)
        assert back.d == 4 and back.f == 6
        assert np.allclose(back.weight, enc.weight, atol=1e-6)
        assert np.allclose(back.bias, enc.bias, atol=1e-6)
        assert back.temperature == pytest.approx(0.875, abs=1e-7)

    def test_rejects_bad_magic(self, tmp_path):
        path = tmp_path / "enc.kenc"
        write_encoder(path, small_encoder())
        blob = bytearray(path.read_bytes())
        blob[:4] = b"XENC"
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError, match="magic"):
            read_encoder(path)

    def test_rejects_truncated_file(self, tmp_path):
        path = tmp_path / "enc.kenc"
        write_encoder(path, small_encoder())
        path.write_bytes(path.read_bytes()[:-3])
        with pytest.raises(FormatError, match="length"):
            read_encoder(path)

    def test_rejects_header_only(self, tmp_path):
        path = tmp_path / "enc.kenc"
        path.write_bytes(b"KE")
        with pytest.raises(FormatError, match="short"):
            read_encoder(path)
