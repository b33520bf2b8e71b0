"""Affine-softmax encoder trained with the composite similarity BCE loss.

The encoder is deliberately small, one affine map followed by a temperature
softmax, because its job is to realize clean dual-head alignment on separable
synthetic data, not to model images. The loss scores every (prototype, sample)
pair in a batch with both similarity surrogates and applies binary
cross-entropy against the pair's match indicator:

    L = w_l0 * L_L0 + w_kl * L_KL,   s_ij in {sim_l0, sim_kl}(c_i, p_j).

Prototypes are recomputed from current embeddings once per epoch and treated
as constants inside gradients. Optimization is plain seeded SGD; the
temperature gradient is reported for diagnostics but the temperature itself
stays fixed.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .classifier import DEFAULT_HEADS, PrototypeSet, detect
from .core import POSITIVITY_FLOOR, normalize_to_simplex
from .errors import FormatError, InvalidInput, TrainError
from .metrics import L0Params, sigmoid

__all__ = [
    "EncoderParams",
    "Gradient",
    "TrainConfig",
    "clean_agreement",
    "forward",
    "grad_loss",
    "loss_components",
    "loss_total",
    "read_encoder",
    "train",
    "write_encoder",
]

_CLAMP_LO = 1e-7
_CLAMP_HI = 1.0 - 1e-7


@dataclass(frozen=True)
class EncoderParams:
    """Affine encoder: embedding = softmax((weight @ x + bias) / temperature)."""

    weight: np.ndarray
    bias: np.ndarray
    temperature: float

    def __post_init__(self):
        w = np.asarray(self.weight, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64)
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)
        if w.ndim != 2:
            raise InvalidInput(f"weight must be a (d, f) matrix, got shape {w.shape}")
        if b.shape != (w.shape[0],):
            raise InvalidInput(f"bias shape {b.shape} does not match weight rows {w.shape[0]}")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise InvalidInput("encoder parameters must be finite")
        if not self.temperature > 0.0:
            raise InvalidInput(f"temperature must be positive, got {self.temperature!r}")

    @property
    def d(self) -> int:
        return self.weight.shape[0]

    @property
    def f(self) -> int:
        return self.weight.shape[1]


@dataclass(frozen=True)
class TrainConfig:
    w_l0: float = 0.9
    w_kl: float = 0.1
    tau: float = 0.75
    phi: float = 0.5
    learning_rate: float = 0.5
    epochs: int = 200
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.w_l0 < 0.0 or self.w_kl < 0.0 or self.w_l0 + self.w_kl <= 0.0:
            raise InvalidInput("loss weights must be non-negative with a positive sum")
        L0Params(tau=self.tau, phi=self.phi)  # reuse the range checks
        if self.epochs < 0 or self.batch_size < 1:
            raise InvalidInput("epochs must be >= 0 and batch_size >= 1")


@dataclass(frozen=True)
class Gradient:
    weight: np.ndarray
    bias: np.ndarray
    temperature: float


def forward(enc: EncoderParams, x) -> np.ndarray:
    """Embed one feature vector onto the simplex."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (enc.f,):
        raise InvalidInput(f"expected features of shape ({enc.f},), got {x.shape}")
    return normalize_to_simplex(enc.weight @ x + enc.bias, enc.temperature)


def _forward_batch(enc: EncoderParams, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rowwise forward; returns (embeddings, pre-softmax logits)."""
    Z = X @ enc.weight.T + enc.bias[None, :]
    scaled = Z / enc.temperature
    scaled = scaled - scaled.max(axis=1, keepdims=True)
    E = np.exp(scaled)
    P = E / E.sum(axis=1, keepdims=True)
    return np.maximum(P, POSITIVITY_FLOOR), Z


def _pair_scores(P: np.ndarray, protos: np.ndarray, tau: float, phi: float):
    """sim_kl and sim_l0 for every (prototype i, sample j) pair.

    Returns (s_kl, s_l0, helpers) with shapes (m, n). helpers carries the
    intermediates the analytic gradient needs.
    """
    m, d = protos.shape
    logP = np.log(P)
    proto_entropy = np.sum(protos * np.log(protos), axis=1)
    kl = proto_entropy[:, None] - protos @ logP.T  # (m, n)
    s_kl = np.exp(-kl)
    diff = protos[:, None, :] - P[None, :, :]  # (m, n, d) = c_i - p_j
    gaps = np.abs(diff)
    mu = gaps.mean(axis=2, keepdims=True)
    sig = sigmoid((gaps - tau * mu) / phi)
    s_l0 = 1.0 - sig.sum(axis=2) / d
    return s_kl, s_l0, (diff, sig)


def _bce(s: np.ndarray, y: np.ndarray) -> float:
    s_tilde = np.clip(s, _CLAMP_LO, _CLAMP_HI)
    return float(np.mean(-y * np.log(s_tilde) - (1.0 - y) * np.log(1.0 - s_tilde)))


def loss_components(enc: EncoderParams, batch, protos: PrototypeSet, cfg: TrainConfig):
    """(L_KL, L_L0) over all (prototype, sample) pairs in the batch."""
    X = np.asarray([x for x, _ in batch], dtype=np.float64)
    y = np.asarray([int(c) for _, c in batch])
    P, _ = _forward_batch(enc, X)
    s_kl, s_l0, _ = _pair_scores(P, protos.vectors, cfg.tau, cfg.phi)
    match = (np.arange(protos.m)[:, None] == y[None, :]).astype(np.float64)
    return _bce(s_kl, match), _bce(s_l0, match)


def loss_total(enc: EncoderParams, batch, protos: PrototypeSet, cfg: TrainConfig) -> float:
    l_kl, l_l0 = loss_components(enc, batch, protos, cfg)
    return cfg.w_l0 * l_l0 + cfg.w_kl * l_kl


def grad_loss(enc: EncoderParams, batch, protos: PrototypeSet, cfg: TrainConfig) -> Gradient:
    """Analytic gradient of loss_total w.r.t. the encoder parameters.

    Chain rule in four stages: BCE w.r.t. the similarity (zero where the clamp
    is active), similarity w.r.t. the embedding, the softmax Jacobian back to
    logits, then the affine map. Prototypes are constants here. The smooth-L0
    stage uses the subgradient convention sign(0) = 0 at gap kinks.

      d sim_kl / d p_l    = sim_kl * c_l / p_l
      d smooth_l0 / d p_l = (sgn_l / phi) * ((tau / d) * sum_i sig'_i - sig'_l)
      d sim_l0 / d p      = -(1/d) d smooth_l0 / d p
      dL/dz               = (1/T) * p * (g - g . p)      per sample
      dL/dT               = -(1/T) * sum_j dL/dz_j * z_j summed over samples
    """
    X = np.asarray([x for x, _ in batch], dtype=np.float64)
    y = np.asarray([int(c) for _, c in batch])
    n = X.shape[0]
    P, Z = _forward_batch(enc, X)
    C = protos.vectors
    m, d = C.shape
    s_kl, s_l0, (diff, sig) = _pair_scores(P, C, cfg.tau, cfg.phi)
    match = (np.arange(m)[:, None] == y[None, :]).astype(np.float64)
    n_pairs = m * n

    def bce_grad(s):
        s_tilde = np.clip(s, _CLAMP_LO, _CLAMP_HI)
        inside = (s > _CLAMP_LO) & (s < _CLAMP_HI)
        return np.where(inside, -match / s_tilde + (1.0 - match) / (1.0 - s_tilde), 0.0)

    # KL component: d s_kl / d p_j = s_kl(i,j) * c_i / p_j, contracted over i.
    coef_kl = bce_grad(s_kl) * s_kl / n_pairs  # (m, n)
    g_emb = cfg.w_kl * (coef_kl.T @ C) / P  # (n, d)

    # L0 component through smooth_l0.
    sgn = np.sign(diff)  # sign(c_i - p_j), (m, n, d)
    sig_prime = sig * (1.0 - sig)
    row_sum = sig_prime.sum(axis=2, keepdims=True)
    d_smooth = (sgn / cfg.phi) * ((cfg.tau / d) * row_sum - sig_prime)  # (m, n, d)
    coef_l0 = bce_grad(s_l0) * (-1.0 / d) / n_pairs  # (m, n)
    g_emb += cfg.w_l0 * np.einsum("ij,ijl->jl", coef_l0, d_smooth)

    inner = np.sum(g_emb * P, axis=1, keepdims=True)
    g_logits = (P * (g_emb - inner)) / enc.temperature  # (n, d)
    g_weight = g_logits.T @ X
    g_bias = g_logits.sum(axis=0)
    g_temp = float(-np.sum(g_logits * Z) / enc.temperature)
    return Gradient(weight=g_weight, bias=g_bias, temperature=g_temp)


def _prototypes_from(P: np.ndarray, y: np.ndarray, m: int) -> PrototypeSet:
    means = np.empty((m, P.shape[1]))
    for cls in range(m):
        mask = y == cls
        if not np.any(mask):
            raise TrainError(f"class {cls} has no examples")
        means[cls] = P[mask].mean(axis=0)
    return PrototypeSet(vectors=means)


def train(data, cfg: TrainConfig, *, dim_out: int, temperature: float = 1.0):
    """Seeded SGD over the composite loss; returns (encoder, prototypes, history).

    ``data`` is a sequence of (feature vector, class) pairs; ``dim_out`` is the
    embedding dimension d. Prototypes are refreshed from the current
    embeddings at the top of every epoch and again after the final epoch.
    History holds one (epoch, L_KL, L_L0, total) row per epoch, measured after
    that epoch's updates. Divergence raises TrainError with the epoch.
    """
    if dim_out < 2:
        raise InvalidInput(f"dim_out must be >= 2, got {dim_out}")
    X = np.asarray([x for x, _ in data], dtype=np.float64)
    y = np.asarray([int(c) for _, c in data])
    if X.ndim != 2 or X.shape[0] == 0:
        raise InvalidInput("training data must be a non-empty list of feature vectors")
    n, f = X.shape
    m = int(y.max()) + 1 if y.size else 0
    if np.any(y < 0):
        raise InvalidInput("class labels must be non-negative")
    rng = np.random.default_rng(cfg.seed)
    weight = 0.1 * rng.standard_normal((dim_out, f))
    bias = np.zeros(dim_out)
    enc = EncoderParams(weight=weight, bias=bias, temperature=temperature)
    pairs = list(zip(X, y))
    history: list[tuple[int, float, float, float]] = []
    for epoch in range(cfg.epochs):
        P, _ = _forward_batch(enc, X)
        protos = _prototypes_from(P, y, m)
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch = [pairs[i] for i in idx]
            g = grad_loss(enc, batch, protos, cfg)
            weight = enc.weight - cfg.learning_rate * g.weight
            bias = enc.bias - cfg.learning_rate * g.bias
            if not (np.all(np.isfinite(weight)) and np.all(np.isfinite(bias))):
                raise TrainError("parameters diverged to non-finite values", epoch=epoch)
            enc = EncoderParams(weight=weight, bias=bias, temperature=temperature)
        l_kl, l_l0 = loss_components(enc, pairs, protos, cfg)
        total = cfg.w_l0 * l_l0 + cfg.w_kl * l_kl
        if not np.isfinite(total):
            raise TrainError(f"loss diverged to {total!r}", epoch=epoch)
        history.append((epoch, l_kl, l_l0, total))
    P, _ = _forward_batch(enc, X)
    protos = _prototypes_from(P, y, m)
    return enc, protos, history


def clean_agreement(enc: EncoderParams, data, protos: PrototypeSet, params: L0Params) -> float:
    """Fraction of samples where both detector heads pick the true class."""
    hits = 0
    total = 0
    for x, cls in data:
        outcome = detect(forward(enc, x), protos, DEFAULT_HEADS, params)
        total += 1
        if not outcome.attack_flag and outcome.predicted_class == int(cls):
            hits += 1
    return hits / total if total else 0.0


_ENCODER_MAGIC = b"KENC"
_ENCODER_HEADER = struct.Struct("<4sII")


def write_encoder(path, enc: EncoderParams) -> None:
    """Binary checkpoint: magic, u32 d, u32 f, then f32 W (row-major), b, T."""
    with open(path, "wb") as fh:
        fh.write(_ENCODER_HEADER.pack(_ENCODER_MAGIC, enc.d, enc.f))
        fh.write(enc.weight.astype("<f4").tobytes())
        fh.write(enc.bias.astype("<f4").tobytes())
        fh.write(struct.pack("<f", enc.temperature))


def read_encoder(path) -> EncoderParams:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _ENCODER_HEADER.size:
        raise FormatError("encoder file too short for its header")
    magic, d, f = _ENCODER_HEADER.unpack_from(blob)
    if magic != _ENCODER_MAGIC:
        raise FormatError(f"bad encoder magic {magic!r}")
    expect = _ENCODER_HEADER.size + 4 * (d * f + d + 1)
    if len(blob) != expect:
        raise FormatError(f"encoder file length {len(blob)} != expected {expect}")
    off = _ENCODER_HEADER.size
    weight = np.frombuffer(blob, dtype="<f4", count=d * f, offset=off).reshape(d, f)
    off += 4 * d * f
    bias = np.frombuffer(blob, dtype="<f4", count=d, offset=off)
    off += 4 * d
    (temp,) = struct.unpack_from("<f", blob, off)
    return EncoderParams(weight=weight.astype(np.float64), bias=bias.astype(np.float64),
                         temperature=float(temp))
