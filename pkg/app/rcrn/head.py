from __future__ import annotations

from dataclasses import dataclass
from typing import Dict

import numpy as np

from app.rcrn.cells import glorot_bound
from app.rcrn.encoder import EncodedSequence
from app.rcrn.errors import InputError
from app.rcrn.numerics import Parameter, Precision, Tensor, add_row, apply, matmul, relu


@dataclass(frozen=True)
class PooledFeatures:
    vector: Tensor  # B×3F: [max | mean | min] over F-wide states


@dataclass(frozen=True)
class HeadParams:
    dense_W: Parameter  # 3F×H
    dense_b: Parameter  # H
    out_W: Parameter  # H×C
    out_b: Parameter  # C

    def named(self, prefix: str = "head") -> Dict[str, Parameter]:
        return {
            f"{prefix}.dense.W": self.dense_W,
            f"{prefix}.dense.b": self.dense_b,
            f"{prefix}.out.W": self.out_W,
            f"{prefix}.out.b": self.out_b,
        }


@dataclass(frozen=True)
class Prediction:
    logits: Tensor  # B×C
    probs: Tensor  # B×C


def init_head_params(feature_dim: int, hidden: int, classes: int, seed, precision: Precision = "double") -> HeadParams:
    rng = np.random.default_rng(seed)
    b1 = glorot_bound(feature_dim, hidden)
    b2 = glorot_bound(hidden, classes)
    return HeadParams(
        dense_W=Parameter(rng.uniform(-b1, b1, size=(feature_dim, hidden)), precision, name="head.dense.W"),
        dense_b=Parameter(np.zeros(hidden), precision, name="head.dense.b"),
        out_W=Parameter(rng.uniform(-b2, b2, size=(hidden, classes)), precision, name="head.out.W"),
        out_b=Parameter(np.zeros(classes), precision, name="head.out.b"),
    )


def masked_pool(enc: EncodedSequence) -> PooledFeatures:
    """Max, mean and min over each example's unmasked positions."""
    lengths = np.asarray(enc.lengths)
    if (lengths < 1).any():
        raise InputError(f"cannot pool example {int(np.argmin(lengths))}: zero length")

    def forward(x: np.ndarray) -> np.ndarray:
        B, _, F = x.shape
        out = np.empty((B, 3 * F), dtype=x.dtype)
        for b in range(B):
            valid = x[b, : lengths[b]]
            out[b, :F] = valid.max(axis=0)
            out[b, F : 2 * F] = valid.sum(axis=0) / lengths[b]
            out[b, 2 * F :] = valid.min(axis=0)
        return out

    def vjp(g: np.ndarray, out: np.ndarray, x: np.ndarray):
        B, _, F = x.shape
        gx = np.zeros_like(x)
        cols = np.arange(F)
        for b in range(B):
            L = lengths[b]
            valid = x[b, :L]
            gx[b, valid.argmax(axis=0), cols] += g[b, :F]
            gx[b, :L] += g[b, F : 2 * F] / L
            gx[b, valid.argmin(axis=0), cols] += g[b, 2 * F :]
        return (gx,)

    return PooledFeatures(apply("masked_pool", (enc.states,), forward, vjp))


def _softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(logits: Tensor) -> Tensor:
    def vjp(g, out, z):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return apply("softmax", (logits,), _softmax, vjp)


def classify(p: HeadParams, f: PooledFeatures) -> Prediction:
    hidden = relu(add_row(matmul(f.vector, p.dense_W), p.dense_b))
    logits = add_row(matmul(hidden, p.out_W), p.out_b)
    return Prediction(logits=logits, probs=softmax(logits))


def cross_entropy(pred: Prediction, labels: np.ndarray) -> Tensor:
    """Mean over the batch of -log p[label], evaluated with log-sum-exp."""
    labels = np.asarray(labels, dtype=np.int64)
    B, C = pred.logits.shape
    if labels.shape != (B,):
        raise InputError(f"expected {B} labels, got shape {labels.shape}")
    if ((labels < 0) | (labels >= C)).any():
        bad = int(labels[(labels < 0) | (labels >= C)][0])
        raise InputError(f"label {bad} outside [0, {C})")
    rows = np.arange(B)

    def forward(z: np.ndarray) -> np.ndarray:
        shifted = z - z.max(axis=1, keepdims=True)
        log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        return np.asarray(-log_probs[rows, labels].mean())

    def vjp(g, out, z):
        grad = _softmax(z)
        grad[rows, labels] -= 1.0
        return (grad * (g / B),)

    return apply("cross_entropy", (pred.logits,), forward, vjp)
