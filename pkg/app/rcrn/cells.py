"""Single-timestep recurrent cells.

All steps work on row batches: `x_t` is B×input_dim and every state is
B×hidden_dim. Weights keep the W: hidden×input, U: hidden×hidden layout; the
gate weights are fused into one matrix per step with `fuse`, which encoders
compute once per sequence.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Literal, Mapping, Optional, Tuple

import numpy as np

from app.rcrn.errors import DimensionError
from app.rcrn.numerics import (
    Parameter,
    Precision,
    Tensor,
    add,
    add_row,
    concat,
    matmul,
    mul,
    one_minus,
    sigmoid,
    slice_axis,
    tanh,
    transpose,
)

Atom = Literal["lstm", "gru"]

LSTM_GATES: Tuple[str, ...] = ("i", "f", "o", "c")
GRU_GATES: Tuple[str, ...] = ("z", "r", "n")
GATES: Dict[str, Tuple[str, ...]] = {"lstm": LSTM_GATES, "gru": GRU_GATES}

FORGET_BIAS = 1.0


@dataclass(frozen=True)
class GateParams:
    W: Parameter  # hidden×input
    U: Parameter  # hidden×hidden
    b: Parameter  # hidden


@dataclass(frozen=True)
class CellParams:
    atom: Atom
    input_dim: int
    hidden_dim: int
    gates: Mapping[str, GateParams]

    def named(self, prefix: str) -> Dict[str, Parameter]:
        out: Dict[str, Parameter] = {}
        for g in GATES[self.atom]:
            gp = self.gates[g]
            out[f"{prefix}.W_{g}"] = gp.W
            out[f"{prefix}.U_{g}"] = gp.U
            out[f"{prefix}.b_{g}"] = gp.b
        return out


@dataclass(frozen=True)
class ControllerParams:
    branch1: CellParams
    branch2: CellParams

    @property
    def atom(self) -> Atom:
        return self.branch1.atom

    def named(self, prefix: str) -> Dict[str, Parameter]:
        return {**self.branch1.named(f"{prefix}.k1"), **self.branch2.named(f"{prefix}.k2")}


@dataclass(frozen=True)
class ControllerState:
    h1: Tensor
    h2: Tensor
    c1: Optional[Tensor] = None
    c2: Optional[Tensor] = None


@dataclass(frozen=True)
class ListenerState:
    h3: Tensor
    c3: Optional[Tensor] = None


@dataclass(frozen=True)
class FusedWeights:
    """Per-step weights: x @ Wt and h @ Ut give all gate pre-activations at once."""

    Wt: Tensor
    Ut: Tensor
    b: Tensor
    Un_t: Optional[Tensor] = None  # GRU candidate, applied to r⊙h


def fuse(p: CellParams) -> FusedWeights:
    names = GATES[p.atom]
    Wt = transpose(concat([p.gates[g].W for g in names], axis=0))
    b = concat([p.gates[g].b for g in names], axis=0)
    if p.atom == "lstm":
        Ut = transpose(concat([p.gates[g].U for g in names], axis=0))
        return FusedWeights(Wt=Wt, Ut=Ut, b=b)
    Ut = transpose(concat([p.gates["z"].U, p.gates["r"].U], axis=0))
    return FusedWeights(Wt=Wt, Ut=Ut, b=b, Un_t=transpose(p.gates["n"].U))


def _check_step(p: CellParams, x_t: Tensor, *states: Tensor) -> None:
    if x_t.ndim != 2 or x_t.shape[1] != p.input_dim:
        raise DimensionError(f"{p.atom} step: input {x_t.shape} does not match input_dim {p.input_dim}")
    for s in states:
        if s.shape != (x_t.shape[0], p.hidden_dim):
            raise DimensionError(f"{p.atom} step: state {s.shape} does not match {(x_t.shape[0], p.hidden_dim)}")


def lstm_step(
    p: CellParams,
    x_t: Tensor,
    h_prev: Tensor,
    c_prev: Tensor,
    weights: Optional[FusedWeights] = None,
) -> Tuple[Tensor, Tensor]:
    _check_step(p, x_t, h_prev, c_prev)
    w = weights or fuse(p)
    H = p.hidden_dim
    z = add_row(add(matmul(x_t, w.Wt), matmul(h_prev, w.Ut)), w.b)
    i = sigmoid(slice_axis(z, 1, 0, H))
    f = sigmoid(slice_axis(z, 1, H, 2 * H))
    o = sigmoid(slice_axis(z, 1, 2 * H, 3 * H))
    g = tanh(slice_axis(z, 1, 3 * H, 4 * H))
    c = add(mul(f, c_prev), mul(i, g))
    h = mul(o, tanh(c))
    return h, c


def gru_step(p: CellParams, x_t: Tensor, h_prev: Tensor, weights: Optional[FusedWeights] = None) -> Tensor:
    """Update/reset-gate GRU: h = (1 - z)⊙n + z⊙h_prev."""
    _check_step(p, x_t, h_prev)
    w = weights or fuse(p)
    H = p.hidden_dim
    zx = add_row(matmul(x_t, w.Wt), w.b)
    zh = matmul(h_prev, w.Ut)
    z = sigmoid(add(slice_axis(zx, 1, 0, H), slice_axis(zh, 1, 0, H)))
    r = sigmoid(add(slice_axis(zx, 1, H, 2 * H), slice_axis(zh, 1, H, 2 * H)))
    n = tanh(add(slice_axis(zx, 1, 2 * H, 3 * H), matmul(mul(r, h_prev), w.Un_t)))
    return add(mul(one_minus(z), n), mul(z, h_prev))


def controller_step(
    p: ControllerParams,
    x_t: Tensor,
    state_prev: ControllerState,
    weights: Optional[Tuple[FusedWeights, FusedWeights]] = None,
) -> ControllerState:
    """Two independent branches over the same input; neither reads the other's state."""
    w1, w2 = weights or (fuse(p.branch1), fuse(p.branch2))
    if p.atom == "lstm":
        h1, c1 = lstm_step(p.branch1, x_t, state_prev.h1, state_prev.c1, w1)
        h2, c2 = lstm_step(p.branch2, x_t, state_prev.h2, state_prev.c2, w2)
        return ControllerState(h1=h1, h2=h2, c1=c1, c2=c2)
    h1 = gru_step(p.branch1, x_t, state_prev.h1, w1)
    h2 = gru_step(p.branch2, x_t, state_prev.h2, w2)
    return ControllerState(h1=h1, h2=h2)


def _seed_words(seed) -> List[int]:
    return [int(s) for s in seed] if isinstance(seed, (list, tuple)) else [int(seed)]


def glorot_bound(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def init_params(
    atom: Atom,
    input_dim: int,
    hidden_dim: int,
    seed,
    scheme: Literal["glorot_uniform"] = "glorot_uniform",
    precision: Precision = "double",
    prefix: str = "cell",
) -> CellParams:
    """Glorot-uniform W and U, zero biases, LSTM forget bias 1.0.

    `seed` is anything `np.random.default_rng` accepts; equal seeds give
    bit-identical parameters.
    """
    if input_dim < 1 or hidden_dim < 1:
        raise DimensionError(f"cell dims must be positive, got input={input_dim} hidden={hidden_dim}")
    if scheme != "glorot_uniform":
        raise ValueError(f"unknown init scheme {scheme!r}")
    rng = np.random.default_rng(seed)
    w_bound = glorot_bound(input_dim, hidden_dim)
    u_bound = glorot_bound(hidden_dim, hidden_dim)
    gates: Dict[str, GateParams] = {}
    for g in GATES[atom]:
        W = rng.uniform(-w_bound, w_bound, size=(hidden_dim, input_dim))
        U = rng.uniform(-u_bound, u_bound, size=(hidden_dim, hidden_dim))
        b = np.full(hidden_dim, FORGET_BIAS if (atom == "lstm" and g == "f") else 0.0)
        gates[g] = GateParams(
            W=Parameter(W, precision, name=f"{prefix}.W_{g}"),
            U=Parameter(U, precision, name=f"{prefix}.U_{g}"),
            b=Parameter(b, precision, name=f"{prefix}.b_{g}"),
        )
    return CellParams(atom=atom, input_dim=input_dim, hidden_dim=hidden_dim, gates=gates)


def init_controller_params(
    atom: Atom,
    input_dim: int,
    hidden_dim: int,
    seed,
    precision: Precision = "double",
    prefix: str = "controller",
) -> ControllerParams:
    return ControllerParams(
        branch1=init_params(atom, input_dim, hidden_dim, [*_seed_words(seed), 1], precision=precision, prefix=f"{prefix}.k1"),
        branch2=init_params(atom, input_dim, hidden_dim, [*_seed_words(seed), 2], precision=precision, prefix=f"{prefix}.k2"),
    )


def cell_param_count(atom: Atom, input_dim: int, hidden_dim: int) -> int:
    return len(GATES[atom]) * (hidden_dim * input_dim + hidden_dim * hidden_dim + hidden_dim)
