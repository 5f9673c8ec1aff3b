"""Sequence encoders: bidirectional wrappers, RCRN and the (stacked) BiLSTM baselines.

Inputs are B×T×D with a B×T prefix mask. Recurrences stop at each example's
true length: states at padded positions are zero and the backward direction
starts from the last real token.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Literal, Optional, Tuple, Union

import numpy as np

from app.rcrn.cells import (
    CellParams,
    ControllerParams,
    ControllerState,
    cell_param_count,
    controller_step,
    fuse,
    gru_step,
    init_controller_params,
    init_params,
    lstm_step,
)
from app.rcrn.errors import ContractError, DimensionError, InputError
from app.rcrn.numerics import Parameter, Precision, Tensor, apply_mask, concat, index, stack, zeros
from app.rcrn.scan import ScanInput, combine_output, scan
from app.rcrn.schema import EncoderConfig

CellKind = Literal["lstm", "gru", "controller"]
State = Tuple[Tensor, ...]


@dataclass(frozen=True)
class EncodedSequence:
    states: Tensor  # B×T×2d
    mask: np.ndarray  # B×T of {0, 1}
    lengths: np.ndarray  # B


@dataclass(frozen=True)
class RcrnParams:
    controller_fwd: ControllerParams
    controller_bwd: ControllerParams
    listener_fwd: CellParams
    listener_bwd: CellParams

    def named(self, prefix: str = "encoder") -> Dict[str, Parameter]:
        return {
            **self.controller_fwd.named(f"{prefix}.controller.fwd"),
            **self.controller_bwd.named(f"{prefix}.controller.bwd"),
            **self.listener_fwd.named(f"{prefix}.listener.fwd"),
            **self.listener_bwd.named(f"{prefix}.listener.bwd"),
        }


@dataclass(frozen=True)
class StackParams:
    layers: Tuple[Tuple[CellParams, CellParams], ...]

    def named(self, prefix: str = "encoder") -> Dict[str, Parameter]:
        out: Dict[str, Parameter] = {}
        for i, (fwd, bwd) in enumerate(self.layers):
            out.update(fwd.named(f"{prefix}.layer{i}.fwd"))
            out.update(bwd.named(f"{prefix}.layer{i}.bwd"))
        return out


EncoderParams = Union[RcrnParams, StackParams]


def check_mask(mask: np.ndarray) -> np.ndarray:
    """Validate a B×T prefix mask and return the per-example lengths."""
    m = np.asarray(mask)
    if m.ndim != 2:
        raise InputError(f"mask must be B×T, got shape {m.shape}")
    if not np.isin(m, (0, 1)).all():
        raise InputError("mask values must be 0 or 1")
    rising = np.diff(m.astype(np.int8), axis=1) > 0
    if rising.any():
        row = int(np.argwhere(rising)[0][0])
        raise InputError(f"mask row {row} is not prefix-shaped (a 1 follows a 0)")
    return m.sum(axis=1).astype(np.int64)


@dataclass(frozen=True)
class _Recurrence:
    names: Tuple[str, ...]
    hidden_dim: int
    step: Callable[[Tensor, State], State]


def _recurrence(cell: CellKind, params) -> _Recurrence:
    if cell == "lstm":
        w = fuse(params)
        return _Recurrence(("h", "c"), params.hidden_dim, lambda x, s: lstm_step(params, x, s[0], s[1], w))
    if cell == "gru":
        w = fuse(params)
        return _Recurrence(("h",), params.hidden_dim, lambda x, s: (gru_step(params, x, s[0], w),))
    if cell != "controller":
        raise ValueError(f"unknown cell {cell!r}")
    ws = (fuse(params.branch1), fuse(params.branch2))
    d = params.branch1.hidden_dim
    if params.atom == "lstm":

        def step(x: Tensor, s: State) -> State:
            st = controller_step(params, x, ControllerState(h1=s[0], c1=s[1], h2=s[2], c2=s[3]), ws)
            return st.h1, st.c1, st.h2, st.c2

        return _Recurrence(("h1", "c1", "h2", "c2"), d, step)

    def gru_pair(x: Tensor, s: State) -> State:
        st = controller_step(params, x, ControllerState(h1=s[0], h2=s[1]), ws)
        return st.h1, st.h2

    return _Recurrence(("h1", "h2"), d, gru_pair)


def _run(rec: _Recurrence, seq: Tensor, mask: np.ndarray, reverse: bool) -> Dict[str, Tensor]:
    B, T, _ = seq.shape
    zero = zeros((B, rec.hidden_dim), seq.precision)
    blank: State = tuple(zero for _ in rec.names)
    state = blank
    steps: List[Optional[State]] = [None] * T
    for t in (range(T - 1, -1, -1) if reverse else range(T)):
        m = mask[:, t]
        if not m.any():
            state = blank
        else:
            state = rec.step(index(seq, 1, t), state)
            if not m.all():
                state = tuple(apply_mask(s, m) for s in state)
        steps[t] = state
    return {name: stack([steps[t][k] for t in range(T)], axis=1) for k, name in enumerate(rec.names)}


def bidirectional_encode(
    cell: CellKind,
    params_fwd,
    params_bwd,
    seq: Tensor,
    mask: np.ndarray,
) -> Dict[str, Tensor]:
    """Run `cell` left-to-right and right-to-left; every state component is
    returned as B×T×2d with the forward half first."""
    if seq.ndim != 3:
        raise DimensionError(f"sequence must be B×T×D, got {seq.shape}")
    mask = np.asarray(mask)
    check_mask(mask)
    if mask.shape != seq.shape[:2]:
        raise DimensionError(f"mask {mask.shape} does not match sequence {seq.shape}")
    fwd = _run(_recurrence(cell, params_fwd), seq, mask, reverse=False)
    bwd = _run(_recurrence(cell, params_bwd), seq, mask, reverse=True)
    return {k: concat([fwd[k], bwd[k]], axis=-1) for k in fwd}


def rcrn_encode(config: EncoderConfig, params: RcrnParams, seq: Tensor, mask: np.ndarray) -> EncodedSequence:
    if config.encoder_kind != "rcrn":
        raise ContractError(f"rcrn_encode called with encoder_kind={config.encoder_kind}")
    mask = np.asarray(mask)
    lengths = check_mask(mask)
    ctrl = bidirectional_encode("controller", params.controller_fwd, params.controller_bwd, seq, mask)
    lis = bidirectional_encode(config.atom, params.listener_fwd, params.listener_bwd, seq, mask)
    h1, h2, h3 = ctrl["h1"], ctrl["h2"], lis["h"]
    # GRU listeners expose no cell state; h3 stands in for c3.
    c3 = lis.get("c", h3)
    B, _, width = h3.shape
    c0 = zeros((B, width), seq.precision)
    c4 = scan(ScanInput(h1, h3, c0), impl=config.scan_impl, workers=config.workers).c4_seq
    h4 = combine_output(h2, c3, c4, config.output_gate_mode)
    return EncodedSequence(states=apply_mask(h4, mask), mask=mask, lengths=lengths)


def stacked_bilstm_encode(config: EncoderConfig, params: StackParams, seq: Tensor, mask: np.ndarray) -> EncodedSequence:
    mask = np.asarray(mask)
    lengths = check_mask(mask)
    x = seq
    for fwd, bwd in params.layers:
        x = bidirectional_encode(config.atom, fwd, bwd, x, mask)["h"]
    return EncodedSequence(states=x, mask=mask, lengths=lengths)


def encode(config: EncoderConfig, params: EncoderParams, seq: Tensor, mask: np.ndarray) -> EncodedSequence:
    if config.encoder_kind == "rcrn":
        return rcrn_encode(config, params, seq, mask)
    return stacked_bilstm_encode(config, params, seq, mask)


def init_encoder_params(config: EncoderConfig, precision: Precision = "double") -> EncoderParams:
    D, d, atom, seed = config.input_dim, config.hidden_dim, config.atom, config.seed
    if config.encoder_kind == "rcrn":
        return RcrnParams(
            controller_fwd=init_controller_params(atom, D, d, [seed, 0], precision, "encoder.controller.fwd"),
            controller_bwd=init_controller_params(atom, D, d, [seed, 1], precision, "encoder.controller.bwd"),
            listener_fwd=init_params(atom, D, d, [seed, 2], precision=precision, prefix="encoder.listener.fwd"),
            listener_bwd=init_params(atom, D, d, [seed, 3], precision=precision, prefix="encoder.listener.bwd"),
        )
    layers = []
    for i in range(config.depth):
        width = D if i == 0 else 2 * d
        layers.append(
            (
                init_params(atom, width, d, [seed, 100 + 2 * i], precision=precision, prefix=f"encoder.layer{i}.fwd"),
                init_params(atom, width, d, [seed, 101 + 2 * i], precision=precision, prefix=f"encoder.layer{i}.bwd"),
            )
        )
    return StackParams(layers=tuple(layers))


def count_params(config: EncoderConfig) -> int:
    """Trainable scalars in the encoder alone."""
    D, d, atom = config.input_dim, config.hidden_dim, config.atom
    if config.encoder_kind == "rcrn":
        # two controller branches plus the listener, each bidirectional
        return 6 * cell_param_count(atom, D, d)
    return 2 * cell_param_count(atom, D, d) + 2 * (config.depth - 1) * cell_param_count(atom, 2 * d, d)
