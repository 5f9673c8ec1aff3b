"""Element-wise gated recurrence and the output combine step.

    c4_t = σ(g_t) ⊙ c4_{t-1} + (1 - σ(g_t)) ⊙ v_t

`scan_naive` records one tape node per elementary operation and time step.
`scan_optimized` is a single primitive: the gates for the whole block are
computed at once and the time loop runs per feature lane, with lanes split over
a thread pool. Each lane performs the same multiply/add sequence as the naive
loop, so both forms agree bit for bit.
"""

from __future__ import annotations

import atexit
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Literal

import numpy as np

from app.rcrn.errors import DimensionError
from app.rcrn.numerics import Tensor, add, apply, index, mul, one_minus, sigmoid, stable_sigmoid, stack

logger = logging.getLogger(__name__)

OutputGateMode = Literal["literal", "gated_c4"]
ScanImpl = Literal["naive", "optimized"]


@dataclass(frozen=True)
class ScanInput:
    gate_seq: Tensor  # [..., T, d]; the controller's h1
    value_seq: Tensor  # [..., T, d]; the listener's h3
    c0: Tensor  # [..., d]

    def __post_init__(self) -> None:
        g, v, c0 = self.gate_seq, self.value_seq, self.c0
        if g.ndim < 2 or g.shape != v.shape:
            raise DimensionError(f"scan: gate {g.shape} and value {v.shape} must match and have a time axis")
        expected = g.shape[:-2] + g.shape[-1:]
        if c0.shape != expected:
            raise DimensionError(f"scan: c0 {c0.shape} does not match {expected}")

    @property
    def length(self) -> int:
        return self.gate_seq.shape[-2]


@dataclass(frozen=True)
class ScanOutput:
    c4_seq: Tensor


def scan_naive(inp: ScanInput) -> ScanOutput:
    c = inp.c0
    states: List[Tensor] = []
    for t in range(inp.length):
        s = sigmoid(index(inp.gate_seq, -2, t))
        c = add(mul(s, c), mul(one_minus(s), index(inp.value_seq, -2, t)))
        states.append(c)
    return ScanOutput(stack(states, axis=-2))


_POOLS: Dict[int, ThreadPoolExecutor] = {}
_POOLS_LOCK = threading.Lock()


def _pool(workers: int) -> ThreadPoolExecutor:
    with _POOLS_LOCK:
        pool = _POOLS.get(workers)
        if pool is None:
            logger.debug("starting scan pool with %d workers", workers)
            pool = _POOLS[workers] = ThreadPoolExecutor(max_workers=workers, thread_name_prefix="rcrn-scan")
        return pool


@atexit.register
def shutdown_pools() -> None:
    """Stop every lane pool. A later scan starts fresh pools."""
    with _POOLS_LOCK:
        pools = list(_POOLS.values())
        _POOLS.clear()
    for pool in pools:
        pool.shutdown(wait=True)


def _lanes(d: int, workers: int) -> List[slice]:
    bounds = np.linspace(0, d, min(workers, d) + 1).astype(int)
    return [slice(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]


def _run_lanes(fn, d: int, workers: int) -> None:
    lanes = _lanes(d, workers)
    if len(lanes) == 1:
        fn(lanes[0])
        return
    for fut in [_pool(workers).submit(fn, sl) for sl in lanes]:
        fut.result()


def scan_optimized(inp: ScanInput, workers: int = 1) -> ScanOutput:
    if workers < 1:
        raise ValueError(f"workers must be >= 1, got {workers}")
    T = inp.length
    d = inp.gate_seq.shape[-1]

    def forward(g: np.ndarray, v: np.ndarray, c0: np.ndarray) -> np.ndarray:
        s = stable_sigmoid(g)
        om = 1.0 - s
        out = np.empty_like(v)

        def lane(sl: slice) -> None:
            c = c0[..., sl]
            for t in range(T):
                c = s[..., t, sl] * c + om[..., t, sl] * v[..., t, sl]
                out[..., t, sl] = c

        _run_lanes(lane, d, workers)
        return out

    def vjp(gout: np.ndarray, out: np.ndarray, g: np.ndarray, v: np.ndarray, c0: np.ndarray):
        s = stable_sigmoid(g)
        om = 1.0 - s
        dg = np.empty_like(g)
        dv = np.empty_like(v)
        dc0 = np.empty_like(c0)

        def lane(sl: slice) -> None:
            dc = np.zeros_like(c0[..., sl])
            for t in range(T - 1, -1, -1):
                dc = dc + gout[..., t, sl]
                c_prev = out[..., t - 1, sl] if t > 0 else c0[..., sl]
                st, omt = s[..., t, sl], om[..., t, sl]
                dv[..., t, sl] = dc * omt
                dg[..., t, sl] = dc * (c_prev - v[..., t, sl]) * st * omt
                dc = dc * st
            dc0[..., sl] = dc

        _run_lanes(lane, d, workers)
        return dg, dv, dc0

    return ScanOutput(apply("scan", (inp.gate_seq, inp.value_seq, inp.c0), forward, vjp))


def scan(inp: ScanInput, impl: ScanImpl = "optimized", workers: int = 1) -> ScanOutput:
    if impl == "naive":
        return scan_naive(inp)
    return scan_optimized(inp, workers=workers)


def combine_output(h2_seq: Tensor, c3_seq: Tensor, c4_seq: Tensor, mode: OutputGateMode = "gated_c4") -> Tensor:
    """`literal`: h4 = h2 ⊙ c3. `gated_c4`: h4 = σ(h2) ⊙ c4."""
    if not h2_seq.shape == c3_seq.shape == c4_seq.shape:
        raise DimensionError(f"combine: shapes {h2_seq.shape}, {c3_seq.shape}, {c4_seq.shape} differ")
    if mode == "literal":
        return mul(h2_seq, c3_seq)
    if mode == "gated_c4":
        return mul(sigmoid(h2_seq), c4_seq)
    raise ValueError(f"unknown output gate mode {mode!r}")
