"""Finite-difference verification of every differentiable component.

Each suite is a scalar loss closure plus the parameters it depends on. The
analytic gradient comes from one recorded pass; every coordinate is then
compared against a central difference. Components are reduced to a scalar as
sum(out ⊙ R) with a fixed random R.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional

import numpy as np

from app.rcrn.cells import ControllerState, controller_step, gru_step, init_controller_params, init_params, lstm_step
from app.rcrn.data import Batch, Example, Vocab, pad_batch
from app.rcrn.encoder import bidirectional_encode
from app.rcrn.errors import ConfigError
from app.rcrn.model import build_model, model_config
from app.rcrn.numerics import Graph, Parameter, Tensor, add, apply_mask, backward, constant, finite_diff_check, mul, sum_all, zeros
from app.rcrn.scan import ScanInput, combine_output, scan
from app.rcrn.schema import RunConfig

logger = logging.getLogger(__name__)

TOLERANCE = 1e-4
EPS = 1e-5
FAULT = 0.1

SMALL_INPUT = 3
SMALL_HIDDEN = 4
SMALL_STEPS = 4
SMALL_BATCH = 2
SMALL_VOCAB = 7


@dataclass(frozen=True)
class Suite:
    name: str
    loss: Callable[[], Tensor]
    params: Dict[str, Parameter]


@dataclass(frozen=True)
class GroupResult:
    group: str
    max_rel_err: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= TOLERANCE


@dataclass
class GradcheckReport:
    results: List[GroupResult]

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    @property
    def failures(self) -> List[GroupResult]:
        return [r for r in self.results if not r.passed]

    def lines(self) -> List[str]:
        return [f"{r.group}\t{r.max_rel_err:.3e}\t{'ok' if r.passed else 'FAIL'}" for r in self.results]


def _weighted(rng: np.random.Generator, *outs: Tensor) -> Tensor:
    total = None
    for out in outs:
        term = sum_all(mul(out, constant(rng.standard_normal(out.shape))))
        total = term if total is None else add(total, term)
    return total


def _leaf(rng: np.random.Generator, shape, name: str) -> Parameter:
    return Parameter(rng.standard_normal(shape), "double", name=name)


def _prefix_mask(lengths) -> np.ndarray:
    return (np.arange(max(lengths))[None, :] < np.asarray(lengths)[:, None]).astype(np.int64)


def _cell_suite(atom: str, seed: int) -> Suite:
    rng = np.random.default_rng([seed, 1 if atom == "lstm" else 2])
    D, d, B = SMALL_INPUT, SMALL_HIDDEN, SMALL_BATCH
    p = init_params(atom, D, d, [seed, 11], prefix=f"{atom}_cell")
    x = constant(rng.standard_normal((B, D)))
    h0 = constant(rng.standard_normal((B, d)))
    c0 = constant(rng.standard_normal((B, d)))

    def loss() -> Tensor:
        r = np.random.default_rng([seed, 12])
        if atom == "lstm":
            return _weighted(r, *lstm_step(p, x, h0, c0))
        return _weighted(r, gru_step(p, x, h0))

    return Suite(f"{atom}_cell", loss, p.named(f"{atom}_cell"))


def _controller_suite(atom: str, seed: int) -> Suite:
    rng = np.random.default_rng([seed, 3])
    D, d, B = SMALL_INPUT, SMALL_HIDDEN, SMALL_BATCH
    p = init_controller_params(atom, D, d, [seed, 13], prefix="controller")
    x = constant(rng.standard_normal((B, D)))
    h = [constant(rng.standard_normal((B, d))) for _ in range(4)]
    prev = ControllerState(h1=h[0], h2=h[1], c1=h[2], c2=h[3]) if atom == "lstm" else ControllerState(h1=h[0], h2=h[1])

    def loss() -> Tensor:
        st = controller_step(p, x, prev)
        outs = [st.h1, st.h2] + ([st.c1, st.c2] if atom == "lstm" else [])
        return _weighted(np.random.default_rng([seed, 14]), *outs)

    return Suite("controller", loss, p.named("controller"))


def _listener_suite(atom: str, mode: str, seed: int) -> Suite:
    """Base recurrence over the sequence, then scan and combine, with h1 and h2 as leaf inputs."""
    rng = np.random.default_rng([seed, 4])
    D, d, B, T = SMALL_INPUT, SMALL_HIDDEN, SMALL_BATCH, SMALL_STEPS
    fwd = init_params(atom, D, d, [seed, 15], prefix="listener.fwd")
    bwd = init_params(atom, D, d, [seed, 16], prefix="listener.bwd")
    h1 = _leaf(rng, (B, T, 2 * d), "listener.h1")
    h2 = _leaf(rng, (B, T, 2 * d), "listener.h2")
    x = constant(rng.standard_normal((B, T, D)))
    mask = _prefix_mask([T, T - 1])

    def loss() -> Tensor:
        lis = bidirectional_encode(atom, fwd, bwd, x, mask)
        h3 = lis["h"]
        c4 = scan(ScanInput(h1, h3, zeros((B, 2 * d))), impl="naive").c4_seq
        h4 = combine_output(h2, lis.get("c", h3), c4, mode)
        return _weighted(np.random.default_rng([seed, 17]), apply_mask(h4, mask))

    params = {**fwd.named("listener.fwd"), **bwd.named("listener.bwd"), "listener.h1": h1, "listener.h2": h2}
    return Suite("listener", loss, params)


def _scan_suite(impl: str, seed: int) -> Suite:
    rng = np.random.default_rng([seed, 5])
    B, T, d = SMALL_BATCH, SMALL_STEPS, SMALL_HIDDEN
    g, v, c0 = _leaf(rng, (B, T, d), "g"), _leaf(rng, (B, T, d), "v"), _leaf(rng, (B, d), "c0")

    def loss() -> Tensor:
        out = scan(ScanInput(g, v, c0), impl=impl, workers=2).c4_seq
        return _weighted(np.random.default_rng([seed, 18]), out)

    return Suite(f"scan_{impl}", loss, {"g": g, "v": v, "c0": c0})


def _combine_suite(mode: str, seed: int) -> Suite:
    rng = np.random.default_rng([seed, 6])
    shape = (SMALL_BATCH, SMALL_STEPS, SMALL_HIDDEN)
    h2, c3, c4 = _leaf(rng, shape, "h2"), _leaf(rng, shape, "c3"), _leaf(rng, shape, "c4")

    def loss() -> Tensor:
        return _weighted(np.random.default_rng([seed, 19]), combine_output(h2, c3, c4, mode))

    return Suite(f"combine_{mode}", loss, {"h2": h2, "c3": c3, "c4": c4})


def _model_suite(run: RunConfig) -> Suite:
    small = run.model_copy(
        update={
            "hidden_dim": min(run.hidden_dim, SMALL_HIDDEN),
            "embed_dim": SMALL_INPUT,
            "head_hidden": min(run.head_hidden, 5),
            "layers": min(run.layers, 3),
            "precision": "double",
            "workers": 1,
        }
    )
    vocab = Vocab([f"t{i}" for i in range(2, SMALL_VOCAB)])
    model = build_model(model_config(small, len(vocab), 2), vocab, ("0", "1"))
    rng = np.random.default_rng([run.seed, 7])
    lengths = [SMALL_STEPS, SMALL_STEPS - 1]
    batch: Batch = pad_batch(
        [Example(label=i % 2, ids=tuple(int(t) for t in rng.integers(2, SMALL_VOCAB, size=n))) for i, n in enumerate(lengths)]
    )
    return Suite("model", lambda: model.loss(batch), model.trainable())


def build_suites(run: RunConfig) -> List[Suite]:
    seed = run.seed
    return [
        _cell_suite("lstm", seed),
        _cell_suite("gru", seed),
        _controller_suite(run.atom, seed),
        _listener_suite(run.atom, run.output_gate_mode, seed),
        _scan_suite("naive", seed),
        _scan_suite("optimized", seed),
        _combine_suite("literal", seed),
        _combine_suite("gated_c4", seed),
        _model_suite(run),
    ]


def check_suite(suite: Suite, inject_fault: Optional[str] = None) -> List[GroupResult]:
    with Graph() as graph:
        loss = suite.loss()
    grads = backward(graph, loss, suite.params)
    results = []
    for name, p in suite.params.items():
        group = f"{suite.name}/{name}"
        analytic = np.array(grads[name].data)
        if group == inject_fault:
            analytic += FAULT
        err = finite_diff_check(suite.loss, p, eps=EPS, analytic=analytic)
        results.append(GroupResult(group, err))
        logger.info("gradcheck %s: max relative error %.3e", group, err)
    return results


def run_gradcheck(run: RunConfig, inject_fault: Optional[str] = None) -> GradcheckReport:
    suites = build_suites(run)
    if inject_fault is not None:
        known = {f"{s.name}/{n}" for s in suites for n in s.params}
        if inject_fault not in known:
            raise ConfigError(f"unknown gradcheck group: {inject_fault}")
    results: List[GroupResult] = []
    for suite in suites:
        results.extend(check_suite(suite, inject_fault))
    return GradcheckReport(results)
