"""Encoder speed across sequence lengths.

Every (variant, length, phase) cell is timed as the median of `repeats` runs
after `warmup` untimed runs, on synthetic single-precision batches. Before a
length is timed, the optimized RCRN must reproduce the naive one bit for bit
and each baseline must reproduce its own forward pass.
"""

from __future__ import annotations

import csv
import io
import logging
import statistics
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Dict, List, Union

import numpy as np

from app.rcrn.data import Batch, Vocab
from app.rcrn.errors import NumericalError
from app.rcrn.model import Model, build_model
from app.rcrn.numerics import Graph, backward
from app.rcrn.schema import BenchSettings, EncoderConfig, ModelConfig

logger = logging.getLogger(__name__)

VARIANTS = ("bilstm", "3l-bilstm", "rcrn-naive-scan", "rcrn-optimized-scan")
PHASES = ("train", "inference")
CSV_HEADER = ("variant", "seq_len", "phase", "seconds", "workers")


@dataclass(frozen=True)
class BenchRow:
    variant: str
    seq_len: int
    phase: str
    seconds: float
    workers: int


@dataclass
class BenchReport:
    rows: List[BenchRow]

    def cell(self, variant: str, seq_len: int, phase: str) -> BenchRow:
        for row in self.rows:
            if (row.variant, row.seq_len, row.phase) == (variant, seq_len, phase):
                return row
        raise KeyError((variant, seq_len, phase))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for r in self.rows:
            writer.writerow([r.variant, r.seq_len, r.phase, f"{r.seconds:.6f}", r.workers])
        return buf.getvalue()

    def write(self, path: Union[str, Path]) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8")


def _encoder_config(variant: str, s: BenchSettings) -> EncoderConfig:
    kind = {"bilstm": "bilstm", "3l-bilstm": "stacked_bilstm"}.get(variant, "rcrn")
    return EncoderConfig(
        input_dim=s.dim,
        hidden_dim=s.dim,
        encoder_kind=kind,
        layers=3,
        scan_impl="naive" if variant == "rcrn-naive-scan" else "optimized",
        workers=s.workers,
        seed=s.seed,
    )


def build_variants(s: BenchSettings) -> Dict[str, Model]:
    """One model per variant; the two RCRN variants share every parameter."""
    vocab = Vocab([f"w{i}" for i in range(2, s.vocab_size)])
    models: Dict[str, Model] = {}
    for variant in ("bilstm", "3l-bilstm", "rcrn-optimized-scan"):
        config = ModelConfig(
            encoder=_encoder_config(variant, s),
            vocab_size=len(vocab),
            class_count=2,
            head_hidden=s.dim,
            precision="single",
        )
        models[variant] = build_model(config, vocab, ("0", "1"))
    fast = models["rcrn-optimized-scan"]
    naive_config = fast.config.model_copy(update={"encoder": _encoder_config("rcrn-naive-scan", s)})
    models["rcrn-naive-scan"] = replace(fast, config=naive_config)
    return {v: models[v] for v in VARIANTS}


def synthetic_batch(s: BenchSettings, seq_len: int) -> Batch:
    rng = np.random.default_rng([s.seed, seq_len])
    B = s.batch_size
    return Batch(
        ids=rng.integers(2, s.vocab_size, size=(B, seq_len)),
        mask=np.ones((B, seq_len), dtype=np.int64),
        labels=rng.integers(0, 2, size=B),
        lengths=np.full(B, seq_len, dtype=np.int64),
    )


def check_gate(models: Dict[str, Model], batch: Batch) -> None:
    naive = models["rcrn-naive-scan"].encode(batch.ids, batch.mask).states.data
    fast = models["rcrn-optimized-scan"].encode(batch.ids, batch.mask).states.data
    if not np.array_equal(naive, fast):
        worst = float(np.max(np.abs(naive - fast)))
        raise NumericalError(f"optimized scan deviates from naive scan by {worst:.3e} at T={batch.ids.shape[1]}")
    for variant in ("bilstm", "3l-bilstm"):
        m = models[variant]
        if not np.array_equal(m.encode(batch.ids, batch.mask).states.data, m.encode(batch.ids, batch.mask).states.data):
            raise NumericalError(f"{variant} forward pass is not reproducible at T={batch.ids.shape[1]}")


def median_seconds(fn: Callable[[], object], warmup: int, repeats: int) -> float:
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - start)
    return statistics.median(samples)


def _train_pass(model: Model, batch: Batch) -> None:
    with Graph() as graph:
        loss = model.loss(batch)
    backward(graph, loss, model.trainable())


def run_bench(s: BenchSettings) -> BenchReport:
    models = build_variants(s)
    rows: List[BenchRow] = []
    for seq_len in s.lengths:
        batch = synthetic_batch(s, seq_len)
        check_gate(models, batch)
        for variant, model in models.items():
            phases = {
                "train": lambda: _train_pass(model, batch),
                "inference": lambda: model.forward(batch.ids, batch.mask),
            }
            for phase in PHASES:
                seconds = median_seconds(phases[phase], s.warmup, s.repeats)
                rows.append(BenchRow(variant, seq_len, phase, seconds, s.workers))
                logger.info("bench %s T=%d %s: %.4fs", variant, seq_len, phase, seconds)
    return BenchReport(rows)
