"""Adam, the training loop and evaluation."""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Tuple, Union

import numpy as np

from app.rcrn.checkpoint import save_checkpoint
from app.rcrn.data import Batch, Dataset, batch_pad
from app.rcrn.errors import DimensionError, InputError, NumericalError
from app.rcrn.model import Model
from app.rcrn.numerics import Graph, Parameter, Tensor, backward, scale
from app.rcrn.schema import TrainSettings

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
METRICS_HEADER = ("epoch", "train_loss", "dev_acc")


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def from_settings(cls, settings: TrainSettings) -> "AdamState":
        return cls(lr=settings.lr, beta1=settings.beta1, beta2=settings.beta2, eps=settings.adam_eps)


def adam_step(state: AdamState, params: Mapping[str, Parameter], grads: Mapping[str, Tensor]) -> AdamState:
    """One bias-corrected Adam update. Parameters are replaced in place."""
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise DimensionError(f"{name}: gradient {g.shape} does not match parameter {params[name].shape}")
        if not np.isfinite(g.data).all():
            bad = int(np.count_nonzero(~np.isfinite(g.data)))
            raise NumericalError(f"non-finite gradient for {name} ({bad} of {g.data.size} entries)")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name, np.zeros_like(p.data))
        v = state.v.get(name, np.zeros_like(p.data))
        m = b1 * m + (1.0 - b1) * g.data
        v = b2 * v + (1.0 - b2) * g.data * g.data
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        p.assign(p.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps))
        state.m[name], state.v[name] = m, v
    return state


def clip_global_norm(grads: Mapping[str, Tensor], max_norm: float) -> Tuple[Dict[str, Tensor], float]:
    norm = float(np.sqrt(sum(float(np.sum(g.data.astype(np.float64) ** 2)) for g in grads.values())))
    if norm <= max_norm:
        return dict(grads), norm
    factor = max_norm / norm
    return {k: Tensor._wrap(g.data * g.data.dtype.type(factor), False) for k, g in grads.items()}, norm


def _shard(batch: Batch, rows: np.ndarray) -> Batch:
    return Batch(ids=batch.ids[rows], mask=batch.mask[rows], labels=batch.labels[rows], lengths=batch.lengths[rows])


def _shard_gradients(model: Model, batch: Batch, weight: float) -> Tuple[float, Dict[str, Tensor]]:
    with Graph() as graph:
        loss = scale(model.loss(batch), weight)
    return loss.item(), backward(graph, loss, model.trainable())


def batch_gradients(model: Model, batch: Batch, workers: int = 1) -> Tuple[float, Dict[str, Tensor]]:
    """Mean loss over `batch` and its gradients.

    With several workers the batch is cut into contiguous shards whose losses
    are weighted by shard size; gradients are summed in shard order.
    """
    if workers <= 1 or len(batch) < 2:
        return _shard_gradients(model, batch, 1.0)
    shards = [rows for rows in np.array_split(np.arange(len(batch)), workers) if rows.size]
    with ThreadPoolExecutor(max_workers=len(shards), thread_name_prefix="rcrn-grad") as pool:
        futures = [pool.submit(_shard_gradients, model, _shard(batch, rows), rows.size / len(batch)) for rows in shards]
        results = [f.result() for f in futures]
    loss = 0.0
    total: Dict[str, np.ndarray] = {}
    for shard_loss, grads in results:
        loss += shard_loss
        for name, g in grads.items():
            total[name] = total[name] + g.data if name in total else np.array(g.data)
    return loss, {k: Tensor._wrap(v, False) for k, v in total.items()}


@dataclass(frozen=True)
class EpochMetrics:
    epoch: int
    train_loss: float
    dev_acc: float


@dataclass
class TrainResult:
    model: Model
    history: List[EpochMetrics]


def evaluate(model: Model, dataset: Dataset, batch_size: int = 64) -> float:
    """Argmax accuracy; ties resolve to the lower class id."""
    if dataset.class_count > model.config.class_count:
        raise InputError(f"dataset has {dataset.class_count} classes, model has {model.config.class_count}")
    if len(dataset) == 0:
        raise InputError("cannot evaluate on an empty dataset")
    correct = 0
    for batch in batch_pad(dataset, batch_size):
        correct += int(np.sum(model.predict(batch.ids, batch.mask) == batch.labels))
    return correct / len(dataset)


def write_metrics_csv(history: List[EpochMetrics], path: PathLike) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_HEADER)
        for row in history:
            writer.writerow([row.epoch, f"{row.train_loss:.6f}", f"{row.dev_acc:.4f}"])


def train_loop(
    model: Model,
    settings: TrainSettings,
    train: Dataset,
    dev: Dataset,
    checkpoint_path: Optional[PathLike] = None,
    metrics_path: Optional[PathLike] = None,
) -> TrainResult:
    """Minibatch Adam on cross entropy.

    Batch order is reshuffled each epoch from (seed, epoch). A checkpoint and
    the metrics CSV are rewritten after every completed epoch, so a run that
    diverges keeps the last good ones.
    """
    if train.class_count > model.config.class_count:
        raise InputError(f"training set has {train.class_count} classes, model has {model.config.class_count}")
    if len(train) == 0:
        raise InputError("training set is empty")
    params = model.trainable()
    state = AdamState.from_settings(settings)
    history: List[EpochMetrics] = []
    if metrics_path is not None:
        write_metrics_csv(history, metrics_path)
    for epoch in range(1, settings.epochs + 1):
        total = 0.0
        for batch in batch_pad(train, settings.batch_size, shuffle_seed=(settings.seed, epoch)):
            try:
                loss, grads = batch_gradients(model, batch, settings.workers)
            except NumericalError as exc:
                raise NumericalError(f"training diverged in epoch {epoch}: {exc}") from exc
            if not np.isfinite(loss):
                raise NumericalError(f"training diverged in epoch {epoch}: loss is {loss}")
            grads, norm = clip_global_norm(grads, settings.clip_norm)
            if norm > settings.clip_norm:
                logger.debug("clipped gradient norm %.3f to %.1f", norm, settings.clip_norm)
            adam_step(state, params, grads)
            total += loss * len(batch)
        metrics = EpochMetrics(epoch=epoch, train_loss=total / len(train), dev_acc=evaluate(model, dev))
        history.append(metrics)
        logger.info("epoch %d: train_loss=%.6f dev_acc=%.4f", epoch, metrics.train_loss, metrics.dev_acc)
        if checkpoint_path is not None:
            save_checkpoint(model, checkpoint_path)
        if metrics_path is not None:
            write_metrics_csv(history, metrics_path)
    return TrainResult(model=model, history=history)
