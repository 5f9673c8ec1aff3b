from __future__ import annotations

import logging
from pathlib import Path
from typing import Dict, Literal, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from app.rcrn.errors import ConfigError

logger = logging.getLogger(__name__)

LR_GRID: Tuple[float, ...] = (0.001, 0.0003, 0.0004)
BENCH_LENGTHS: Tuple[int, ...] = (16, 32, 64, 128, 256)

EncoderKind = Literal["rcrn", "bilstm", "stacked_bilstm"]
AtomName = Literal["lstm", "gru"]
GateMode = Literal["literal", "gated_c4"]
ScanImplName = Literal["naive", "optimized"]
PrecisionName = Literal["single", "double"]


class EncoderConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    input_dim: int = Field(..., ge=1)
    hidden_dim: int = Field(..., ge=1, description="Width d per direction.")
    atom: AtomName = "lstm"
    encoder_kind: EncoderKind = "rcrn"
    layers: int = Field(default=3, ge=1, description="Depth of stacked_bilstm; bilstm is always 1.")
    output_gate_mode: GateMode = "gated_c4"
    scan_impl: ScanImplName = "optimized"
    workers: int = Field(default=1, ge=1, description="Feature-lane workers for the optimized scan.")
    seed: int = Field(default=0, ge=0)

    @property
    def output_dim(self) -> int:
        return 2 * self.hidden_dim

    @property
    def depth(self) -> int:
        return 1 if self.encoder_kind == "bilstm" else self.layers


class ModelConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    encoder: EncoderConfig
    vocab_size: int = Field(..., ge=2, description="Including the pad (0) and unknown (1) ids.")
    class_count: int = Field(..., ge=1)
    head_hidden: int = Field(default=200, ge=1, description="Width of the dense ReLU layer.")
    precision: PrecisionName = "double"
    embed_trainable: bool = True

    @property
    def embed_dim(self) -> int:
        return self.encoder.input_dim

    @property
    def feature_dim(self) -> int:
        return 3 * self.encoder.output_dim


class TrainSettings(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    lr: float = Field(default=0.001, gt=0.0)
    batch_size: int = Field(default=32, ge=1)
    epochs: int = Field(default=10, ge=0)
    seed: int = Field(default=0, ge=0)
    workers: int = Field(default=1, ge=1, description="Gradient shards per batch.")
    clip_norm: float = Field(default=5.0, gt=0.0)
    beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    beta2: float = Field(default=0.999, ge=0.0, lt=1.0)
    adam_eps: float = Field(default=1e-8, gt=0.0)

    @field_validator("lr")
    @classmethod
    def _lr_on_grid(cls, v: float) -> float:
        if v not in LR_GRID:
            logger.warning("learning rate %g is outside the usual grid %s", v, LR_GRID)
        return v


class BenchSettings(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    lengths: Tuple[int, ...] = BENCH_LENGTHS
    batch_size: int = Field(default=32, ge=1)
    dim: int = Field(default=200, ge=1)
    warmup: int = Field(default=3, ge=3)
    repeats: int = Field(default=5, ge=5)
    workers: int = Field(default=1, ge=1)
    vocab_size: int = Field(default=1000, ge=4)
    seed: int = Field(default=0, ge=0)


def _split_ints(v):
    if isinstance(v, str):
        return tuple(int(p) for p in v.split(",") if p.strip())
    return v


class RunConfig(BaseModel):
    """Flat run configuration read from `key=value` text."""

    model_config = ConfigDict(extra="forbid")

    task: Literal["tsv", "first_token", "random_labels"] = "tsv"
    encoder_kind: EncoderKind = "rcrn"
    atom: AtomName = "lstm"
    hidden_dim: int = Field(default=32, ge=1)
    layers: int = Field(default=3, ge=1)
    output_gate_mode: GateMode = "gated_c4"
    scan_impl: ScanImplName = "optimized"
    precision: PrecisionName = "double"
    lr: float = Field(default=0.001, gt=0.0)
    batch_size: int = Field(default=32, ge=1)
    epochs: int = Field(default=10, ge=0)
    seed: int = Field(default=0, ge=0)
    workers: int = Field(default=1, ge=1)
    clip_norm: float = Field(default=5.0, gt=0.0)
    embed_dim: int = Field(default=32, ge=1)
    head_hidden: int = Field(default=200, ge=1)
    embed_path: Optional[str] = None
    train_path: Optional[str] = None
    dev_path: Optional[str] = None
    checkpoint_path: Optional[str] = None
    metrics_path: Optional[str] = None
    n_train: int = Field(default=2000, ge=1)
    n_test: int = Field(default=500, ge=1)
    seq_len: int = Field(default=32, ge=2)
    vocab_size: int = Field(default=8, ge=4)
    bench_lengths: Tuple[int, ...] = BENCH_LENGTHS
    bench_batch: int = Field(default=32, ge=1)
    bench_dim: int = Field(default=200, ge=1)
    bench_warmup: int = Field(default=3, ge=3)
    bench_repeats: int = Field(default=5, ge=5)

    @field_validator("bench_lengths", mode="before")
    @classmethod
    def _split_lengths(cls, v):
        return _split_ints(v)

    @model_validator(mode="after")
    def _bench_lengths_positive(self) -> "RunConfig":
        if not self.bench_lengths or any(n < 1 for n in self.bench_lengths):
            raise ValueError("bench_lengths must be a non-empty list of positive lengths")
        return self

    @model_validator(mode="after")
    def _first_token_vocab(self) -> "RunConfig":
        # ids 2 and 3 carry the label, distractors come from 4..vocab_size-1
        if self.task == "first_token" and self.vocab_size < 5:
            raise ValueError(f"first_token needs vocab_size >= 5, got {self.vocab_size}")
        return self

    def require(self, *keys: str) -> None:
        for key in keys:
            if getattr(self, key) is None:
                raise ConfigError(f"missing key: {key}")

    def encoder_config(self, input_dim: Optional[int] = None) -> EncoderConfig:
        return EncoderConfig(
            input_dim=input_dim or self.embed_dim,
            hidden_dim=self.hidden_dim,
            atom=self.atom,
            encoder_kind=self.encoder_kind,
            layers=self.layers,
            output_gate_mode=self.output_gate_mode,
            scan_impl=self.scan_impl,
            workers=self.workers,
            seed=self.seed,
        )

    def train_settings(self) -> TrainSettings:
        return TrainSettings(
            lr=self.lr,
            batch_size=self.batch_size,
            epochs=self.epochs,
            seed=self.seed,
            workers=self.workers,
            clip_norm=self.clip_norm,
        )

    def bench_settings(self) -> BenchSettings:
        return BenchSettings(
            lengths=self.bench_lengths,
            batch_size=self.bench_batch,
            dim=self.bench_dim,
            warmup=self.bench_warmup,
            repeats=self.bench_repeats,
            workers=self.workers,
            seed=self.seed,
        )


def parse_run_config(text: str) -> RunConfig:
    values: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in RunConfig.model_fields:
            raise ConfigError(f"unknown key: {key}")
        if key in values:
            raise ConfigError(f"duplicate key: {key}")
        if value:
            values[key] = value
    try:
        return RunConfig(**values)
    except ValidationError as exc:
        first = exc.errors()[0]
        where = ".".join(str(p) for p in first["loc"]) or "config"
        raise ConfigError(f"invalid value for {where}: {first['msg']}") from exc


def load_run_config(path: Union[str, Path]) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_run_config(text)


def format_run_config(cfg: RunConfig) -> str:
    lines = []
    for key in RunConfig.model_fields:
        value = getattr(cfg, key)
        if value is None:
            continue
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"
