from __future__ import annotations

import os
from functools import lru_cache
from typing import Dict, List

import numpy as np
from pydantic import BaseModel, Field

from app.rcrn.checkpoint import load_checkpoint
from app.rcrn.data import Example, pad_batch
from app.rcrn.errors import ConfigError, InputError
from app.rcrn.model import Model, encoder_param_count

CHECKPOINT_ENV = "RCRN_CHECKPOINT"


class ClassifyRequest(BaseModel):
    texts: List[str] = Field(..., min_length=1)


class Classification(BaseModel):
    label: str
    probs: Dict[str, float]


class ClassifyResponse(BaseModel):
    results: List[Classification]


class ModelSummary(BaseModel):
    encoder_kind: str
    atom: str
    hidden_dim: int
    output_gate_mode: str
    labels: List[str]
    vocab_size: int
    param_count: int
    encoder_param_count: int


@lru_cache(maxsize=1)
def served_model() -> Model:
    path = os.environ.get(CHECKPOINT_ENV)
    if not path:
        raise ConfigError(f"{CHECKPOINT_ENV} is not set")
    return load_checkpoint(path)


def summarize(model: Model) -> ModelSummary:
    enc = model.config.encoder
    return ModelSummary(
        encoder_kind=enc.encoder_kind,
        atom=enc.atom,
        hidden_dim=enc.hidden_dim,
        output_gate_mode=enc.output_gate_mode,
        labels=list(model.label_names),
        vocab_size=model.config.vocab_size,
        param_count=model.param_count(),
        encoder_param_count=encoder_param_count(model),
    )


def classify_texts(model: Model, texts: List[str]) -> ClassifyResponse:
    examples = []
    for i, text in enumerate(texts):
        tokens = text.split()
        if not tokens:
            raise InputError(f"text {i} is empty")
        examples.append(Example(label=0, ids=tuple(model.vocab.lookup(t) for t in tokens)))
    batch = pad_batch(examples)
    probs = model.forward(batch.ids, batch.mask).probs.data
    results = []
    for row in probs:
        results.append(
            Classification(
                label=model.label_names[int(np.argmax(row))],
                probs={name: float(p) for name, p in zip(model.label_names, row)},
            )
        )
    return ClassifyResponse(results=results)
