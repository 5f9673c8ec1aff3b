from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional, Sequence

import numpy as np

from app.rcrn.data import PAD_ID, Batch, EmbeddingTable, Vocab, random_embeddings
from app.rcrn.encoder import EncodedSequence, EncoderParams, count_params, encode, init_encoder_params
from app.rcrn.errors import ContractError, DimensionError
from app.rcrn.head import HeadParams, Prediction, classify, cross_entropy, init_head_params, masked_pool
from app.rcrn.numerics import Parameter, Tensor, embed
from app.rcrn.schema import ModelConfig, RunConfig


@dataclass
class Model:
    """Embedding lookup, sequence encoder and pooled classification head."""

    config: ModelConfig
    embedding: EmbeddingTable
    encoder: EncoderParams
    head: HeadParams
    vocab: Vocab
    label_names: Sequence[str]

    def parameters(self) -> Dict[str, Parameter]:
        """Every parameter by name, in checkpoint order."""
        return {"embedding": self.embedding.table, **self.encoder.named("encoder"), **self.head.named("head")}

    def trainable(self) -> Dict[str, Parameter]:
        return {k: p for k, p in self.parameters().items() if p.requires_grad}

    def param_count(self) -> int:
        return int(sum(p.data.size for p in self.trainable().values()))

    def encode(self, ids: np.ndarray, mask: np.ndarray) -> EncodedSequence:
        x = embed(self.embedding.table, ids, pad_id=PAD_ID)
        return encode(self.config.encoder, self.encoder, x, mask)

    def forward(self, ids: np.ndarray, mask: np.ndarray) -> Prediction:
        return classify(self.head, masked_pool(self.encode(ids, mask)))

    def loss(self, batch: Batch) -> Tensor:
        return cross_entropy(self.forward(batch.ids, batch.mask), batch.labels)

    def predict(self, ids: np.ndarray, mask: np.ndarray) -> np.ndarray:
        # argmax keeps the first maximum, so ties go to the lower class id
        return np.argmax(self.forward(ids, mask).probs.data, axis=1)


def model_config(run: RunConfig, vocab_size: int, class_count: int, embed_dim: Optional[int] = None) -> ModelConfig:
    return ModelConfig(
        encoder=run.encoder_config(input_dim=embed_dim),
        vocab_size=vocab_size,
        class_count=class_count,
        head_hidden=run.head_hidden,
        precision=run.precision,
    )


def build_model(
    config: ModelConfig,
    vocab: Vocab,
    label_names: Sequence[str],
    embedding: Optional[EmbeddingTable] = None,
) -> Model:
    """Fresh parameters for `config`; all seeds derive from the encoder seed."""
    seed = config.encoder.seed
    if len(vocab) != config.vocab_size:
        raise ContractError(f"vocabulary has {len(vocab)} tokens, config expects {config.vocab_size}")
    if len(label_names) != config.class_count:
        raise ContractError(f"{len(label_names)} label names for {config.class_count} classes")
    if embedding is None:
        embedding = random_embeddings(config.vocab_size, config.embed_dim, [seed, 10], config.precision)
        if not config.embed_trainable:
            embedding = EmbeddingTable(
                table=Parameter(embedding.table.data, config.precision, name="embedding", trainable=False),
                trainable=False,
            )
    elif embedding.table.shape != (config.vocab_size, config.embed_dim):
        raise DimensionError(
            f"embedding table {embedding.table.shape} does not match {(config.vocab_size, config.embed_dim)}"
        )
    elif embedding.trainable != config.embed_trainable:
        config = config.model_copy(update={"embed_trainable": embedding.trainable})
    return Model(
        config=config,
        embedding=embedding,
        encoder=init_encoder_params(config.encoder, config.precision),
        head=init_head_params(config.feature_dim, config.head_hidden, config.class_count, [seed, 20], config.precision),
        vocab=vocab,
        label_names=tuple(label_names),
    )


def encoder_param_count(model: Model) -> int:
    return count_params(model.config.encoder)
