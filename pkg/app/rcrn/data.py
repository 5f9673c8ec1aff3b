"""Corpus ingestion, vocabularies, embeddings, batching and synthetic tasks.

TSV format: one example per line, `label<TAB>space-tokenized text`, UTF-8.
Word-vector format: one vector per line, `token v1 v2 ... vE`.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from app.rcrn.cells import glorot_bound
from app.rcrn.errors import FormatError, InputError
from app.rcrn.numerics import Parameter, Precision

logger = logging.getLogger(__name__)

PAD_ID = 0
UNK_ID = 1
PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"

PathLike = Union[str, Path]


class Vocab:
    """Dense token ids; 0 is padding and 1 is the unknown token.

    The reserved ids are never reachable from text: a corpus token spelled
    `<pad>` or `<unk>` gets an ordinary id of its own.
    """

    def __init__(self, tokens: Sequence[str] = ()):
        self.tokens: List[str] = [PAD_TOKEN, UNK_TOKEN]
        self.ids: Dict[str, int] = {}
        self.frozen = False
        for tok in tokens:
            self.add(tok)

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocab) and self.tokens == other.tokens

    def add(self, token: str) -> int:
        if token in self.ids:
            return self.ids[token]
        if self.frozen:
            return UNK_ID
        self.ids[token] = len(self.tokens)
        self.tokens.append(token)
        return self.ids[token]

    def freeze(self) -> "Vocab":
        self.frozen = True
        return self

    def lookup(self, token: str) -> int:
        return self.ids.get(token, UNK_ID)

    def encode(self, tokens: Sequence[str]) -> Tuple[int, ...]:
        return tuple(self.add(t) for t in tokens)

    @classmethod
    def from_tokens(cls, tokens: Sequence[str]) -> "Vocab":
        """Rebuild a vocabulary from its full token list (pad and unknown first)."""
        if list(tokens[:2]) != [PAD_TOKEN, UNK_TOKEN]:
            raise FormatError("vocabulary must start with the pad and unknown tokens")
        vocab = cls(tokens[2:]).freeze()
        if len(vocab) != len(tokens):
            raise FormatError("vocabulary lists a token more than once")
        return vocab


@dataclass(frozen=True)
class Example:
    label: int
    ids: Tuple[int, ...]


@dataclass(frozen=True)
class Dataset:
    examples: Tuple[Example, ...]
    label_names: Tuple[str, ...]
    vocab: Vocab = field(compare=False)

    def __post_init__(self) -> None:
        for i, ex in enumerate(self.examples):
            if not ex.ids:
                raise InputError(f"example {i} has no tokens")
            if not 0 <= ex.label < len(self.label_names):
                raise InputError(f"example {i} has label {ex.label} outside [0, {len(self.label_names)})")

    def __len__(self) -> int:
        return len(self.examples)

    @property
    def class_count(self) -> int:
        return len(self.label_names)

    @property
    def max_length(self) -> int:
        return max((len(ex.ids) for ex in self.examples), default=0)


@dataclass(frozen=True)
class EmbeddingTable:
    table: Parameter  # V×E; row 0 stays zero
    trainable: bool

    @property
    def dim(self) -> int:
        return self.table.shape[1]


@dataclass(frozen=True)
class Batch:
    ids: np.ndarray  # B×T int
    mask: np.ndarray  # B×T {0,1}
    labels: np.ndarray  # B
    lengths: np.ndarray  # B

    def __len__(self) -> int:
        return int(self.ids.shape[0])


def load_tsv(path: PathLike, vocab: Optional[Vocab] = None, label_names: Optional[Sequence[str]] = None) -> Dataset:
    """Parse a TSV corpus.

    Without `vocab` a fresh vocabulary grows from the file; a frozen `vocab`
    maps unseen tokens to the unknown id. Without `label_names` labels get
    dense ids in order of first appearance; with it, unlisted labels are an error.
    """
    vocab = vocab if vocab is not None else Vocab()
    names: List[str] = list(label_names) if label_names is not None else []
    fixed_labels = label_names is not None
    examples: List[Example] = []
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except UnicodeDecodeError as exc:
        raise FormatError(f"{path}: not valid UTF-8 ({exc})") from exc
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        if "\t" not in line:
            raise FormatError(f"{path}:{lineno}: expected label<TAB>text")
        label, text = line.split("\t", 1)
        tokens = text.split()
        if not label:
            raise FormatError(f"{path}:{lineno}: empty label")
        if not tokens:
            raise FormatError(f"{path}:{lineno}: empty text")
        if label not in names:
            if fixed_labels:
                raise InputError(f"{path}:{lineno}: unknown label {label!r}")
            names.append(label)
        examples.append(Example(label=names.index(label), ids=vocab.encode(tokens)))
    logger.info("loaded %d examples, %d classes from %s", len(examples), len(names), path)
    return Dataset(examples=tuple(examples), label_names=tuple(names), vocab=vocab)


def write_tsv(dataset: Dataset, path: PathLike) -> None:
    lines = []
    for ex in dataset.examples:
        text = " ".join(dataset.vocab.tokens[i] for i in ex.ids)
        lines.append(f"{dataset.label_names[ex.label]}\t{text}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def random_embeddings(vocab_size: int, dim: int, seed, precision: Precision = "double") -> EmbeddingTable:
    rng = np.random.default_rng(seed)
    bound = glorot_bound(vocab_size, dim)
    table = rng.uniform(-bound, bound, size=(vocab_size, dim))
    table[PAD_ID] = 0.0
    return EmbeddingTable(table=Parameter(table, precision, name="embedding"), trainable=True)


def load_word_vectors(path: PathLike, vocab: Vocab, seed: int = 0, precision: Precision = "double") -> EmbeddingTable:
    """Fill a frozen table from a word-vector text file; missing tokens stay random."""
    vectors: Dict[str, np.ndarray] = {}
    dim: Optional[int] = None
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except UnicodeDecodeError as exc:
        raise FormatError(f"{path}: not valid UTF-8 ({exc})") from exc
    for lineno, line in enumerate(lines, start=1):
        parts = line.split(" ")
        if len(parts) < 2 or not parts[0]:
            raise FormatError(f"{path}:{lineno}: expected `token v1 ... vE`")
        if dim is None:
            dim = len(parts) - 1
        elif len(parts) - 1 != dim:
            raise FormatError(f"{path}:{lineno}: vector has {len(parts) - 1} values, expected {dim}")
        try:
            vectors[parts[0]] = np.array([float(v) for v in parts[1:]])
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from exc
    if dim is None:
        raise FormatError(f"{path}: no vectors")
    base = random_embeddings(len(vocab), dim, seed, "double").table.data
    table = np.array(base)
    hits = 0
    for tok, idx in vocab.ids.items():
        if idx != PAD_ID and tok in vectors:
            table[idx] = vectors[tok]
            hits += 1
    table[PAD_ID] = 0.0
    logger.info("word vectors: %d/%d vocabulary tokens found in %s", hits, len(vocab) - 1, path)
    return EmbeddingTable(table=Parameter(table, precision, name="embedding", trainable=False), trainable=False)


def pad_batch(examples: Sequence[Example]) -> Batch:
    lengths = np.array([len(ex.ids) for ex in examples], dtype=np.int64)
    T = int(lengths.max())
    ids = np.full((len(examples), T), PAD_ID, dtype=np.int64)
    for b, ex in enumerate(examples):
        ids[b, : len(ex.ids)] = ex.ids
    mask = (np.arange(T)[None, :] < lengths[:, None]).astype(np.int64)
    labels = np.array([ex.label for ex in examples], dtype=np.int64)
    return Batch(ids=ids, mask=mask, labels=labels, lengths=lengths)


def batch_pad(dataset: Dataset, batch_size: int, shuffle_seed: Union[int, Sequence[int], None] = None) -> Iterator[Batch]:
    """Yield padded batches; `shuffle_seed=None` keeps the dataset order."""
    if batch_size < 1:
        raise InputError(f"batch_size must be >= 1, got {batch_size}")
    order = np.arange(len(dataset))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(dataset))
    for start in range(0, len(order), batch_size):
        yield pad_batch([dataset.examples[i] for i in order[start : start + batch_size]])


def _synthetic_vocab(vocab_size: int) -> Vocab:
    return Vocab(["A", "B"] + [f"w{i}" for i in range(4, vocab_size)]).freeze()


def gen_first_token_task(n_train: int, n_test: int, T: int, vocab_size: int, seed: int) -> Tuple[Dataset, Dataset]:
    """Label is decided by the first token (2 → class 0, 3 → class 1); the rest is noise."""
    if vocab_size < 5 or T < 2:
        raise InputError(f"first-token task needs vocab_size >= 5 and T >= 2, got {vocab_size}, {T}")
    vocab = _synthetic_vocab(vocab_size)
    train_seq, test_seq = np.random.SeedSequence(seed).spawn(2)

    def draw(n: int, ss: np.random.SeedSequence) -> Dataset:
        rng = np.random.default_rng(ss)
        heads = rng.integers(2, 4, size=n)
        tails = rng.integers(4, vocab_size, size=(n, T - 1))
        examples = tuple(
            Example(label=int(h - 2), ids=(int(h),) + tuple(int(t) for t in tail)) for h, tail in zip(heads, tails)
        )
        return Dataset(examples=examples, label_names=("0", "1"), vocab=vocab)

    return draw(n_train, train_seq), draw(n_test, test_seq)


def gen_random_label_task(n: int, T: int, vocab_size: int, seed: int) -> Dataset:
    """Uniform random tokens with uniform random binary labels for memorization runs."""
    if vocab_size < 4 or T < 1:
        raise InputError(f"random-label task needs vocab_size >= 4 and T >= 1, got {vocab_size}, {T}")
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, size=n)
    ids = rng.integers(2, vocab_size, size=(n, T))
    examples = tuple(Example(label=int(y), ids=tuple(int(t) for t in row)) for y, row in zip(labels, ids))
    return Dataset(examples=examples, label_names=("0", "1"), vocab=_synthetic_vocab(vocab_size))
