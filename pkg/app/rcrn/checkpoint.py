"""Checkpoint byte format.

    header   b"RCRN" | version u32 | entry count u32
    entry    name length u16 | UTF-8 name | rank u8 | rank × extent u64 | payload

All integers are little-endian. Parameter payloads are row-major float32. The
first entry, named "config", is rank 1 and carries UTF-8 JSON (model config,
vocabulary, label names); its extent is the byte length.
"""

from __future__ import annotations

import json
import logging
import math
import os
import struct
from pathlib import Path
from typing import Dict, List, Tuple, Union

import numpy as np

from app.rcrn.data import Vocab
from app.rcrn.errors import ContractError, DimensionError, FormatError
from app.rcrn.model import Model, build_model
from app.rcrn.schema import ModelConfig

logger = logging.getLogger(__name__)

MAGIC = b"RCRN"
VERSION = 1
CONFIG_ENTRY = "config"

_HEADER = struct.Struct("<4sII")
_NAME_LEN = struct.Struct("<H")
_RANK = struct.Struct("<B")
_EXTENT = struct.Struct("<Q")

PathLike = Union[str, Path]


def _entry(name: str, shape: Tuple[int, ...], payload: bytes) -> bytes:
    raw = name.encode("utf-8")
    parts = [_NAME_LEN.pack(len(raw)), raw, _RANK.pack(len(shape))]
    parts.extend(_EXTENT.pack(n) for n in shape)
    parts.append(payload)
    return b"".join(parts)


def encode_checkpoint(model: Model) -> bytes:
    meta = {
        "model": model.config.model_dump(),
        "vocab": list(model.vocab.tokens),
        "labels": list(model.label_names),
    }
    text = json.dumps(meta, sort_keys=True).encode("utf-8")
    params = model.parameters()
    blobs = [_entry(CONFIG_ENTRY, (len(text),), text)]
    for name, p in params.items():
        data = np.ascontiguousarray(p.data, dtype="<f4")
        blobs.append(_entry(name, p.shape, data.tobytes()))
    return _HEADER.pack(MAGIC, VERSION, len(blobs)) + b"".join(blobs)


def save_checkpoint(model: Model, path: PathLike) -> None:
    """Write atomically: the previous checkpoint survives a failed write."""
    path = Path(path)
    blob = encode_checkpoint(model)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)
    logger.debug("wrote checkpoint %s (%d bytes)", path, len(blob))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if n < 0 or n > len(self.blob) - self.pos:
            raise FormatError(f"checkpoint truncated while reading {what} at byte {self.pos}")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: struct.Struct, what: str):
        return fmt.unpack(self.take(fmt.size, what))


def decode_entries(blob: bytes) -> List[Tuple[str, Tuple[int, ...], bytes]]:
    r = _Reader(blob)
    magic, version, count = r.unpack(_HEADER, "header")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    entries = []
    for i in range(count):
        (name_len,) = r.unpack(_NAME_LEN, f"entry {i} name length")
        try:
            name = r.take(name_len, f"entry {i} name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"entry {i} name is not UTF-8") from exc
        (rank,) = r.unpack(_RANK, f"{name} rank")
        shape = tuple(r.unpack(_EXTENT, f"{name} extent")[0] for _ in range(rank))
        if name == CONFIG_ENTRY and i == 0:
            if rank != 1:
                raise FormatError(f"config entry must be rank 1, got rank {rank}")
            size = shape[0]
        else:
            size = 4 * math.prod(shape)
        entries.append((name, shape, r.take(size, f"{name} payload")))
    if r.pos != len(blob):
        raise FormatError(f"{len(blob) - r.pos} trailing bytes after {count} entries")
    return entries


def decode_checkpoint(blob: bytes) -> Model:
    entries = decode_entries(blob)
    if not entries or entries[0][0] != CONFIG_ENTRY or len(entries[0][1]) != 1:
        raise FormatError("checkpoint does not start with a config entry")
    try:
        meta = json.loads(entries[0][2].decode("utf-8"))
        config = ModelConfig.model_validate(meta["model"])
        vocab = Vocab.from_tokens(meta["vocab"])
        labels = tuple(meta["labels"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"unreadable checkpoint config: {exc}") from exc
    try:
        model = build_model(config, vocab, labels)
    except (ContractError, DimensionError) as exc:
        raise FormatError(f"inconsistent checkpoint config: {exc}") from exc
    params = model.parameters()
    values: Dict[str, np.ndarray] = {}
    for name, shape, payload in entries[1:]:
        if name not in params:
            raise FormatError(f"unexpected parameter {name!r}")
        if name in values:
            raise FormatError(f"duplicate parameter {name!r}")
        if shape != params[name].shape:
            raise FormatError(f"{name}: stored shape {shape} does not match {params[name].shape}")
        values[name] = np.frombuffer(payload, dtype="<f4").reshape(shape)
    missing = [n for n in params if n not in values]
    if missing:
        raise FormatError(f"checkpoint lacks parameters: {', '.join(missing)}")
    for name, p in params.items():
        p.assign(values[name])
    return model


def load_checkpoint(path: PathLike) -> Model:
    blob = Path(path).read_bytes()
    model = decode_checkpoint(blob)
    logger.debug("loaded checkpoint %s (%d parameters)", path, len(model.parameters()))
    return model
