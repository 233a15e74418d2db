"""Binary checkpoint (``OSCK``) and embedding (``OSEM``) files.

All integers are little-endian; tensor values are float32 little-endian.

Checkpoint::

    b"OSCK" | version u32 | meta_len u32 | meta (UTF-8 JSON, sorted keys)
    | n_tensors u32 | per tensor: name_len u16, name, ndim u8, dims u32*ndim, values

``meta`` holds ``backbone`` (the config) and ``provenance`` (mode, seed,
epochs_completed).

Embeddings::

    b"OSEM" | version u32 | count u32 | dim u32
    | per entry: id_len u16, id (UTF-8), category u8 (resin numeral), dim floats
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .backbone import BackboneConfig, BackboneParams
from .data import Category
from .evaluation import EmbeddingIndex
from .tensor import Parameter

CHECKPOINT_MAGIC = b"OSCK"
EMBEDDING_MAGIC = b"OSEM"
VERSION = 1


class FormatError(ValueError):
    """A file does not match the expected layout."""


@dataclass
class Checkpoint:
    params: BackboneParams
    mode: str
    seed: int
    epochs_completed: int


def _read(buf, n: int) -> bytes:
    data = buf.read(n)
    if len(data) != n:
        raise FormatError("file ended unexpectedly")
    return data


def _unpack(buf, fmt: str):
    return struct.unpack(fmt, _read(buf, struct.calcsize(fmt)))


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    meta = {
        "backbone": ckpt.params.config.to_dict(),
        "provenance": {"mode": ckpt.mode, "seed": ckpt.seed, "epochs_completed": ckpt.epochs_completed},
    }
    meta_raw = json.dumps(meta, sort_keys=True).encode()
    out = io.BytesIO()
    out.write(CHECKPOINT_MAGIC + struct.pack("<II", VERSION, len(meta_raw)) + meta_raw)
    out.write(struct.pack("<I", len(ckpt.params)))
    for p in ckpt.params:
        name = p.name.encode()
        out.write(struct.pack("<H", len(name)) + name + struct.pack("<B", p.data.ndim))
        out.write(struct.pack(f"<{p.data.ndim}I", *p.shape))
        out.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    return out.getvalue()


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    buf = io.BytesIO(Path(path).read_bytes())
    if _read(buf, 4) != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    version, meta_len = _unpack(buf, "<II")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    meta = json.loads(_read(buf, meta_len))
    (count,) = _unpack(buf, "<I")
    params = {}
    for _ in range(count):
        (name_len,) = _unpack(buf, "<H")
        name = _read(buf, name_len).decode()
        (ndim,) = _unpack(buf, "<B")
        shape = _unpack(buf, f"<{ndim}I") if ndim else ()
        n = int(np.prod(shape)) if shape else 1
        values = np.frombuffer(_read(buf, 4 * n), dtype="<f4").reshape(shape)
        params[name] = Parameter(values.astype(np.float32), name)
    if buf.read(1):
        raise FormatError(f"{path}: trailing bytes after the last tensor")
    prov = meta["provenance"]
    backbone = BackboneParams(BackboneConfig.from_dict(meta["backbone"]), params)
    return Checkpoint(backbone, prov["mode"], prov["seed"], prov["epochs_completed"])


def embedding_bytes(index: EmbeddingIndex) -> bytes:
    out = io.BytesIO()
    out.write(EMBEDDING_MAGIC + struct.pack("<III", VERSION, len(index), index.dim))
    for id_, cat, vec in zip(index.ids, index.categories, index.vectors):
        raw = id_.encode()
        out.write(struct.pack("<H", len(raw)) + raw + struct.pack("<B", int(cat)))
        out.write(np.ascontiguousarray(vec, dtype="<f4").tobytes())
    return out.getvalue()


def save_embeddings(path, index: EmbeddingIndex) -> None:
    Path(path).write_bytes(embedding_bytes(index))


def load_embeddings(path) -> EmbeddingIndex:
    buf = io.BytesIO(Path(path).read_bytes())
    if _read(buf, 4) != EMBEDDING_MAGIC:
        raise FormatError(f"{path}: not an embedding file (bad magic)")
    version, count, dim = _unpack(buf, "<III")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported embedding version {version}")
    ids, cats, vecs = [], [], np.empty((count, dim), dtype=np.float32)
    for i in range(count):
        (n,) = _unpack(buf, "<H")
        ids.append(_read(buf, n).decode())
        (code,) = _unpack(buf, "<B")
        try:
            cats.append(Category(code))
        except ValueError:
            raise FormatError(f"{path}: entry {i} has unknown resin code {code}") from None
        vecs[i] = np.frombuffer(_read(buf, 4 * dim), dtype="<f4")
    if buf.read(1):
        raise FormatError(f"{path}: trailing bytes after the last entry")
    return EmbeddingIndex(tuple(ids), tuple(cats), vecs)
