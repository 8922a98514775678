"""Binary checkpoint format.

Layout (all integers little-endian uint32)::

    b"GGPFNCKP" | version | meta_len | meta (UTF-8 JSON: config, Adam step
    counts, caller metadata) | n_records | records...

    record: name_len | name | rank | extents[rank] | float32 LE data

Each parameter ``name`` is written as ``p/name``, with its Adam moments as
``m/name`` and ``v/name``.
"""
from __future__ import annotations

import json
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .config import GgpfnConfig
from .errors import ParseError
from .model import ParamStore
from .tensor import Tensor

MAGIC = b"GGPFNCKP"
VERSION = 1
_U32 = struct.Struct("<I")


class CheckpointVersionError(ParseError):
    pass


def _records(store: ParamStore):
    for prefix, source in (("p", {k: t.data for k, t in store.items()}), ("m", store.m), ("v", store.v)):
        for name, arr in source.items():
            yield f"{prefix}/{name}", arr


def dumps(store: ParamStore, meta: dict | None = None) -> bytes:
    if store.dtype != np.float32:
        raise ValueError(f"checkpoints hold float32 tensors; store is {store.dtype}")
    header = {
        "config": store.config.to_dict() if store.config is not None else None,
        "adam_t": dict(store.t),
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    parts = [MAGIC, _U32.pack(VERSION), _U32.pack(len(blob)), blob]
    records = list(_records(store))
    parts.append(_U32.pack(len(records)))
    for name, arr in records:
        nb = name.encode()
        parts += [_U32.pack(len(nb)), nb, _U32.pack(arr.ndim)]
        parts += [_U32.pack(n) for n in arr.shape]
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise ParseError("checkpoint truncated")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]


def loads(blob: bytes):
    """Parse a checkpoint; returns ``(store, meta)``."""
    r = _Reader(blob)
    if r.take(len(MAGIC)) != MAGIC:
        raise ParseError("not a checkpoint file (bad magic)")
    version = r.u32()
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint format version {version} is not supported (expected {VERSION})")
    try:
        header = json.loads(r.take(r.u32()).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"checkpoint header is corrupt: {exc}") from None
    arrays = OrderedDict()
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode()
        shape = tuple(r.u32() for _ in range(r.u32()))
        n = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
    if r.pos != len(blob):
        raise ParseError("trailing bytes after checkpoint records")

    config = GgpfnConfig.from_dict(header["config"]) if header.get("config") else None
    names = [k[2:] for k in arrays if k.startswith("p/")]
    tensors = OrderedDict((k, Tensor(arrays[f"p/{k}"], requires_grad=True, name=k)) for k in names)
    store = ParamStore(tensors, config)
    try:
        for k in names:
            store.m[k] = arrays[f"m/{k}"]
            store.v[k] = arrays[f"v/{k}"]
            store.t[k] = int(header["adam_t"][k])
    except KeyError as exc:
        raise ParseError(f"checkpoint missing record {exc}") from None
    return store, header.get("meta", {})


def save_checkpoint(store: ParamStore, path, meta: dict | None = None) -> None:
    Path(path).write_bytes(dumps(store, meta))


def load_checkpoint(path):
    return loads(Path(path).read_bytes())


def checkpoint_roundtrip(store: ParamStore, path) -> ParamStore:
    save_checkpoint(store, path)
    return load_checkpoint(path)[0]
