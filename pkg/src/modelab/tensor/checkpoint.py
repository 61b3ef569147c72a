"""Binary checkpoint container.

Layout (all integers little-endian)::

    magic        8 bytes   b"MODECKPT"
    version      u32       1
    header_len   u64
    header       header_len bytes of UTF-8 JSON
                 {"config": ..., "config_hash": ..., "rng_state": ..., "meta": ...,
                  "entries": [{"name", "dtype", "shape", "offset", "nbytes"}, ...]}
    payload      concatenated raw little-endian arrays, in entry order

``dtype`` is ``"<f4"`` or ``"<f8"``; ``offset`` is relative to the payload
start. Entries are written in sorted name order and the JSON is
canonical (sorted keys, no whitespace), so identical content gives
identical bytes.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

MAGIC = b"MODECKPT"
VERSION = 1
_DTYPES = {"<f4": np.dtype("<f4"), "<f8": np.dtype("<f8")}


class CheckpointError(IOError):
    """Malformed or incompatible checkpoint file."""


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    config: dict[str, Any] = field(default_factory=dict)
    config_hash: str = ""
    rng_state: Any = None
    meta: dict[str, Any] = field(default_factory=dict)


def _dtype_tag(a: np.ndarray) -> str:
    if a.dtype == np.float32:
        return "<f4"
    if a.dtype == np.float64:
        return "<f8"
    raise CheckpointError(f"unsupported dtype {a.dtype}")


def to_bytes(ckpt: Checkpoint) -> bytes:
    entries, chunks, off = [], [], 0
    for name in sorted(ckpt.params):
        a = np.asarray(ckpt.params[name])
        tag = _dtype_tag(a)
        raw = np.ascontiguousarray(a, dtype=_DTYPES[tag]).tobytes()
        entries.append({"name": name, "dtype": tag, "shape": list(a.shape),
                        "offset": off, "nbytes": len(raw)})
        chunks.append(raw)
        off += len(raw)
    header = {"config": ckpt.config, "config_hash": ckpt.config_hash,
              "rng_state": ckpt.rng_state, "meta": ckpt.meta, "entries": entries}
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return b"".join([MAGIC, struct.pack("<IQ", VERSION, len(hb)), hb, *chunks])


def from_bytes(buf: bytes) -> Checkpoint:
    if buf[:8] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<IQ", buf, 8)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    start = 8 + 12
    header = json.loads(buf[start:start + hlen])
    base = start + hlen
    params = {}
    for e in header["entries"]:
        lo = base + e["offset"]
        raw = buf[lo:lo + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise CheckpointError(f"truncated entry {e['name']}")
        arr = np.frombuffer(raw, dtype=_DTYPES[e["dtype"]]).reshape(e["shape"])
        params[e["name"]] = arr.astype(arr.dtype.newbyteorder("="), copy=True)
    return Checkpoint(params, header["config"], header["config_hash"], header["rng_state"],
                      header["meta"])


def save(path: str | Path, ckpt: Checkpoint) -> str:
    """Write ``ckpt`` and return the sha256 of the file contents."""
    data = to_bytes(ckpt)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load(path: str | Path) -> Checkpoint:
    p = Path(path)
    if not p.is_file():
        raise CheckpointError(f"checkpoint not found: {p}")
    return from_bytes(p.read_bytes())


def params_hash(params: dict[str, np.ndarray]) -> str:
    """sha256 over names, dtypes, shapes and raw bytes; order-independent."""
    h = hashlib.sha256()
    for name in sorted(params):
        a = np.ascontiguousarray(params[name])
        h.update(name.encode())
        h.update(str(a.dtype).encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()
