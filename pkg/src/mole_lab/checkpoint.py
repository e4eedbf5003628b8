"""Parameter checkpoint format: a JSON manifest (id -> shape, frozen flag)
followed by concatenated little-endian float64 payloads, ordered by id.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .tensor import ParamStore

MAGIC = b"MOLECKPT"


def save_params(store: ParamStore, path) -> None:
    names = store.names()
    manifest = [
        {"id": n, "shape": list(store.value(n).shape), "frozen": store.is_frozen(n)}
        for n in names
    ]
    header = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for n in names:
            fh.write(np.ascontiguousarray(store.value(n), dtype="<f8").tobytes())


def load_params(store: ParamStore, path) -> None:
    """Load values into an already-built store; shapes must match."""
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: not a parameter checkpoint")
    (hlen,) = struct.unpack("<Q", raw[len(MAGIC) : len(MAGIC) + 8])
    off = len(MAGIC) + 8
    manifest = json.loads(raw[off : off + hlen].decode("utf-8"))
    off += hlen
    for entry in manifest:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f8", count=size, offset=off).reshape(shape)
        off += size * 8
        store.set(entry["id"], arr)
