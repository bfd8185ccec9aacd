"""Checkpoint files: JSON manifest, a NUL byte, then raw parameter buffers.

The manifest is an ordered list of ``{"name", "shape", "dtype"}`` entries;
the buffers follow in manifest order as little-endian floats. Round-tripping
is bit-exact, which the determinism suite relies on.
"""

from __future__ import annotations

import json
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .tensor import Tensor

_DTYPES = {"f4": "<f4", "f8": "<f8"}


def _dtype_code(arr: np.ndarray) -> str:
    if arr.dtype == np.float32:
        return "f4"
    if arr.dtype == np.float64:
        return "f8"
    raise ValueError(f"unsupported checkpoint dtype {arr.dtype}")


def save_checkpoint(path, named_params) -> None:
    """Write ``{name: Tensor|ndarray}`` pairs to ``path`` in manifest order."""
    if hasattr(named_params, "items"):
        named_params = named_params.items()
    entries = []
    buffers = []
    for name, value in named_params:
        arr = value.data if isinstance(value, Tensor) else np.asarray(value)
        entries.append({"name": name, "shape": list(arr.shape), "dtype": _dtype_code(arr)})
        buffers.append(np.ascontiguousarray(arr, dtype=_DTYPES[_dtype_code(arr)]))
    manifest = json.dumps(entries).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(manifest)
        fh.write(b"\x00")
        for buf in buffers:
            fh.write(buf.tobytes())


def load_checkpoint(path) -> "OrderedDict[str, np.ndarray]":
    """Read a checkpoint back into an ordered name -> array mapping."""
    raw = Path(path).read_bytes()
    nul = raw.index(b"\x00")
    entries = json.loads(raw[:nul].decode("utf-8"))
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    offset = nul + 1
    for entry in entries:
        dtype = np.dtype(_DTYPES[entry["dtype"]])
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        nbytes = count * dtype.itemsize
        arr = np.frombuffer(raw[offset : offset + nbytes], dtype=dtype).reshape(entry["shape"])
        out[entry["name"]] = arr.copy()
        offset += nbytes
    if offset != len(raw):
        raise ValueError(f"checkpoint has {len(raw) - offset} trailing bytes")
    return out
