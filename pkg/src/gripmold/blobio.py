"""Shared on-disk array container: one JSON header line, then raw blobs.

Arrays are stored little-endian in the dtype declared by the header, in
manifest order. Writes are deterministic, so identical inputs produce
byte-identical files.
"""

from __future__ import annotations

import json

import numpy as np

from .errors import ContractError


def write_blobs(path, arrays: dict[str, np.ndarray], dtype: str = "<f4") -> None:
    manifest = [
        {"name": name, "dtype": dtype, "shape": list(arr.shape)} for name, arr in arrays.items()
    ]
    with open(path, "wb") as f:
        f.write(json.dumps({"arrays": manifest}, sort_keys=True).encode() + b"\n")
        for arr in arrays.values():
            f.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())


def read_blobs(path) -> dict[str, np.ndarray]:
    """Read back as float64 (storage dtype is usually float32)."""
    out = {}
    with open(path, "rb") as f:
        header = json.loads(f.readline().decode())
        for entry in header["arrays"]:
            shape = tuple(entry["shape"])
            dt = np.dtype(entry["dtype"])
            count = int(np.prod(shape)) if shape else 1
            buf = f.read(count * dt.itemsize)
            if len(buf) != count * dt.itemsize:
                raise ContractError(f"truncated blob file: {path}")
            out[entry["name"]] = np.frombuffer(buf, dtype=dt).reshape(shape).astype(np.float64)
    return out
