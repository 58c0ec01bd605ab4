"""Flat named-tensor container with a JSON header.

Used for checkpoints, optimizer state, and dataset samples. The format is
deliberately trivial so round trips are bit-exact and files are byte-identical
across runs (unlike zip-based containers, nothing timestamped is written).

Layout:

    bytes 0..3    magic b"NTC1"
    bytes 4..11   header length N, unsigned little-endian 64-bit
    bytes 12..12+N  UTF-8 JSON header
    remainder     raw tensor buffers, concatenated in header order

Header schema (version 1):

    {"version": 1,
     "meta": {...arbitrary JSON...},
     "tensors": [{"name": str, "dtype": str, "shape": [int, ...]}, ...]}

Buffers are C-contiguous little-endian, in the exact order listed under
"tensors". Only little-endian numeric dtypes are allowed.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

MAGIC = b"NTC1"
FORMAT_VERSION = 1


def save_tensors(path: str | Path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write named arrays plus a JSON metadata blob to `path`."""
    entries = []
    buffers = []
    for name, arr in tensors.items():
        shape = list(np.shape(arr))  # before ascontiguousarray, which promotes 0-d to 1-d
        arr = np.ascontiguousarray(arr)
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        entries.append({"name": name, "dtype": arr.dtype.str, "shape": shape})
        buffers.append(arr.tobytes())
    header = json.dumps(
        {"version": FORMAT_VERSION, "meta": meta or {}, "tensors": entries},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(len(header).to_bytes(8, "little"))
        fh.write(header)
        for buf in buffers:
            fh.write(buf)


def load_tensors(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a container written by `save_tensors`. Returns (tensors, meta)."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise ValueError(f"{path}: not a tensor container (bad magic {magic!r})")
        (hlen,) = (int.from_bytes(fh.read(8), "little"),)
        header = json.loads(fh.read(hlen).decode("utf-8"))
        if header["version"] != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported container version {header['version']}")
        tensors: dict[str, np.ndarray] = {}
        for entry in header["tensors"]:
            dtype = np.dtype(entry["dtype"])
            count = int(np.prod(entry["shape"], dtype=np.int64)) if entry["shape"] else 1
            buf = fh.read(count * dtype.itemsize)
            tensors[entry["name"]] = np.frombuffer(buf, dtype=dtype).reshape(entry["shape"]).copy()
    return tensors, header["meta"]
