"""Self-describing parameter container.

Layout::

    b"RTWCKPT\\0"            8-byte magic
    uint32 LE               format version
    uint64 LE               header length in bytes
    header                  UTF-8 JSON: {"version", "meta", "tensors": [...]}
    payload                 little-endian tensor bytes, concatenated

Each tensor record is ``{"path", "shape", "dtype", "offset", "nbytes"}`` with
``offset`` relative to the start of the payload. Reading back gives
bit-identical arrays.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

MAGIC = b"RTWCKPT\0"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_arrays(path: str | Path, arrays: Mapping[str, np.ndarray], meta: dict[str, Any] | None = None) -> None:
    records = []
    chunks = []
    offset = 0
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = np.ascontiguousarray(le).tobytes()
        records.append(
            {
                "path": name,
                "shape": list(arr.shape),
                "dtype": le.dtype.str,
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"version": VERSION, "meta": meta or {}, "tensors": records}).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(header)))
        fh.write(header)
        for raw in chunks:
            fh.write(raw)


def load_arrays(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    blob = Path(path).read_bytes()
    if blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    pos = len(MAGIC)
    version, hlen = struct.unpack_from("<IQ", blob, pos)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    pos += struct.calcsize("<IQ")
    header = json.loads(blob[pos : pos + hlen].decode("utf-8"))
    base = pos + hlen
    out = {}
    for rec in header["tensors"]:
        start = base + rec["offset"]
        arr = np.frombuffer(blob, dtype=np.dtype(rec["dtype"]), count=int(np.prod(rec["shape"], dtype=np.int64)), offset=start)
        out[rec["path"]] = arr.reshape(rec["shape"]).astype(np.dtype(rec["dtype"]).newbyteorder("="))
    return out, header["meta"]
