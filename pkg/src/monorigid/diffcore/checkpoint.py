"""Checkpoint files: one line of JSON header, then a little-endian float32 blob.

The header lists ``name``, ``dtype``, ``shape`` and ``offset`` (bytes from the
start of the blob) for every tensor, plus free-form metadata. Serialisation
is canonical (sorted keys, fixed separators), so saving what was loaded
reproduces the file byte for byte.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

MAGIC = "monorigid-ckpt-v1"


def save_checkpoint(path, tensors, metadata=None):
    """Write ``tensors`` (an ordered name -> array mapping) to ``path``."""
    entries, blobs, offset = [], [], 0
    for name, arr in tensors.items():
        data = np.ascontiguousarray(np.asarray(arr), dtype="<f4")
        entries.append({"name": name, "dtype": "float32", "shape": list(data.shape), "offset": offset})
        blobs.append(data.tobytes())
        offset += data.nbytes
    header = {"format": MAGIC, "tensors": entries, "metadata": metadata or {}, "blob_bytes": offset}
    line = json.dumps(header, sort_keys=True, separators=(",", ":"))
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(line.encode("utf-8") + b"\n")
        for b in blobs:
            fh.write(b)
    return path


def load_checkpoint(path):
    """Return ``(tensors, metadata)`` with tensors as float32 arrays in file order."""
    raw = Path(path).read_bytes()
    nl = raw.index(b"\n")
    header = json.loads(raw[:nl].decode("utf-8"))
    if header.get("format") != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    blob = raw[nl + 1:]
    if len(blob) != header["blob_bytes"]:
        raise ValueError(f"{path}: blob has {len(blob)} bytes, header says {header['blob_bytes']}")
    tensors = {}
    for e in header["tensors"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=e["offset"]).reshape(e["shape"])
        tensors[e["name"]] = arr.astype(np.float32)
    return tensors, header["metadata"]
