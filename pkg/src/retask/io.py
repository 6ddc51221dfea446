"""Deterministic on-disk container for named arrays plus a config tree.

Checkpoints, page-grid stores and adapter bundles all use one format so a
rerun with identical inputs produces byte-identical files:

    bytes 0..7    magic ``b"RTSK0001"``
    bytes 8..15   header length ``n`` as little-endian uint64
    next n bytes  UTF-8 JSON, sorted keys, compact separators:
                  ``{"arrays": [{"dtype", "name", "shape"}, ...], "meta": {...}}``
    remainder     the arrays' C-contiguous little-endian bytes, concatenated
                  in the order listed under ``"arrays"`` (sorted by name)

``meta`` is caller-defined; model checkpoints store the model config under
``meta["config"]`` and a format tag under ``meta["kind"]``.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

MAGIC = b"RTSK0001"

_DTYPES = {"float32", "float64", "int64", "int32", "uint8", "bool"}


def canonical_json(obj) -> str:
    """JSON text with sorted keys and no whitespace; stable across runs."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def fingerprint(obj) -> str:
    """sha256 hex digest of an object's canonical JSON form."""
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


def save_arrays(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries = []
    blobs = []
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        if arr.dtype.name not in _DTYPES:
            raise ValueError(f"unsupported dtype {arr.dtype} for array {name!r}")
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        entries.append({"dtype": arr.dtype.name, "name": name, "shape": list(arr.shape)})
        blobs.append(arr.tobytes())
    header = canonical_json({"arrays": entries, "meta": meta or {}}).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(len(header).to_bytes(8, "little"))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_arrays(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != MAGIC:
            raise ValueError(f"{path}: not a retask array container")
        n = int.from_bytes(fh.read(8), "little")
        header = json.loads(fh.read(n).decode("utf-8"))
        arrays = {}
        for entry in header["arrays"]:
            dtype = np.dtype(entry["dtype"]).newbyteorder("<")
            count = int(np.prod(entry["shape"], dtype=np.int64)) if entry["shape"] else 1
            raw = fh.read(count * dtype.itemsize)
            arrays[entry["name"]] = np.frombuffer(raw, dtype=dtype).reshape(entry["shape"]).copy()
    return header["meta"], arrays


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_jsonl(path, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(canonical_json(row))
            fh.write("\n")


def read_jsonl(path) -> list[dict]:
    with open(path, "r", encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
