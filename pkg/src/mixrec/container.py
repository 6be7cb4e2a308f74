"""The ``MXRD`` binary container used for prepared datasets and checkpoints.

Layout (all integers little-endian)::

    b"MXRD" | u32 format version | u64 manifest length | manifest (UTF-8 JSON) | array blobs

The manifest holds ``{"format_version", "kind", "meta", "arrays"}`` where
``arrays`` lists ``{name, dtype, shape, offset, nbytes}`` with offsets
relative to the start of the blob section.  Output is byte-deterministic:
the manifest is serialized with sorted keys and arrays keep insertion order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"MXRD"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIQ")


def _le(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    if arr.dtype.byteorder == ">" or (arr.dtype.byteorder == "=" and not np.little_endian):
        arr = arr.astype(arr.dtype.newbyteorder("<"))
    return arr


def write_container(path, arrays: dict[str, np.ndarray], meta: dict | None = None, kind: str = "data") -> None:
    entries = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        arr = _le(np.asarray(arr))
        if arr.dtype == object:
            raise CheckpointError(f"array {name!r} has object dtype")
        raw = arr.tobytes()
        entries.append(
            {"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        )
        blobs.append(raw)
        offset += len(raw)
    manifest = {"format_version": FORMAT_VERSION, "kind": kind, "meta": meta or {}, "arrays": entries}
    body = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, len(body)))
        fh.write(body)
        for raw in blobs:
            fh.write(raw)


def read_container(path, kind: str | None = None) -> tuple[dict[str, np.ndarray], dict]:
    """Return ``(arrays, meta)``; raises :class:`CheckpointError` on any inconsistency."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise CheckpointError(f"{path}: truncated header")
    magic, version, length = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    start = _HEADER.size
    try:
        manifest = json.loads(raw[start : start + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable manifest") from exc
    if kind is not None and manifest.get("kind") != kind:
        raise CheckpointError(f"{path}: expected a {kind!r} container, found {manifest.get('kind')!r}")
    base = start + length
    arrays = {}
    for entry in manifest["arrays"]:
        lo = base + entry["offset"]
        hi = lo + entry["nbytes"]
        if hi > len(raw):
            raise CheckpointError(f"{path}: array {entry['name']!r} runs past end of file")
        dtype = np.dtype(entry["dtype"])
        arr = np.frombuffer(raw[lo:hi], dtype=dtype).reshape(entry["shape"])
        arrays[entry["name"]] = arr.astype(dtype.newbyteorder("="), copy=True)
    return arrays, manifest.get("meta", {})
