"""Versioned binary container for named little-endian arrays.

Layout::

    magic      8 bytes   b"GFCONT\\x00\\x01"
    hlen       uint64 LE length of the JSON header in bytes
    header     UTF-8 JSON: {"kind", "version", "meta", "arrays": [
                   {"name", "dtype", "shape", "offset", "nbytes"}, ...]}
    payload    raw array bytes, C order, little-endian, at the declared offsets

Offsets are relative to the start of the payload.  Writes are atomic
(temp file in the same directory, then ``os.replace``).
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"GFCONT\x00\x01"
_ALLOWED_DTYPES = {"<f4", "<f8", "<i8", "<i4", "|u1", "|b1", "<u8"}


def _le(arr: np.ndarray) -> np.ndarray:
    arr = np.require(arr, requirements="C")  # keeps 0-d shapes, unlike ascontiguousarray
    if arr.dtype.byteorder == ">" or (arr.dtype.byteorder == "=" and np.little_endian is False):
        arr = arr.astype(arr.dtype.newbyteorder("<"))
    return arr


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode(kind: str, version: int, meta: dict, arrays: dict[str, np.ndarray]) -> bytes:
    entries, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        arr = _le(np.asarray(arr))
        if arr.dtype.str not in _ALLOWED_DTYPES:
            raise FormatError(f"array {name!r}: unsupported dtype {arr.dtype.str}")
        raw = arr.tobytes(order="C")
        entries.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"kind": kind, "version": version, "meta": meta, "arrays": entries},
                        sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(header)) + header + b"".join(blobs)


def decode(data: bytes, kind: str, version: int) -> tuple[dict, dict[str, np.ndarray]]:
    if len(data) < len(MAGIC) + 8 or data[: len(MAGIC)] != MAGIC:
        raise FormatError("magic: not a container file")
    (hlen,) = struct.unpack("<Q", data[len(MAGIC): len(MAGIC) + 8])
    start = len(MAGIC) + 8
    if start + hlen > len(data):
        raise FormatError("header: truncated")
    try:
        header = json.loads(data[start: start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"header: unparseable ({exc})") from None
    if header.get("kind") != kind:
        raise FormatError(f"kind: expected {kind!r}, found {header.get('kind')!r}")
    if header.get("version") != version:
        raise FormatError(f"version: expected {version}, found {header.get('version')!r}")
    payload = memoryview(data)[start + hlen:]
    arrays = {}
    for entry in header.get("arrays", []):
        name = entry["name"]
        dtype = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if entry["nbytes"] != expected:
            raise FormatError(f"{name}: declared {entry['nbytes']} bytes but shape needs {expected}")
        lo, hi = entry["offset"], entry["offset"] + entry["nbytes"]
        if hi > len(payload):
            raise FormatError(f"{name}: array block truncated ({len(payload) - lo} of {expected} bytes)")
        arrays[name] = np.frombuffer(payload[lo:hi], dtype=dtype).reshape(shape).copy()
    return header["meta"], arrays


def write(path, kind: str, version: int, meta: dict, arrays: dict[str, np.ndarray]) -> str:
    """Write atomically; returns the sha256 of the written bytes."""
    blob = encode(kind, version, meta, arrays)
    atomic_write_bytes(path, blob)
    return hashlib.sha256(blob).hexdigest()


def read(path, kind: str, version: int) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"path: cannot read {path} ({exc})") from None
    return decode(data, kind, version)


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
