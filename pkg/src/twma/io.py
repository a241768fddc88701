"""Raw tensor files and small helpers shared by the CSV writers.

Tensor file layout: 4-byte little-endian header length, UTF-8 JSON header
(``shape``, ``dtype``, ``order``, ``endian`` plus free-form fields), then the
row-major little-endian data.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

_DTYPES = {"f32": "<f4", "f64": "<f8", "i32": "<i4", "i64": "<i8", "u8": "|u1"}
_CODES = {np.dtype(v).newbyteorder("=").str.lstrip("<>|="): k for k, v in _DTYPES.items()}


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)


def config_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()


def _code_for(dtype) -> str:
    key = np.dtype(dtype).str.lstrip("<>|=")
    if key not in _CODES:
        raise TypeError(f"unsupported tensor dtype {np.dtype(dtype)}")
    return _CODES[key]


def write_tensor(path: str | Path, array: np.ndarray, dtype: str | None = None, **header) -> None:
    a = np.asarray(array)
    code = dtype or _code_for(a.dtype)
    a = np.ascontiguousarray(a, dtype=np.dtype(_DTYPES[code]))
    meta = {"shape": list(a.shape), "dtype": code, "order": "row-major", "endian": "little", **header}
    blob = json.dumps(meta, sort_keys=True, default=str).encode()
    with Path(path).open("wb") as fh:
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(a.tobytes())


def read_tensor(path: str | Path) -> tuple[np.ndarray, dict]:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise ValueError(f"{path}: truncated tensor file")
    (n,) = struct.unpack("<I", raw[:4])
    meta = json.loads(raw[4:4 + n].decode())
    dt = np.dtype(_DTYPES[meta["dtype"]])
    count = int(np.prod(meta["shape"])) if meta["shape"] else 1
    if len(raw) - 4 - n != count * dt.itemsize:
        raise ValueError(f"{path}: payload size does not match header shape {meta['shape']}")
    a = np.frombuffer(raw, dtype=dt, count=count, offset=4 + n).reshape(meta["shape"])
    return a.astype(dt.newbyteorder("="), copy=True), meta


def read_tensor_header(path: str | Path) -> dict:
    with Path(path).open("rb") as fh:
        (n,) = struct.unpack("<I", fh.read(4))
        return json.loads(fh.read(n).decode())


def fmt(x) -> str:
    """Round-trippable text for a float; empty string for NaN."""
    x = float(x)
    return "" if np.isnan(x) else repr(x)
