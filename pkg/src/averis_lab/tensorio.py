"""AVTS tensor files and report serialization.

AVTS layout, all little-endian::

    magic    4 bytes   b"AVTS"
    version  uint32    1
    dtype    uint8     0 = float32, 1 = float64
    ndim     uint8
    dims     ndim x uint64
    payload  prod(dims) values, row-major

Three-dimensional tensors ``(b, s, m)`` load as ``(b * s, m)`` matrices.
"""

from __future__ import annotations

import csv
import io
import json
import math
import struct
from pathlib import Path

import numpy as np

MAGIC = b"AVTS"
VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
DTYPE_CODES = {"float32": 0, "f32": 0, "float64": 1, "f64": 1}

_HEADER = struct.Struct("<4sIBB")


class TensorFormatError(ValueError):
    """Raised for malformed or unsupported AVTS files."""


def _dtype_code(dtype) -> int:
    if isinstance(dtype, int):
        if dtype not in DTYPES:
            raise TensorFormatError(f"unsupported dtype code {dtype}")
        return dtype
    key = np.dtype(dtype).name if not isinstance(dtype, str) else dtype
    if key not in DTYPE_CODES:
        raise TensorFormatError(f"unsupported dtype {dtype!r}; use float32 or float64")
    return DTYPE_CODES[key]


def encode_tensor(arr, dtype="float64") -> bytes:
    code = _dtype_code(dtype)
    a = np.ascontiguousarray(np.asarray(arr), dtype=DTYPES[code])
    if a.ndim > 255:
        raise TensorFormatError("too many dimensions")
    header = _HEADER.pack(MAGIC, VERSION, code, a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape)
    return header + a.tobytes(order="C")


def decode_tensor(buf: bytes, flatten: bool = True) -> np.ndarray:
    if len(buf) < _HEADER.size:
        raise TensorFormatError(f"file too short for header: {len(buf)} bytes, need {_HEADER.size}")
    magic, version, code, ndim = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise TensorFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise TensorFormatError(f"unsupported version {version}, expected {VERSION}")
    if code not in DTYPES:
        raise TensorFormatError(f"unsupported dtype code {code}")
    dims_end = _HEADER.size + 8 * ndim
    if len(buf) < dims_end:
        raise TensorFormatError(f"truncated header: expected {dims_end} bytes, got {len(buf)}")
    dims = struct.unpack_from(f"<{ndim}Q", buf, _HEADER.size)
    dtype = DTYPES[code]
    expected = math.prod(dims) * dtype.itemsize
    actual = len(buf) - dims_end
    if actual != expected:
        raise TensorFormatError(
            f"payload size mismatch: expected {expected} bytes for shape {tuple(dims)}, got {actual}"
        )
    a = np.frombuffer(buf, dtype=dtype, offset=dims_end).reshape(dims)
    if flatten and a.ndim == 3:
        a = a.reshape(dims[0] * dims[1], dims[2])
    return a.copy()


def write_tensor(path, m, dtype="float64") -> None:
    Path(path).write_bytes(encode_tensor(m, dtype))


def read_tensor(path, flatten: bool = True) -> np.ndarray:
    """Read an AVTS file; 3-D tensors come back as ``(b * s, m)`` unless ``flatten=False``."""
    return decode_tensor(Path(path).read_bytes(), flatten)


def read_matrix(path) -> np.ndarray:
    """Read an AVTS file as a float64 matrix (1-D becomes a single row)."""
    a = read_tensor(path).astype(np.float64)
    if a.ndim == 1:
        a = a.reshape(1, -1)
    if a.ndim != 2:
        raise TensorFormatError(f"expected a 1-, 2- or 3-D tensor, got ndim={a.ndim}")
    return a


# ---------------------------------------------------------------- reports


def _plain(obj):
    """Convert numpy scalars/arrays and tuples into JSON-ready builtins."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if math.isfinite(f) else None
    return obj


def to_json(report: dict) -> str:
    """UTF-8 JSON, keys in insertion order, non-finite floats as null."""
    return json.dumps(_plain(report), indent=2, ensure_ascii=False, allow_nan=False) + "\n"


def to_csv(rows: list[dict], columns: list[str] | None = None) -> str:
    """RFC 4180 CSV with a header row; nested values are JSON-encoded."""
    rows = [_plain(r) for r in rows]
    if columns is None:
        columns = []
        for r in rows:
            for k in r:
                if k not in columns:
                    columns.append(k)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n", quoting=csv.QUOTE_MINIMAL)
    w.writerow(columns)
    for r in rows:
        w.writerow(
            [json.dumps(v) if isinstance(v, (list, dict)) else ("" if v is None else v) for v in (r.get(c) for c in columns)]
        )
    return buf.getvalue()


def write_text(path, text: str) -> None:
    Path(path).write_text(text, encoding="utf-8", newline="")


# ---------------------------------------------------------------- quantized tensors


def write_quantized(prefix, q) -> list[Path]:
    """Store a QuantizedTensor as ``<prefix>.codes.avts``, ``<prefix>.scales.avts`` and a JSON config."""
    from dataclasses import asdict

    prefix = Path(prefix)
    paths = [prefix.with_suffix(".codes.avts"), prefix.with_suffix(".scales.avts"), prefix.with_suffix(".quant.json")]
    write_tensor(paths[0], q.codes.astype(np.float32), "float32")
    write_tensor(paths[1], q.scales, "float64")
    write_text(paths[2], to_json({"shape": list(q.shape), "config": asdict(q.config)}))
    return paths


def read_quantized(prefix):
    from .quantizer import QuantConfig, QuantizedTensor

    prefix = Path(prefix)
    meta = json.loads(prefix.with_suffix(".quant.json").read_text(encoding="utf-8"))
    codes = read_tensor(prefix.with_suffix(".codes.avts"), flatten=False).astype(np.uint8)
    scales = read_tensor(prefix.with_suffix(".scales.avts"), flatten=False)
    return QuantizedTensor(
        shape=tuple(meta["shape"]), codes=codes, scales=scales, config=QuantConfig(**meta["config"])
    )
