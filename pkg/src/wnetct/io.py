"""Binary tensor container and CSV helpers.

Layout (all little-endian)::

    b"WNCT" | version u16 | dtype u8 (0=f32, 1=f64) | rank u8 | dims u32 * rank | payload

The payload is the row-major array, ``prod(dims) * itemsize`` bytes.
"""
from __future__ import annotations

import csv
import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from . import __version__

MAGIC = b"WNCT"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class ContainerError(ValueError):
    """Malformed or unsupported tensor container."""


def encode_tensor(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    code = _CODES.get(np.dtype(array.dtype.name)) if array.dtype.kind == "f" else None
    if code is None:
        raise ContainerError(f"unsupported dtype {array.dtype}; use float32 or float64")
    if array.ndim > 255:
        raise ContainerError("rank exceeds 255")
    header = MAGIC + struct.pack("<HBB", VERSION, code, array.ndim)
    header += struct.pack(f"<{array.ndim}I", *array.shape)
    payload = np.ascontiguousarray(array, dtype=_DTYPES[code]).tobytes(order="C")
    return header + payload


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < 8 or buf[:4] != MAGIC:
        raise ContainerError("not a WNCT tensor container (bad magic)")
    version, code, rank = struct.unpack_from("<HBB", buf, 4)
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    if code not in _DTYPES:
        raise ContainerError(f"unknown dtype code {code}")
    offset = 8 + 4 * rank
    if len(buf) < offset:
        raise ContainerError("truncated header")
    dims = struct.unpack_from(f"<{rank}I", buf, 8)
    dtype = _DTYPES[code]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(buf) - offset != expected:
        raise ContainerError(f"payload is {len(buf) - offset} bytes, expected {expected}")
    arr = np.frombuffer(buf, dtype=dtype, offset=offset).reshape(dims)
    return arr.astype(dtype.newbyteorder("="))


def write_tensor(path, array: np.ndarray) -> None:
    Path(path).write_bytes(encode_tensor(array))


def read_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


def config_hash(config) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def write_csv(path, header: list[str], rows, config=None) -> None:
    """CSV with a leading ``#`` comment recording tool version and config hash."""
    with open(path, "w", newline="") as fh:
        fh.write(f"# wnetct {__version__} config_hash={config_hash(config)}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow(row)


def read_csv(path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        lines = [line for line in fh if not line.startswith("#")]
    return list(csv.DictReader(lines))
