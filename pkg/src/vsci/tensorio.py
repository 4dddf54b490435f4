"""Binary tensor file format ("VSCI") and key=value text sidecars.

Layout, all little-endian:

    bytes 0..3   magic b"VSCI"
    byte  4      format version (currently 1)
    byte  5      dtype code: 0 = float32, 1 = float64
    byte  6      ndim
    then         ndim x uint32 dims
    then         payload, row-major (C order)

Round-trips are byte-identical for float64 payloads.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import BadMagicError, DtypeMismatchError, TruncatedError

MAGIC = b"VSCI"
VERSION = 1

_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODE_FOR_DTYPE = {np.dtype("float32"): 0, np.dtype("float64"): 1}


def write_tensor(path: str, tensor: np.ndarray) -> None:
    """Write ``tensor`` (float32 or float64) to ``path``."""
    arr = np.asarray(tensor)
    if arr.dtype not in _CODE_FOR_DTYPE:
        arr = arr.astype(np.float64)
    code = _CODE_FOR_DTYPE[arr.dtype]
    header = MAGIC + struct.pack("<BBB", VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = np.ascontiguousarray(arr, dtype=_DTYPE_CODES[code]).tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def read_tensor(path: str) -> np.ndarray:
    """Read a tensor written by :func:`write_tensor`."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 7 or blob[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {blob[:4]!r}")
    version, code, ndim = struct.unpack("<BBB", blob[4:7])
    if version != VERSION:
        raise DtypeMismatchError(f"{path}: unsupported format version {version}")
    if code not in _DTYPE_CODES:
        raise DtypeMismatchError(f"{path}: unknown dtype code {code}")
    dims_end = 7 + 4 * ndim
    if len(blob) < dims_end:
        raise TruncatedError(f"{path}: header truncated")
    dims = struct.unpack(f"<{ndim}I", blob[7:dims_end])
    dtype = _DTYPE_CODES[code]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    payload = blob[dims_end:]
    if len(payload) != expected:
        raise TruncatedError(
            f"{path}: payload is {len(payload)} bytes, header implies {expected}"
        )
    return np.frombuffer(payload, dtype=dtype).reshape(dims).copy()


def write_kv(path: str, entries: dict) -> None:
    """Write a flat key=value text sidecar (UTF-8, '#' comments allowed)."""
    lines = [f"{k} = {v}" for k, v in entries.items()]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_kv(path: str) -> dict:
    """Read a key=value sidecar written by :func:`write_kv`."""
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for raw in fh:
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise TruncatedError(f"{path}: malformed line {raw.strip()!r}")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out
