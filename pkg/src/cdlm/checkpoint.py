"""Versioned little-endian checkpoint container.

Layout::

    b"CDLM" | u16 version | u32 meta_len | meta (UTF-8 JSON)
    u32 n_tensors
    repeated: u16 name_len | name | u8 dtype | u8 ndim | ndim * u32 dims | raw data
    u32 crc32 of everything above
"""
from __future__ import annotations

import json
import os
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"CDLM"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def dumps(meta: dict, tensors: dict[str, np.ndarray]) -> bytes:
    meta_raw = json.dumps(meta, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<HI", VERSION, len(meta_raw)), meta_raw, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        code = _CODES.get(arr.dtype)
        if code is None:
            arr = arr.astype(np.float64)
            code = 1
        key = name.encode()
        parts.append(struct.pack("<HBB", len(key), code, arr.ndim))
        parts.append(key)
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def loads(raw: bytes, path=None) -> tuple[dict, dict[str, np.ndarray]]:
    def need(pos: int, n: int, what: str) -> None:
        if pos + n > len(raw):
            raise FormatError(f"checkpoint truncated while reading {what}", path=path, offset=pos)

    need(0, 10, "header")
    if raw[:4] != MAGIC:
        raise FormatError(f"bad magic {raw[:4]!r}", path=path, offset=0)
    version, meta_len = struct.unpack_from("<HI", raw, 4)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", path=path, offset=4)
    if len(raw) < 4:
        raise FormatError("missing checksum", path=path, offset=len(raw))
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    pos = 10
    need(pos, meta_len, "metadata")
    try:
        meta = json.loads(raw[pos:pos + meta_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise FormatError("metadata is not valid JSON", path=path, offset=pos) from None
    pos += meta_len
    need(pos, 4, "tensor count")
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        need(pos, 4, "tensor header")
        name_len, code, ndim = struct.unpack_from("<HBB", raw, pos)
        if code not in _DTYPES:
            raise FormatError(f"unknown dtype code {code}", path=path, offset=pos + 2)
        pos += 4
        need(pos, name_len + 4 * ndim, "tensor name/shape")
        try:
            name = raw[pos:pos + name_len].decode()
        except UnicodeDecodeError:
            raise FormatError("tensor name is not UTF-8", path=path, offset=pos) from None
        pos += name_len
        shape = struct.unpack_from(f"<{ndim}I", raw, pos)
        pos += 4 * ndim
        dtype = _DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        need(pos, nbytes, f"tensor {name!r}")
        tensors[name] = np.frombuffer(raw, dtype=dtype, count=nbytes // dtype.itemsize, offset=pos).reshape(shape).copy()
        pos += nbytes
    if pos != len(body):
        raise FormatError("unexpected bytes after last tensor", path=path, offset=pos)
    if zlib.crc32(body) != crc:
        raise FormatError("checksum mismatch", path=path, offset=len(body))
    return meta, tensors


def save(path, meta: dict, tensors: dict[str, np.ndarray]) -> Path:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(dumps(meta, tensors))
    os.replace(tmp, path)
    return path


def load(path) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read checkpoint: {exc.strerror}", path=path) from exc
    return loads(raw, path=path)
