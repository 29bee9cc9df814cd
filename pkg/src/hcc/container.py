"""Versioned binary container for checkpoints.

Layout (little-endian throughout):

    magic "HCCM" | u8 version | u32 header_len | header JSON (utf-8)
    | u32 n_arrays | arrays | u32 CRC32 of all preceding bytes

Each array: u16 name_len | name utf-8 | u8 dtype (0 = f32, 1 = f64)
| u8 ndim | u32 x ndim dims | raw data. Round-trips are bit-exact.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"HCCM"
VERSION = 1

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class CheckpointError(Exception):
    pass


class VersionMismatchError(CheckpointError):
    pass


class CorruptFileError(CheckpointError):
    pass


def dump_container(header: dict, arrays) -> bytes:
    parts = [MAGIC, struct.pack("<B", VERSION)]
    hdr = json.dumps(header, sort_keys=True).encode()
    parts.append(struct.pack("<I", len(hdr)))
    parts.append(hdr)
    arrays = list(arrays)
    parts.append(struct.pack("<I", len(arrays)))
    for name, arr in arrays:
        arr = np.asarray(arr)
        code = _CODES.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name!r}")
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save_container(path, header: dict, arrays):
    Path(path).write_bytes(dump_container(header, arrays))


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CorruptFileError(f"corrupt file (truncated): {self.path}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_container(path):
    data = Path(path).read_bytes()
    if len(data) < 4 + 1 + 4 + 4:
        raise CorruptFileError(f"corrupt file (too short): {path}")
    if data[:4] != MAGIC:
        raise CorruptFileError(f"corrupt file (bad magic): {path}")
    version = data[4]
    if version != VERSION:
        raise VersionMismatchError(f"version mismatch: file v{version}, expected v{VERSION}")
    stored_crc = struct.unpack("<I", data[-4:])[0]
    if zlib.crc32(data[:-4]) != stored_crc:
        raise CorruptFileError(f"corrupt file (checksum mismatch): {path}")
    r = _Reader(data[5:-4], path)
    (hlen,) = r.unpack("<I")
    try:
        header = json.loads(r.take(hlen).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptFileError(f"corrupt file (bad header): {path}") from e
    (n_arrays,) = r.unpack("<I")
    arrays = {}
    for _ in range(n_arrays):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        code, ndim = r.unpack("<BB")
        if code not in _DTYPES:
            raise CorruptFileError(f"corrupt file (bad dtype): {path}")
        shape = r.unpack(f"<{ndim}I")
        dt = _DTYPES[code]
        count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        raw = r.take(count * dt.itemsize)
        arrays[name] = np.frombuffer(raw, dtype=dt).reshape(shape).copy()
    if r.pos != len(r.data):
        raise CorruptFileError(f"corrupt file (trailing bytes): {path}")
    return header, arrays
