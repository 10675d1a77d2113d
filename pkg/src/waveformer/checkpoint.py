"""
Binary checkpoint format.

Layout (all integers little-endian)::

    b"WFCK"                          magic
    u32 version                      currently 1
    u32 entry_count
    entry_count x {
        u32 name_len, name (UTF-8)
        u32 dtype_tag                0=f32, 1=f64, 2=i8 with f32 scale, 3=UTF-8 text
        u32 rank, rank x u32 dims
        payload                      raw values; tag 2 prefixes an f32 scale
    }
    u32 crc32                        CRC-32 of every byte after the magic

Loading verifies the CRC before parsing and refuses unknown versions.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path
from typing import Mapping, Union

import numpy as np

from .errors import CheckpointError
from .quant import QuantizedTensor
from .tensor import Tensor

MAGIC = b"WFCK"
VERSION = 1
TAG_F32, TAG_F64, TAG_I8, TAG_TEXT = 0, 1, 2, 3

Entry = Union[np.ndarray, QuantizedTensor, str]


def _u32(v: int) -> bytes:
    return struct.pack("<I", v)


def encode(entries: Mapping[str, object]) -> bytes:
    body = bytearray()
    body += _u32(VERSION)
    body += _u32(len(entries))
    for name, value in entries.items():
        raw_name = name.encode("utf-8")
        body += _u32(len(raw_name)) + raw_name
        if isinstance(value, Tensor):
            value = value.data
        if isinstance(value, str):
            text = value.encode("utf-8")
            body += _u32(TAG_TEXT) + _u32(1) + _u32(len(text)) + text
        elif isinstance(value, QuantizedTensor):
            if value.zero_point != 0:
                raise CheckpointError(f"'{name}': only symmetric int8 entries are storable")
            body += _u32(TAG_I8) + _u32(value.payload.ndim)
            body += b"".join(_u32(d) for d in value.payload.shape)
            body += np.float32(value.scale).astype("<f4").tobytes()
            body += np.ascontiguousarray(value.payload, dtype=np.int8).tobytes()
        else:
            arr = np.asarray(value)
            if arr.dtype == np.float32:
                tag, fmt = TAG_F32, "<f4"
            elif arr.dtype == np.float64:
                tag, fmt = TAG_F64, "<f8"
            else:
                raise CheckpointError(f"'{name}': unsupported dtype {arr.dtype}")
            body += _u32(tag) + _u32(arr.ndim) + b"".join(_u32(d) for d in arr.shape)
            body += np.ascontiguousarray(arr).astype(fmt, copy=False).tobytes()
    crc = zlib.crc32(bytes(body)) & 0xFFFFFFFF
    return MAGIC + bytes(body) + _u32(crc)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("checkpoint is truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def decode(buf: bytes) -> dict[str, Entry]:
    if len(buf) < 16 or buf[:4] != MAGIC:
        raise CheckpointError("not a WaveFormer checkpoint (bad magic)")
    body, stored = buf[4:-4], struct.unpack("<I", buf[-4:])[0]
    version = struct.unpack("<I", body[:4])[0]
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if zlib.crc32(body) & 0xFFFFFFFF != stored:
        raise CheckpointError("checkpoint CRC mismatch")
    r = _Reader(body)
    r.u32()
    count = r.u32()
    out: dict[str, Entry] = {}
    for _ in range(count):
        name = r.take(r.u32()).decode("utf-8")
        tag = r.u32()
        rank = r.u32()
        dims = tuple(r.u32() for _ in range(rank))
        n = int(np.prod(dims)) if dims else 1
        if tag == TAG_TEXT:
            out[name] = r.take(n).decode("utf-8")
        elif tag == TAG_I8:
            scale = float(np.frombuffer(r.take(4), dtype="<f4")[0])
            payload = np.frombuffer(r.take(n), dtype=np.int8).reshape(dims).copy()
            out[name] = QuantizedTensor(payload, scale, 0)
        elif tag in (TAG_F32, TAG_F64):
            fmt, size = ("<f4", 4) if tag == TAG_F32 else ("<f8", 8)
            arr = np.frombuffer(r.take(n * size), dtype=fmt).reshape(dims)
            out[name] = arr.astype(arr.dtype.newbyteorder("="), copy=True)
        else:
            raise CheckpointError(f"unknown dtype tag {tag} for '{name}'")
    if r.pos != len(body):
        raise CheckpointError("trailing bytes after the last entry")
    return out


def save(path: str | Path, entries: Mapping[str, object]) -> None:
    Path(path).write_bytes(encode(entries))


def load(path: str | Path) -> dict[str, Entry]:
    return decode(Path(path).read_bytes())
