"""Little-endian binary containers for checkpoints, sidecars, banks and corpora.

Layout shared by every file::

    magic      6 bytes   (b"OTPEL1", b"OTPELp", b"OTPELb", b"OTPELd")
    version    u16
    tag        32 bytes  sha256 of the owning config (all zeros when unused)
    payload    ...       kind-specific, see below
    crc32      u32       over every preceding byte

Tensor payload: u32 record count, then per record u32 name length, utf-8
name, u32 ndim, u64 per dimension, raw float64 data. Readers parse the whole
file into memory before returning anything, so a bad file never yields a
partial result.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import zlib
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .errors import ConfigHashError, MagicError, TruncationError, VersionError

VERSION = 1
_HEADER = struct.Struct("<6sH32s")


def config_digest(payload: dict) -> bytes:
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).digest()


class Writer:
    def __init__(self, magic: bytes, tag: bytes = b"\0" * 32):
        self._parts = [_HEADER.pack(magic, VERSION, tag)]

    def u32(self, value: int) -> None:
        self._parts.append(struct.pack("<I", value))

    def u64(self, value: int) -> None:
        self._parts.append(struct.pack("<Q", value))

    def raw(self, data: bytes) -> None:
        self._parts.append(data)

    def string(self, text: str) -> None:
        encoded = text.encode("utf-8")
        self.u32(len(encoded))
        self.raw(encoded)

    def array(self, values: np.ndarray, dtype="<f8") -> None:
        values = np.ascontiguousarray(values, dtype=dtype)
        self.u32(values.ndim)
        for n in values.shape:
            self.u64(n)
        self.raw(values.tobytes())

    def save(self, path) -> None:
        body = b"".join(self._parts)
        blob = body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(blob)
        os.replace(tmp, path)


class Reader:
    def __init__(self, path, magic: bytes, tag: bytes | None = None):
        blob = Path(path).read_bytes()
        if len(blob) < len(magic) or blob[: len(magic)] != magic:
            raise MagicError(f"{path}: bad magic, expected {magic!r}")
        if len(blob) < _HEADER.size + 4:
            raise TruncationError(f"{path}: file truncated inside the header")
        _, version, stored_tag = _HEADER.unpack_from(blob, 0)
        if version != VERSION:
            raise VersionError(f"{path}: unsupported version {version}")
        body, trailer = blob[:-4], blob[-4:]
        if struct.unpack("<I", trailer)[0] != (zlib.crc32(body) & 0xFFFFFFFF):
            raise TruncationError(f"{path}: truncated or corrupted (checksum mismatch)")
        if tag is not None and stored_tag != tag:
            raise ConfigHashError(f"{path}: config hash does not match the current configuration")
        self.path = path
        self.tag = stored_tag
        self._buf = body
        self._pos = _HEADER.size

    def _take(self, n: int) -> bytes:
        end = self._pos + n
        if end > len(self._buf):
            raise TruncationError(f"{self.path}: unexpected end of data")
        chunk = self._buf[self._pos : end]
        self._pos = end
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self._take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self._take(8))[0]

    def string(self) -> str:
        return self._take(self.u32()).decode("utf-8")

    def array(self, dtype="<f8") -> np.ndarray:
        ndim = self.u32()
        shape = tuple(self.u64() for _ in range(ndim))
        count = int(np.prod(shape)) if shape else 1
        itemsize = np.dtype(dtype).itemsize
        data = np.frombuffer(self._take(count * itemsize), dtype=dtype).reshape(shape)
        return data.astype(np.float64 if dtype == "<f8" else np.int64)

    def finish(self) -> None:
        if self._pos != len(self._buf):
            raise TruncationError(f"{self.path}: trailing bytes after payload")


def save_tensors(path, magic: bytes, tensors, tag: bytes = b"\0" * 32) -> None:
    w = Writer(magic, tag)
    items = list(tensors.items())
    w.u32(len(items))
    for name, values in items:
        w.string(name)
        w.array(values)
    w.save(path)


def load_tensors(path, magic: bytes, tag: bytes | None = None) -> "OrderedDict[str, np.ndarray]":
    r = Reader(path, magic, tag)
    out = OrderedDict()
    for _ in range(r.u32()):
        name = r.string()
        out[name] = r.array()
    r.finish()
    return out


def read_tag(path, magic: bytes) -> bytes:
    return Reader(path, magic).tag
