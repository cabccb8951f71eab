"""EVLT named-tensor archive.

Layout (all integers unsigned 32-bit little-endian)::

    b"EVLT" | version=1 | entry count
    per entry: name length | UTF-8 name | rank | dims... | float32 LE payload

Scalars are stored as rank 1, dim 1.
"""

import os
import struct
from collections import OrderedDict

import numpy as np

from .errors import CorruptionError, FormatError, ShapeError

MAGIC = b"EVLT"
VERSION = 1
_U32 = struct.Struct("<I")
_F32 = np.dtype("<f4")


class CheckpointArchive(OrderedDict):
    """Ordered mapping name -> float32 array."""

    def __setitem__(self, name, value):
        if not isinstance(name, str):
            raise FormatError(f"entry names must be strings, got {name!r}")
        arr = np.asarray(value, dtype=np.float32)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if any(d < 1 for d in arr.shape):
            raise ShapeError(f"entry {name!r} has an empty dimension {arr.shape}")
        super().__setitem__(name, arr)

    def equals(self, other):
        """Same names in the same order with bitwise-equal payloads."""
        if list(self) != list(other):
            return False
        return all(self[k].shape == other[k].shape and self[k].tobytes() == other[k].tobytes()
                   for k in self)


def to_bytes(archive):
    parts = [MAGIC, _U32.pack(VERSION), _U32.pack(len(archive))]
    for name, arr in archive.items():
        raw = name.encode("utf-8")
        parts += [_U32.pack(len(raw)), raw, _U32.pack(arr.ndim)]
        parts += [_U32.pack(d) for d in arr.shape]
        parts.append(np.ascontiguousarray(arr, dtype=_F32).tobytes())
    return b"".join(parts)


def save(archive, path):
    if not isinstance(archive, CheckpointArchive):
        archive = CheckpointArchive(archive)
    blob = to_bytes(archive)
    try:
        with open(path, "wb") as fh:
            fh.write(blob)
    except OSError as exc:
        raise OSError(f"cannot write checkpoint {os.fspath(path)}: {exc.strerror}") from exc


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise CorruptionError(f"truncated archive while reading {what}")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what):
        return _U32.unpack(self.take(4, what))[0]


def from_bytes(buf):
    r = _Reader(memoryview(buf))
    if bytes(r.take(4, "magic")) != MAGIC:
        raise FormatError("bad magic: not an EVLT archive")
    version = r.u32("version")
    if version != VERSION:
        raise FormatError(f"unsupported EVLT version {version}")
    count = r.u32("entry count")
    archive = CheckpointArchive()
    for i in range(count):
        nlen = r.u32(f"name length of entry {i}")
        try:
            name = bytes(r.take(nlen, f"name of entry {i}")).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"entry {i} name is not valid UTF-8") from None
        if name in archive:
            raise FormatError(f"duplicate entry name {name!r}")
        rank = r.u32(f"rank of {name!r}")
        dims = [r.u32(f"dims of {name!r}") for _ in range(rank)]
        if rank == 0 or any(d == 0 for d in dims):
            raise FormatError(f"entry {name!r} has invalid shape {dims}")
        nbytes = 4
        for d in dims:
            nbytes *= d
        remaining = len(r.buf) - r.pos
        if nbytes > remaining:
            # checked before allocating so corrupt dims cannot trigger huge reads
            raise CorruptionError(
                f"entry {name!r} declares {nbytes} payload bytes but only {remaining} remain")
        payload = r.take(nbytes, f"payload of {name!r}")
        archive[name] = np.frombuffer(payload, dtype=_F32).reshape(dims).astype(np.float32)
    if r.pos != len(r.buf):
        raise CorruptionError(f"{len(r.buf) - r.pos} trailing bytes after last entry")
    return archive


def load(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    return from_bytes(buf)
