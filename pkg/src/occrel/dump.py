"""Binary voxel dump format (``.occd``).

Layout, little-endian, row-major, no padding::

    magic        4s   b"OCCD"
    version      u32  1
    n            u64
    num_classes  u16  S (logit width is S + 1)
    feature_dim  u16
    flags        u32  bit0 features, bit1 sigmas, bit2 depths
    labels       n x u16          (65535 = IGNORE)
    logits       n x (S+1) x f32
    features     n x d x f32      if bit0
    sigmas       n x f32          if bit1
    depths       n x f32          if bit2
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .core import BatchError, VoxelBatch

MAGIC = b"OCCD"
VERSION = 1
HEADER = struct.Struct("<4sIQHHI")
HEADER_SIZE = HEADER.size
HAS_FEATURES, HAS_SIGMAS, HAS_DEPTHS = 1, 2, 4


class DumpError(ValueError):
    code = 10


class BadMagic(DumpError):
    code = 11


class BadVersion(DumpError):
    code = 12


class SizeMismatch(DumpError):
    code = 13


def _payload_size(n, width, d, flags) -> int:
    size = n * 2 + n * width * 4
    if flags & HAS_FEATURES:
        size += n * d * 4
    if flags & HAS_SIGMAS:
        size += n * 4
    if flags & HAS_DEPTHS:
        size += n * 4
    return size


def encode(batch: VoxelBatch) -> bytes:
    batch.validate()
    if batch.num_classes + 1 > 0xFFFF or batch.feature_dim > 0xFFFF:
        raise BatchError("num_classes/feature_dim do not fit in u16")
    flags = ((HAS_FEATURES if batch.features is not None else 0)
             | (HAS_SIGMAS if batch.sigmas is not None else 0)
             | (HAS_DEPTHS if batch.depths is not None else 0))
    parts = [HEADER.pack(MAGIC, VERSION, batch.n, batch.num_classes, batch.feature_dim, flags),
             batch.labels.astype("<u2").tobytes(),
             batch.logits.astype("<f4").tobytes()]
    for arr in (batch.features, batch.sigmas, batch.depths):
        if arr is not None:
            parts.append(arr.astype("<f4").tobytes())
    return b"".join(parts)


def decode(data: bytes) -> VoxelBatch:
    if data[:4] != MAGIC:
        raise BadMagic("bad magic")
    if len(data) < HEADER_SIZE:
        raise SizeMismatch(f"size mismatch: {len(data)} bytes is shorter than the header")
    magic, version, n, S, d, flags = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise BadMagic("bad magic")
    if version != VERSION:
        raise BadVersion(f"unsupported dump version {version}")
    width = S + 1
    expected = HEADER_SIZE + _payload_size(n, width, d, flags)
    if len(data) != expected:
        raise SizeMismatch(f"size mismatch: header implies {expected} bytes, file has {len(data)}")
    off = HEADER_SIZE

    def take(dtype, count, shape):
        nonlocal off
        arr = np.frombuffer(data, dtype=dtype, count=count, offset=off).reshape(shape)
        off += count * np.dtype(dtype).itemsize
        return arr.astype(dtype[1:] if dtype.startswith("<") else dtype)

    labels = take("<u2", n, (n,))
    logits = take("<f4", n * width, (n, width))
    features = take("<f4", n * d, (n, d)) if flags & HAS_FEATURES else None
    sigmas = take("<f4", n, (n,)) if flags & HAS_SIGMAS else None
    depths = take("<f4", n, (n,)) if flags & HAS_DEPTHS else None
    return VoxelBatch(labels, logits, S, features, sigmas, depths)


def write_dump(batch: VoxelBatch, path) -> None:
    Path(path).write_bytes(encode(batch))


def read_dump(path) -> VoxelBatch:
    return decode(Path(path).read_bytes())
