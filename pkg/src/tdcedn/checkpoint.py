"""Binary record files used for network checkpoints and optimizer state.

Layout (little-endian)::

    b"TDCEDN01"  u32 version  u8 precision  u32 record_count
    record*: u16 name_len, name (utf-8), u8 rank, u32 dim * rank, raw payload
    u32 CRC-32 of every preceding byte
"""
from __future__ import annotations

import struct
import zlib
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .tensor import Precision

MAGIC = b"TDCEDN01"
VERSION = 1


class CheckpointError(Exception):
    """Base class for unreadable or incompatible checkpoint files."""


class ChecksumError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class SchemaError(CheckpointError):
    """Record names or shapes do not match the target network."""


def write_records(path, precision: Precision, records) -> None:
    dtype = precision.dtype.newbyteorder("<")
    chunks = [MAGIC, struct.pack("<IBI", VERSION, precision.tag, len(records))]
    for name, arr in records:
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype=dtype).tobytes())
    body = b"".join(chunks)
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def read_records(path) -> tuple[Precision, "OrderedDict[str, np.ndarray]"]:
    blob = Path(path).read_bytes()
    if len(blob) < len(MAGIC) + 13:
        raise ChecksumError(f"{path}: file too short to be a checkpoint")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumError(f"{path}: CRC mismatch (file corrupted or truncated)")
    if body[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {body[:8]!r}")
    version, tag, count = struct.unpack_from("<IBI", body, 8)
    if version != VERSION:
        raise VersionError(f"{path}: checkpoint version {version}, expected {VERSION}")
    precision = Precision.from_tag(tag)
    dtype = precision.dtype.newbyteorder("<")
    pos = 8 + 9
    records: OrderedDict[str, np.ndarray] = OrderedDict()
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos : pos + name_len].decode("utf-8")
            pos += name_len
            (rank,) = struct.unpack_from("<B", body, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", body, pos)
            pos += 4 * rank
            size = int(np.prod(shape)) * dtype.itemsize
            if pos + size > len(body):
                raise CheckpointError(f"{path}: record {name!r} runs past end of file")
            arr = np.frombuffer(body, dtype=dtype, count=int(np.prod(shape)), offset=pos)
            records[name] = arr.reshape(shape).astype(precision.dtype)
            pos += size
    except struct.error as exc:
        raise CheckpointError(f"{path}: malformed record table") from exc
    if pos != len(body):
        raise CheckpointError(f"{path}: {len(body) - pos} trailing bytes after records")
    return precision, records
