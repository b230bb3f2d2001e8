"""
Reader and writer for the .ttg time-tag file.

Layout, little-endian:

    header   magic "TTG1" (4s) | version u16 | resolution_ps u32 |
             duration_ps u64 | record count u64                      26 bytes
    records  channel u8 | timestamp_ps u64                            9 bytes each

Records are stored sorted by (timestamp, channel).
"""

from __future__ import annotations

import logging
import os
import struct
from pathlib import Path

import numpy as np

from .core import TimeTagStream
from .errors import ContractError, TtgFormatError

logger = logging.getLogger(__name__)

MAGIC = b"TTG1"
VERSION = 1
HEADER = struct.Struct("<4sHIQQ")
RECORD_DTYPE = np.dtype([("channel", "<u1"), ("timestamp", "<u8")])

assert RECORD_DTYPE.itemsize == 9


def encode(stream: TimeTagStream) -> bytes:
    header = HEADER.pack(MAGIC, VERSION, stream.resolution_ps, stream.duration_ps, len(stream))
    records = np.empty(len(stream), dtype=RECORD_DTYPE)
    records["channel"] = stream.channels
    records["timestamp"] = stream.timestamps
    return header + records.tobytes()


def decode(data: bytes, source: str = "<bytes>") -> TimeTagStream:
    if len(data) < HEADER.size:
        raise TtgFormatError(f"{source}: truncated header ({len(data)} bytes)")
    magic, version, resolution_ps, duration_ps, count = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise TtgFormatError(f"{source}: bad magic {magic!r}")
    if version != VERSION:
        raise TtgFormatError(f"{source}: unsupported format version {version}")
    if resolution_ps != 1:
        raise TtgFormatError(f"{source}: unsupported resolution {resolution_ps} ps")

    expected = HEADER.size + count * RECORD_DTYPE.itemsize
    if len(data) != expected:
        raise TtgFormatError(
            f"{source}: expected {expected} bytes for {count} records, found {len(data)}"
        )

    records = np.frombuffer(data, dtype=RECORD_DTYPE, count=count, offset=HEADER.size)
    try:
        return TimeTagStream(records["timestamp"], records["channel"], duration_ps, resolution_ps)
    except ContractError as exc:
        raise TtgFormatError(f"{source}: {exc}") from exc


def write_ttg(path: str | os.PathLike, stream: TimeTagStream) -> Path:
    path = Path(path)
    try:
        path.write_bytes(encode(stream))
    except OSError as exc:
        raise OSError(f"cannot write time-tag file {path}: {exc.strerror}") from exc
    logger.info("wrote %d tags to %s", len(stream), path)
    return path


def read_ttg(path: str | os.PathLike) -> TimeTagStream:
    path = Path(path)
    stream = decode(path.read_bytes(), source=str(path))
    logger.info("read %d tags from %s", len(stream), path)
    return stream
