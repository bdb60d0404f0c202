"""Little-endian binary file helpers shared by the feature, embedding and
checkpoint formats.

Every on-disk format in this package starts with a 4-byte ASCII magic and a
u32 version, followed by format-specific header fields and float32 payloads.
"""

from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np


class FormatError(Exception):
    """Base class for binary format violations."""


class BadMagic(FormatError):
    """File does not start with the expected magic bytes."""


class VersionMismatch(FormatError):
    """File declares an unsupported format version."""


class TruncatedFile(FormatError):
    """File ends before the declared payload is complete."""


class CorruptTensor(FormatError):
    """A named tensor block is malformed or incomplete."""


def write_magic(fh: BinaryIO, magic: bytes, version: int = 1) -> None:
    if len(magic) != 4:
        raise ValueError("magic must be exactly 4 bytes")
    fh.write(magic)
    fh.write(struct.pack("<I", version))


def read_magic(fh: BinaryIO, magic: bytes, version: int = 1) -> None:
    got = fh.read(4)
    if len(got) < 4:
        raise TruncatedFile("file shorter than magic header")
    if got != magic:
        raise BadMagic(f"expected magic {magic!r}, found {got!r}")
    raw = fh.read(4)
    if len(raw) < 4:
        raise TruncatedFile("file ends inside version field")
    (got_version,) = struct.unpack("<I", raw)
    if got_version != version:
        raise VersionMismatch(f"unsupported version {got_version}, expected {version}")


def write_u32(fh: BinaryIO, value: int) -> None:
    fh.write(struct.pack("<I", value))


def read_u32(fh: BinaryIO) -> int:
    raw = fh.read(4)
    if len(raw) < 4:
        raise TruncatedFile("file ends inside u32 field")
    return struct.unpack("<I", raw)[0]


def write_f32_array(fh: BinaryIO, arr: np.ndarray) -> None:
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_f32_array(fh: BinaryIO, count: int) -> np.ndarray:
    raw = fh.read(4 * count)
    if len(raw) < 4 * count:
        raise TruncatedFile(f"expected {count} float32 values, payload is short")
    return np.frombuffer(raw, dtype="<f4", count=count).copy()
