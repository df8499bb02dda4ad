"""Shared little-endian reader for the binary container formats."""

from __future__ import annotations

import struct

import numpy as np

from .errors import FormatError


class Reader:
    """Sequential reader that turns truncation into a FormatError naming the
    file and offset instead of a silent short read."""

    def __init__(self, data: bytes, path):
        self.data = data
        self.off = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.data):
            raise FormatError(f"{self.path}: unexpected end of container at byte {self.off}")
        chunk = self.data[self.off : self.off + n]
        self.off += n
        return chunk

    def u8(self) -> int:
        return self.take(1)[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def array(self, dtype, count: int) -> np.ndarray:
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(dt.itemsize * count), dtype=dt).copy()

    def expect_end(self) -> None:
        if self.off != len(self.data):
            raise FormatError(
                f"{self.path}: {len(self.data) - self.off} trailing bytes after last field"
            )
