"""
Little-endian binary reading with byte-offset error reporting.
Shared by the EXB1 store, ICLF checkpoint and ICLS suite formats.
"""
import struct

import numpy as np

from src.utils.errors import FormatError


class BinaryReader:
    """Sequential reader over an in-memory buffer that tracks its offset."""

    def __init__(self, data: bytes, label: str = "file"):
        self.data = data
        self.offset = 0
        self.label = label

    def remaining(self) -> int:
        return len(self.data) - self.offset

    def _take(self, n: int, what: str) -> bytes:
        if self.remaining() < n:
            raise FormatError(
                f"{self.label}: truncated while reading {what} "
                f"(need {n} bytes, {self.remaining()} left)",
                offset=self.offset,
            )
        chunk = self.data[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def expect_magic(self, magic: bytes):
        start = self.offset
        got = self._take(len(magic), "magic")
        if got != magic:
            raise FormatError(f"{self.label}: bad magic {got!r}, expected {magic!r}", offset=start)

    def u8(self, what: str = "u8") -> int:
        return self._take(1, what)[0]

    def u16(self, what: str = "u16") -> int:
        return struct.unpack("<H", self._take(2, what))[0]

    def u32(self, what: str = "u32") -> int:
        return struct.unpack("<I", self._take(4, what))[0]

    def u64(self, what: str = "u64") -> int:
        return struct.unpack("<Q", self._take(8, what))[0]

    def raw(self, n: int, what: str = "bytes") -> bytes:
        return self._take(n, what)

    def array(self, dtype, count: int, what: str = "payload") -> np.ndarray:
        dt = np.dtype(dtype).newbyteorder("<")
        buf = self._take(dt.itemsize * count, what)
        return np.frombuffer(buf, dtype=dt, count=count).astype(dt.newbyteorder("="))

    def done(self):
        if self.remaining():
            raise FormatError(f"{self.label}: {self.remaining()} trailing bytes", offset=self.offset)


class BinaryWriter:
    """Accumulates little-endian fields into a bytearray."""

    def __init__(self):
        self.buf = bytearray()

    def u8(self, v: int):
        self.buf += struct.pack("<B", v)

    def u16(self, v: int):
        self.buf += struct.pack("<H", v)

    def u32(self, v: int):
        self.buf += struct.pack("<I", v)

    def u64(self, v: int):
        self.buf += struct.pack("<Q", v)

    def raw(self, b: bytes):
        self.buf += b

    def array(self, arr: np.ndarray, dtype):
        self.buf += np.ascontiguousarray(arr, dtype=np.dtype(dtype).newbyteorder("<")).tobytes()

    def getvalue(self) -> bytes:
        return bytes(self.buf)
