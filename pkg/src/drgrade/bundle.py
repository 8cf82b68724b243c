"""Model bundle files: named float32 tensors with a CRC32 integrity check.

Layout (all integers little-endian u32):

    magic "DRNB" | version | block count
    per block: name length | name bytes (utf-8) | rank | dims... | f32 payload
    trailing CRC32 over every preceding byte

Blocks are written in sorted name order so identical tensors serialize to
identical bytes. Loading verifies magic, then the checksum, then the format
version, each with its own error type; values come back as float64 arrays
carrying exactly the stored float32 values.
"""

import struct
import zlib

import numpy as np

MAGIC = b"DRNB"
BUNDLE_VERSION = 1


class BundleError(Exception):
    pass


class MagicError(BundleError):
    pass


class FormatVersionError(BundleError):
    pass


class ChecksumError(BundleError):
    pass


class BlockError(BundleError):
    """Structurally malformed block table."""


def _u32(value: int) -> bytes:
    return struct.pack("<I", value)


def serialize_bundle(blocks: dict, version: int = BUNDLE_VERSION) -> bytes:
    out = bytearray(MAGIC)
    out += _u32(version)
    out += _u32(len(blocks))
    for name in sorted(blocks):
        arr = np.asarray(blocks[name], dtype=np.float64)
        encoded = name.encode("utf-8")
        out += _u32(len(encoded)) + encoded
        out += _u32(arr.ndim)
        for dim in arr.shape:
            out += _u32(dim)
        out += arr.astype("<f4").tobytes()
    out += _u32(zlib.crc32(bytes(out)) & 0xFFFFFFFF)
    return bytes(out)


def save_bundle(path, blocks: dict, version: int = BUNDLE_VERSION):
    with open(path, "wb") as fh:
        fh.write(serialize_bundle(blocks, version))


class _Cursor:
    def __init__(self, data: bytes, end: int):
        self.data = data
        self.end = end  # first byte past the block table
        self.pos = 12

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > self.end:
            raise BlockError(f"truncated block table reading {what} "
                             f"at byte {self.pos}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def deserialize_bundle(data: bytes):
    """bytes -> (version, {name: float64 array}). Checks magic, CRC, version."""
    if data[:4] != MAGIC:
        raise MagicError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    if len(data) < 16:
        raise BlockError(f"file too short ({len(data)} bytes)")
    stored = struct.unpack("<I", data[-4:])[0]
    actual = zlib.crc32(data[:-4]) & 0xFFFFFFFF
    if stored != actual:
        raise ChecksumError(f"CRC mismatch: stored {stored:#010x}, "
                            f"computed {actual:#010x}")
    version = struct.unpack("<I", data[4:8])[0]
    if version != BUNDLE_VERSION:
        raise FormatVersionError(f"format version {version}, "
                                 f"this reader handles {BUNDLE_VERSION}")
    count = struct.unpack("<I", data[8:12])[0]
    cur = _Cursor(data, len(data) - 4)
    blocks = {}
    for _ in range(count):
        name_len = cur.u32("name length")
        name = cur.take(name_len, "name").decode("utf-8")
        rank = cur.u32(f"rank of {name!r}")
        dims = tuple(cur.u32(f"dim of {name!r}") for _ in range(rank))
        n_values = 1
        for dim in dims:
            n_values *= dim
        payload = cur.take(4 * n_values, f"payload of {name!r}")
        if name in blocks:
            raise BlockError(f"duplicate block {name!r}")
        blocks[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float64)
    if cur.pos != cur.end:
        raise BlockError(f"{cur.end - cur.pos} unexplained bytes after last block")
    return version, blocks


def load_bundle(path):
    with open(path, "rb") as fh:
        data = fh.read()
    return deserialize_bundle(data)
