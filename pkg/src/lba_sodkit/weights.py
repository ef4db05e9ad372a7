"""Binary weights file.

Layout, all integers little-endian::

    b"LBAW" | u16 version | u32 entry count
    per entry: u16 name length | name (utf-8) | u8 dtype tag | u8 rank
               | u32 dim * rank | raw little-endian values
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .layers import ParamStore

MAGIC = b"LBAW"
VERSION = 1
DTYPE_TAGS = {1: np.dtype("<f8"), 2: np.dtype("<f4")}
_TAG_OF = {np.dtype("<f8"): 1, np.dtype("<f4"): 2}


class WeightsFormatError(ValueError):
    pass


class BadMagicError(WeightsFormatError):
    pass


class UnsupportedVersionError(WeightsFormatError):
    pass


class TruncatedWeightsError(WeightsFormatError):
    pass


def encode_weights(arrays: dict[str, np.ndarray], version: int = VERSION) -> bytes:
    parts = [MAGIC, struct.pack("<HI", version, len(arrays))]
    for name, a in arrays.items():
        a = np.asarray(a)
        dt = a.dtype.newbyteorder("<")
        if dt not in _TAG_OF:
            raise TypeError(f"{name}: unsupported dtype {a.dtype}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<BB", _TAG_OF[dt], a.ndim))
        parts.append(struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(np.ascontiguousarray(a, dtype=dt).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedWeightsError(f"truncated file while reading {what}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_weights(data: bytes) -> dict[str, np.ndarray]:
    if data[:4] != MAGIC:
        raise BadMagicError("bad magic")
    r = _Reader(data)
    r.take(4, "magic")
    (version,) = r.unpack("<H", "version")
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported version {version}")
    (count,) = r.unpack("<I", "entry count")
    out: dict[str, np.ndarray] = {}
    for k in range(count):
        (n,) = r.unpack("<H", f"entry {k} name length")
        name = r.take(n, f"entry {k} name").decode("utf-8")
        tag, rank = r.unpack("<BB", f"{name} header")
        if tag not in DTYPE_TAGS:
            raise WeightsFormatError(f"{name}: unknown dtype tag {tag}")
        dims = r.unpack(f"<{rank}I", f"{name} dims")
        dt = DTYPE_TAGS[tag]
        raw = r.take(int(np.prod(dims, dtype=np.int64)) * dt.itemsize, f"{name} values")
        out[name] = np.frombuffer(raw, dtype=dt).reshape(dims).copy()
    if r.pos != len(data):
        raise WeightsFormatError(f"{len(data) - r.pos} trailing bytes")
    return out


def save_weights(params: ParamStore, path) -> None:
    Path(path).write_bytes(encode_weights(params.arrays()))


def load_weights(path) -> ParamStore:
    P = ParamStore()
    for name, a in decode_weights(Path(path).read_bytes()).items():
        P.add(name, a)
    return P
