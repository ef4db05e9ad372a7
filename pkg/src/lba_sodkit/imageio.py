"""8-bit image reading and writing: binary PGM (P5) by hand, PNG through Pillow.

Planes are ``uint8`` arrays of shape (h, w); colour images are (h, w, 3).
"""
from __future__ import annotations

import re
from pathlib import Path

import numpy as np

SUPPORTED_EXTENSIONS = (".pgm", ".png")


class ImageFormatError(ValueError):
    """Base class for unreadable image files."""


class MalformedHeaderError(ImageFormatError):
    pass


class TruncatedPayloadError(ImageFormatError):
    pass


class UnsupportedDepthError(ImageFormatError):
    pass


_PGM_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def decode_pgm(data: bytes) -> np.ndarray:
    """Decode a binary P5 file with maxval 255."""
    pos = 0
    tokens = []
    for _ in range(4):
        m = _PGM_TOKEN.match(data, pos)
        if m is None:
            raise MalformedHeaderError("malformed header: incomplete PGM header")
        tokens.append(m.group(1))
        pos = m.end()
    if tokens[0] != b"P5":
        raise MalformedHeaderError(f"malformed header: magic {tokens[0][:8]!r} is not P5")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise MalformedHeaderError("malformed header: non-integer field") from None
    if w <= 0 or h <= 0:
        raise MalformedHeaderError(f"malformed header: bad size {w}x{h}")
    if maxval != 255:
        raise UnsupportedDepthError(f"unsupported maxval {maxval}")
    # exactly one whitespace byte separates the header from the samples
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise MalformedHeaderError("malformed header: missing separator before payload")
    payload = data[pos + 1:]
    if len(payload) < w * h:
        raise TruncatedPayloadError(f"truncated payload: {len(payload)} of {w * h} bytes")
    return np.frombuffer(payload, dtype=np.uint8, count=w * h).reshape(h, w).copy()


def encode_pgm(plane: np.ndarray) -> bytes:
    plane = _as_plane(plane)
    h, w = plane.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + plane.tobytes()


def _as_plane(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    if a.dtype != np.uint8:
        raise ValueError(f"expected uint8 samples, got {a.dtype}")
    if a.ndim != 2:
        raise ValueError(f"expected a single plane, got shape {a.shape}")
    return np.ascontiguousarray(a)


def _load_png(path: Path) -> np.ndarray:
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as im:
            if im.format != "PNG":
                raise MalformedHeaderError(f"malformed header: not a PNG ({im.format})")
            mode = im.mode
            if mode in ("I", "I;16", "I;16B", "I;16L", "F") or im.info.get("bits", 8) > 8:
                raise UnsupportedDepthError(f"unsupported bit depth ({mode})")
            if mode in ("1", "L", "P", "LA"):
                im = im.convert("L") if mode != "L" else im
            elif mode in ("RGB", "RGBA"):
                im = im.convert("RGB") if mode != "RGB" else im
            else:
                raise UnsupportedDepthError(f"unsupported bit depth ({mode})")
            im.load()
            return np.asarray(im, dtype=np.uint8).copy()
    except UnidentifiedImageError:
        raise MalformedHeaderError("malformed header: unrecognised PNG") from None
    except (OSError, SyntaxError) as exc:
        if isinstance(exc, ImageFormatError):
            raise
        raise TruncatedPayloadError(f"truncated payload: {exc}") from None


def load_image(path) -> np.ndarray:
    """Read a .pgm or .png file as (h, w) or (h, w, 3) uint8."""
    path = Path(path)
    ext = path.suffix.lower()
    if ext == ".pgm":
        return decode_pgm(path.read_bytes())
    if ext == ".png":
        return _load_png(path)
    raise ImageFormatError(f"unsupported extension {path.suffix!r}")


def load_gray(path) -> np.ndarray:
    """Single plane; colour files are reduced to ITU-R 601 luma."""
    a = load_image(path)
    if a.ndim == 3:
        luma = a.astype(np.float64) @ np.array([0.299, 0.587, 0.114])
        a = np.clip(np.floor(luma + 0.5), 0, 255).astype(np.uint8)
    return a


def load_rgb(path) -> np.ndarray:
    """Three planes; grayscale files are replicated."""
    a = load_image(path)
    if a.ndim == 2:
        a = np.repeat(a[:, :, None], 3, axis=2)
    return a


def save_image(path, array: np.ndarray) -> None:
    path = Path(path)
    a = np.asarray(array)
    if a.dtype != np.uint8:
        raise ValueError(f"expected uint8 samples, got {a.dtype}")
    ext = path.suffix.lower()
    if ext == ".pgm":
        path.write_bytes(encode_pgm(a))
    elif ext == ".png":
        from PIL import Image

        if a.ndim == 2 or (a.ndim == 3 and a.shape[2] == 3):
            Image.fromarray(np.ascontiguousarray(a)).save(path, format="PNG")
        else:
            raise ValueError(f"cannot write shape {a.shape} as PNG")
    else:
        raise ImageFormatError(f"unsupported extension {path.suffix!r}")


def quantize(p: np.ndarray) -> np.ndarray:
    """Map [0, 1] to 0..255, rounding halves away from zero."""
    x = np.clip(np.asarray(p, dtype=np.float64), 0.0, 1.0) * 255.0
    return np.floor(x + 0.5).astype(np.uint8)
