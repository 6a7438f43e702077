"""
Binary portable anymap files: P5 (graymap) and P6 (pixmap), 8-bit only.
"""
import typing as t
from pathlib import Path

import numpy as np

from .errors import ParseError


def encode(img: np.ndarray) -> bytes:
    img = np.asarray(img)
    if img.dtype != np.uint8:
        raise ValueError(f"PNM images must be uint8, got {img.dtype}")
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[:, :, 0]

    if img.ndim == 2:
        tag = b"P5"
    elif img.ndim == 3 and img.shape[2] == 3:
        tag = b"P6"
    else:
        raise ValueError(f"can't encode image of shape {img.shape}")

    height, width = img.shape[:2]
    header = b"%s\n%d %d\n255\n" % (tag, width, height)
    return header + np.ascontiguousarray(img).tobytes()


def write_pnm(path: Path, img: np.ndarray) -> Path:
    path = Path(path)
    path.write_bytes(encode(img))
    return path


def _tokens(raw: bytes, count: int, path: t.Any) -> t.Tuple[t.List[bytes], int]:
    """Read `count` whitespace-separated header tokens, skipping # comments."""
    out = []
    pos = 0
    while len(out) < count:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ParseError("truncated PNM header", path, pos)
        out.append(raw[start:pos])
    # Exactly one whitespace byte separates the header from the raster.
    return out, pos + 1


def decode(raw: bytes, path: t.Any = None) -> np.ndarray:
    (tag, w, h, maxval), offset = _tokens(raw, 4, path)
    channels = {b"P5": 1, b"P6": 3}.get(tag)
    if channels is None:
        raise ParseError(f"unsupported PNM tag {tag!r}", path, 0)
    if int(maxval) != 255:
        raise ParseError(f"only 8-bit PNM is supported, maxval {int(maxval)}", path, 0)

    width, height = int(w), int(h)
    size = width * height * channels
    if len(raw) - offset < size:
        raise ParseError("truncated PNM raster", path, len(raw))
    img = np.frombuffer(raw, dtype=np.uint8, count=size, offset=offset)
    if channels == 1:
        return img.reshape(height, width)
    return img.reshape(height, width, 3)


def read_pnm(path: Path) -> np.ndarray:
    return decode(Path(path).read_bytes(), path)
