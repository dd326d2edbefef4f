"""Binary 8-bit PGM (P5) and PPM (P6) files."""

import re

import numpy as np

from .hlt import FormatError

_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _header(buf, name):
    fields, pos = [], 0
    for _ in range(4):
        m = _TOKEN.match(buf, pos)
        if m is None:
            raise FormatError(f"{name}: truncated header at offset {pos}")
        fields.append(m.group(1))
        pos = m.end()
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise FormatError(f"{name}: missing whitespace after header at offset {pos}")
    magic, w, h, maxval = fields
    try:
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError:
        raise FormatError(f"{name}: non-numeric header field near offset {pos}") from None
    if maxval != 255:
        raise FormatError(f"{name}: only 8-bit files are supported (maxval {maxval}) at offset {pos}")
    return magic, w, h, pos + 1


def read(path):
    """Return uint8 array [H,W] for P5 or [H,W,3] for P6."""
    with open(path, "rb") as fh:
        buf = fh.read()
    name = str(path)
    magic, w, h, off = _header(buf, name)
    if magic == b"P5":
        shape = (h, w)
    elif magic == b"P6":
        shape = (h, w, 3)
    else:
        raise FormatError(f"{name}: unsupported magic {magic!r} at offset 0")
    need = off + int(np.prod(shape))
    if len(buf) != need:
        raise FormatError(f"{name}: pixel data ends at offset {len(buf)}, expected {need}")
    return np.frombuffer(buf, dtype=np.uint8, offset=off).reshape(shape).copy()


def write(path, pixels):
    """Write uint8 [H,W] as P5 or [H,W,3] as P6."""
    a = np.asarray(pixels)
    if a.dtype != np.uint8:
        raise TypeError(f"expected uint8 pixels, got {a.dtype}")
    if a.ndim == 2:
        magic = b"P5"
    elif a.ndim == 3 and a.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"cannot store an array of shape {a.shape} as PGM/PPM")
    h, w = a.shape[:2]
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(a).tobytes())
