"""Reader and writer for the ``.hlt`` dense tensor format.

Layout (all little-endian)::

    b"HLT1" | u32 ndim | ndim x u32 extents | prod(extents) x f32, row-major
"""

import struct

import numpy as np

MAGIC = b"HLT1"


class FormatError(ValueError):
    """Malformed file; the message names the file and the byte offset."""


def encode(array):
    a = np.array(array, dtype="<f4", order="C")
    head = MAGIC + struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape)
    return head + a.tobytes()


def decode(buf, name="<bytes>"):
    if len(buf) < 8:
        raise FormatError(f"{name}: truncated header at offset {len(buf)} (need 8 bytes)")
    if buf[:4] != MAGIC:
        raise FormatError(f"{name}: bad magic {buf[:4]!r} at offset 0")
    (ndim,) = struct.unpack_from("<I", buf, 4)
    end = 8 + 4 * ndim
    if len(buf) < end:
        raise FormatError(f"{name}: truncated extents at offset {len(buf)} (need {end} bytes)")
    shape = struct.unpack_from(f"<{ndim}I", buf, 8)
    count = int(np.prod(shape, dtype=np.int64))
    need = end + 4 * count
    if len(buf) != need:
        kind = "truncated data" if len(buf) < need else "trailing bytes"
        raise FormatError(f"{name}: {kind} at offset {min(len(buf), need)} (expected {need} bytes, got {len(buf)})")
    return np.frombuffer(buf, dtype="<f4", count=count, offset=end).astype(np.float32).reshape(shape)


def save(path, array):
    with open(path, "wb") as fh:
        fh.write(encode(array))


def load(path):
    with open(path, "rb") as fh:
        return decode(fh.read(), str(path))
