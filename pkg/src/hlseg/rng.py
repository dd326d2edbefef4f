"""Counter-based splitmix64 generator.

Every random draw in the package goes through this module so that a given
integer seed produces the same numbers on every platform, independent of
numpy's own generators.  A stream is identified by a 64-bit key; the n-th
value of a stream is ``mix(key + (n + 1) * GOLDEN)``.
"""

import numpy as np

GOLDEN = 0x9E3779B97F4A7C15
_MASK = (1 << 64) - 1


def _mix_scalar(z):
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9 & _MASK
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB & _MASK
    return z ^ (z >> 31)


def _mix(z):
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def derive_key(seed, *labels):
    """Fold integers and strings into a stream key."""
    key = _mix_scalar((int(seed) * GOLDEN + 0x632BE59BD9B4E019) & _MASK)
    for label in labels:
        if isinstance(label, str):
            v = 0
            for ch in label.encode("utf-8"):
                v = (v * 131 + ch) & _MASK
        else:
            v = int(label) & _MASK
        key = _mix_scalar((key ^ v) * GOLDEN + 1 & _MASK)
    return key


class SplitMix64:
    """Sequential view over a counter-based stream."""

    def __init__(self, seed, *labels):
        self.key = derive_key(seed, *labels)
        self.counter = 0

    def raw(self, n):
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            return _mix(np.uint64(self.key) + idx * np.uint64(GOLDEN))

    def uniform(self, n=None, low=0.0, high=1.0):
        """Floats in [low, high) with 53 random bits."""
        count = 1 if n is None else int(np.prod(n))
        u = (self.raw(count) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
        u = low + (high - low) * u
        if n is None:
            return float(u[0])
        return u.reshape(n)

    def integers(self, low, high, n=None):
        """Integers in [low, high), via floor of a uniform draw."""
        u = self.uniform(n)
        out = np.floor(low + (high - low) * np.asarray(u)).astype(np.int64)
        out = np.minimum(out, high - 1)
        if n is None:
            return int(out)
        return out

    def normal(self, n=None):
        """Standard normals by Box-Muller (one uniform pair per value)."""
        count = 1 if n is None else int(np.prod(n))
        u = self.uniform(2 * count)
        u1 = 1.0 - u[0::2]  # (0, 1]
        u2 = u[1::2]
        z = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
        if n is None:
            return float(z[0])
        return z.reshape(n)

    def next_seed(self):
        return int(self.raw(1)[0] & np.uint64(0x7FFFFFFF))
