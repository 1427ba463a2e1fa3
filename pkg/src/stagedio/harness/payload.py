"""Counter-based payload bytes.

Every byte is a pure function of (seed, generation, absolute file offset), so the
expected content of any range can be recomputed without storing it. The
generation changes between rewrites of the same range, which makes stale data
detectable.
"""

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _splitmix(x):
    x = (x ^ (x >> np.uint64(30))) * _M1
    x = (x ^ (x >> np.uint64(27))) * _M2
    return x ^ (x >> np.uint64(31))


def payload(seed, generation, offset, length):
    """Bytes ``[offset, offset + length)``; byte ``o`` is byte ``o % 8`` of the
    little-endian mix of word ``o // 8``."""
    if length == 0:
        return b""
    first, last = offset // 8, (offset + length - 1) // 8
    with np.errstate(over="ignore"):
        key = _splitmix(np.uint64(seed & 0xFFFFFFFFFFFFFFFF) * _GOLDEN + np.uint64(generation))
        words = np.arange(first, last + 1, dtype=np.uint64)
        mixed = _splitmix(words * _GOLDEN ^ key).astype("<u8")
    start = offset - first * 8
    return mixed.view(np.uint8)[start:start + length].tobytes()
