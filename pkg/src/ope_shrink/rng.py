"""Counter-based seeding.

All randomness in the package is derived from an integer master seed plus
integer keys (context id, sample index, replicate index).  Nothing reads the
clock or OS entropy, so any run is reproducible regardless of worker count or
execution order.
"""
from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _to_u64(x) -> np.ndarray:
    arr = np.asarray(x)
    if arr.dtype.kind in "iu":
        return arr.astype(np.int64, copy=False).view(np.uint64) if arr.dtype.kind == "i" else arr.astype(np.uint64)
    raise TypeError(f"integer keys required, got dtype {arr.dtype}")


def mix64(x) -> np.ndarray:
    """SplitMix64 finalizer applied elementwise (wrapping uint64 arithmetic)."""
    z = np.atleast_1d(_to_u64(x)).copy()
    z += _GOLDEN
    z ^= z >> np.uint64(30)
    z *= _M1
    z ^= z >> np.uint64(27)
    z *= _M2
    z ^= z >> np.uint64(31)
    return z


def hash_keys(seed: int, keys, stream: int = 0) -> np.ndarray:
    """64-bit hash of ``(seed, stream, key)`` for every key in ``keys``."""
    h = mix64(np.uint64(seed % 2**64))
    h = mix64(h ^ np.uint64(stream % 2**64))
    return mix64(h ^ _to_u64(keys))


def uniform_from_keys(seed: int, keys, stream: int = 0) -> np.ndarray:
    """Deterministic Unif[0, 1) draws, one per key, independent across streams."""
    h = hash_keys(seed, keys, stream)
    return (h >> np.uint64(11)).astype(np.float64) * 2.0**-53


def child_rng(seed: int, *path: int) -> np.random.Generator:
    """Generator for a node of the seeding tree, e.g. ``child_rng(seed, cond, rep)``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed) % 2**64, *[int(p) for p in path]]))


def child_seed(seed: int, *path: int) -> int:
    return int(np.random.SeedSequence([int(seed) % 2**64, *[int(p) for p in path]]).generate_state(1, np.uint64)[0])


# stream ids, kept distinct so that e.g. softening noise and MRDR draws never alias
STREAM_SOFTEN = 1
STREAM_MRDR = 2
STREAM_EPSILON = 3
