"""Counter-based Gaussian streams.

Every random number in the package is a pure function of
``(seed, stream, index, position)``.  The Philox block cipher supplies the
bits; position ``i`` of a stream always uses raw words ``2i`` and ``2i+1``,
so a prefix of a longer draw is bit-identical to a shorter draw and any
window can be fetched without generating what precedes it.
"""

from __future__ import annotations

import numpy as np

# stream tags, kept in the top byte of the second key word
INCREMENTS = 0
INITIALS = 1
MONTE_CARLO = 2
PAIRS = 3

_MASK64 = (1 << 64) - 1
_INDEX_BITS = 56
_TWO_PI = 2.0 * np.pi
_INV_2_53 = 1.0 / 9007199254740992.0


def _key(seed: int, stream: int, index: int) -> np.ndarray:
    if index < 0 or index >= (1 << _INDEX_BITS):
        raise ValueError(f"stream index out of range: {index}")
    if not 0 <= stream < 256:
        raise ValueError(f"stream tag out of range: {stream}")
    return np.array([seed & _MASK64, (stream << _INDEX_BITS) | index], dtype=np.uint64)


def raw_words(seed: int, stream: int, index: int, count: int, start: int = 0) -> np.ndarray:
    """Return ``count`` raw 64-bit words starting at word ``start``."""
    bitgen = np.random.Philox(key=_key(seed, stream, index))
    if start:
        # Philox emits four words per counter increment
        block, offset = divmod(start, 4)
        bitgen.advance(block)
        words = bitgen.random_raw(count + offset)
        return np.asarray(words[offset:], dtype=np.uint64)
    return np.asarray(bitgen.random_raw(count), dtype=np.uint64)


def normals(seed: int, stream: int, index: int, count: int, start: int = 0) -> np.ndarray:
    """Standard normal variates at positions ``start .. start+count-1``.

    Box-Muller on two 53-bit uniforms per variate; only the cosine branch is
    used so that each position owns exactly two words.
    """
    if count == 0:
        return np.empty(0)
    words = raw_words(seed, stream, index, 2 * count, start=2 * start)
    u1 = ((words[0::2] >> np.uint64(11)).astype(np.float64) + 1.0) * _INV_2_53
    u2 = (words[1::2] >> np.uint64(11)).astype(np.float64) * _INV_2_53
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(_TWO_PI * u2)


def uniforms(seed: int, stream: int, index: int, count: int) -> np.ndarray:
    """Uniform variates on [0, 1) with 53-bit resolution."""
    words = raw_words(seed, stream, index, count)
    return (words >> np.uint64(11)).astype(np.float64) * _INV_2_53


def gaussian_points(seed: int, index: int, n: int, d: int, stream: int = INITIALS) -> np.ndarray:
    """``n`` points of the standard Gaussian measure on R^d, shape (n, d)."""
    return normals(seed, stream, index, n * d).reshape(n, d)
