"""Counter-based 64-bit PRNG used everywhere randomness is needed.

SplitMix64 evaluated as a pure function of (seed, counter), so any draw is
reproducible in isolation and across platforms. Constants are the standard
SplitMix64 ones:

    increment 0x9E3779B97F4A7C15
    mix1      0xBF58476D1CE4E5B9  (after z ^= z >> 30)
    mix2      0x94D049BB133111EB  (after z ^= z >> 27)
    final     z ^= z >> 31

Uniform doubles take the top 53 bits: (z >> 11) * 2**-53. Gaussian draws use
the Irwin-Hall sum of 12 uniforms minus 6, which involves only additions and
therefore carries no libm portability risk.
"""

from __future__ import annotations

import numpy as np

_INC = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_MASK = np.uint64(0xFFFFFFFFFFFFFFFF)


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def raw64(seed: int, start: int, n: int) -> np.ndarray:
    """n consecutive 64-bit words for counters start..start+n-1."""
    counters = np.arange(start + 1, start + n + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        return _mix((np.uint64(seed & 0xFFFFFFFFFFFFFFFF) + counters * _INC) & _MASK)


def uniforms(seed: int, start: int, n: int) -> np.ndarray:
    """n doubles in [0, 1)."""
    return (raw64(seed, start, n) >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)


def gaussians(seed: int, start: int, n: int) -> np.ndarray:
    """n approximately standard-normal doubles (Irwin-Hall, 12 uniforms each).

    Draw i consumes counters start + 12*i .. start + 12*i + 11.
    """
    u = uniforms(seed, start, 12 * n).reshape(n, 12)
    return u.sum(axis=1) - 6.0


def derive(seed: int, *tags: int) -> int:
    """A child seed from a parent seed and integer tags (order-sensitive)."""
    z = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
    with np.errstate(over="ignore"):
        for t in tags:
            z = _mix((z + np.uint64(t & 0xFFFFFFFFFFFFFFFF) * _INC + _INC) & _MASK)
    return int(z)


def permutation(n: int, seed: int) -> np.ndarray:
    """Fisher-Yates permutation of range(n) driven by the counter stream."""
    perm = np.arange(n)
    if n < 2:
        return perm
    words = raw64(seed, 0, n - 1)
    for i in range(n - 1, 0, -1):
        j = int(words[n - 1 - i] % np.uint64(i + 1))
        perm[i], perm[j] = perm[j], perm[i]
    return perm


def sample_without_replacement(n: int, k: int, seed: int) -> np.ndarray:
    """k distinct indices from range(n), in ascending order."""
    if not 0 <= k <= n:
        raise ValueError(f"cannot sample {k} from {n}")
    return np.sort(permutation(n, seed)[:k])
