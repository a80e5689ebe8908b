"""Portable, version-pinned pseudo-random streams.

Algorithm ``splitmix64/v1``:

* word ``i`` (0-based) of stream ``seed`` is ``mix(seed + (i + 1) * GAMMA)``
  with ``GAMMA = 0x9E3779B97F4A7C15`` and the standard splitmix64 finaliser,
  all arithmetic mod 2**64;
* uniforms are ``(word >> 11) * 2**-53``;
* normals use Box-Muller on consecutive uniform pairs ``(u1, u2)`` as
  ``sqrt(-2 ln(1 - u1)) * cos(2 pi u2)``;
* permutations are a Durstenfeld shuffle running ``i`` from ``n-1`` down to
  ``1``, swapping ``i`` with ``j = (word_k * (i + 1)) >> 64`` where ``k``
  counts draws from 0.

Anything that needs golden values across implementations uses this module
rather than numpy's generators, whose streams are not guaranteed stable.
"""

from __future__ import annotations

import numpy as np

ALGORITHM = "splitmix64/v1"

_MASK = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB


def _mix(z: int) -> int:
    z = ((z ^ (z >> 30)) * _M1) & _MASK
    z = ((z ^ (z >> 27)) * _M2) & _MASK
    return z ^ (z >> 31)


def words(seed: int, n: int, offset: int = 0) -> list[int]:
    """First ``n`` 64-bit words of stream ``seed`` starting at ``offset``."""
    base = seed & _MASK
    return [_mix((base + (offset + i + 1) * _GAMMA) & _MASK) for i in range(n)]


def _words_array(seed: int, n: int) -> np.ndarray:
    idx = np.arange(1, n + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = np.uint64(seed & _MASK) + idx * np.uint64(_GAMMA)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_M1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_M2)
    return z ^ (z >> np.uint64(31))


def uniforms(seed: int, n: int) -> np.ndarray:
    return (_words_array(seed, n) >> np.uint64(11)).astype(np.float64) * 2.0 ** -53


def normals(seed: int, shape, scale: float = 1.0) -> np.ndarray:
    shape = tuple(np.atleast_1d(shape)) if not isinstance(shape, tuple) else shape
    n = int(np.prod(shape)) if shape else 1
    u = uniforms(seed, 2 * n)
    u1, u2 = u[0::2], u[1::2]
    z = np.sqrt(-2.0 * np.log1p(-u1)) * np.cos(2.0 * np.pi * u2)
    return (scale * z).reshape(shape)


def permutation(n: int, seed: int) -> list[int]:
    perm = list(range(n))
    draws = words(seed, max(n - 1, 0))
    for k, i in enumerate(range(n - 1, 0, -1)):
        j = (draws[k] * (i + 1)) >> 64
        perm[i], perm[j] = perm[j], perm[i]
    return perm


def derive_seed(*parts: int) -> int:
    """Fold integers into one 64-bit seed (order-sensitive)."""
    acc = 0
    for p in parts:
        acc = _mix(((acc ^ (p & _MASK)) + _GAMMA) & _MASK)
    return acc
