"""Deterministic float64 tensor helpers and a portable seeded RNG.

Tensors are plain ``numpy.ndarray`` objects of dtype float64 in C (row-major)
order. The RNG is SplitMix64 feeding Box-Muller, so a given seed produces the
same stream on every platform without depending on numpy's generators.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

_GAMMA = 0x9E3779B97F4A7C15
_MASK64 = (1 << 64) - 1


def as_tensor(x, ndim: int | None = None) -> np.ndarray:
    if type(x) is np.ndarray and x.dtype == np.float64 and x.flags.c_contiguous and (ndim is None or x.ndim == ndim):
        return x
    a = np.ascontiguousarray(x, dtype=np.float64)
    if ndim is not None and a.ndim != ndim:
        raise ShapeError(f"expected a {ndim}-d tensor, got shape {a.shape}")
    return a


def matmul(a, b) -> np.ndarray:
    a = as_tensor(a, 2)
    b = as_tensor(b, 2)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def softmax_rows(a) -> np.ndarray:
    a = as_tensor(a, 2)
    z = a - a.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def splitmix64(state: int) -> tuple[int, int]:
    """One scalar SplitMix64 step. Returns ``(new_state, output)``."""
    state = (state + _GAMMA) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, z ^ (z >> 31)


def _splitmix_block(state: int, n: int) -> np.ndarray:
    # SplitMix64 is counter based: output i depends only on state + (i+1)*gamma,
    # which lets the whole block be produced with wrapping uint64 array math.
    with np.errstate(over="ignore"):
        z = np.uint64(state) + np.arange(1, n + 1, dtype=np.uint64) * np.uint64(_GAMMA)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))


@dataclass
class SeededRng:
    """SplitMix64 state. Single owner; every draw advances ``state``."""

    state: int

    def __post_init__(self):
        self.state = int(self.state) & _MASK64

    def next_u64(self, n: int) -> np.ndarray:
        out = _splitmix_block(self.state, n)
        self.state = (self.state + n * _GAMMA) & _MASK64
        return out

    def uniform(self, n: int) -> np.ndarray:
        """Uniform variates on (0, 1], 53 bits each."""
        bits = self.next_u64(n) >> np.uint64(11)
        return (bits.astype(np.float64) + 1.0) * 2.0**-53


def rng_normal(rng: SeededRng, n: int) -> np.ndarray:
    """Draw ``n`` standard normals by Box-Muller over pairs of uniforms.

    An odd ``n`` still consumes a full pair; the sine half is discarded.
    """
    if n < 0:
        raise ValueError("n must be non-negative")
    if n == 0:
        return np.zeros(0)
    pairs = (n + 1) // 2
    u = rng.uniform(2 * pairs)
    r = np.sqrt(-2.0 * np.log(u[0::2]))
    theta = 2.0 * np.pi * u[1::2]
    out = np.empty(2 * pairs)
    out[0::2] = r * np.cos(theta)
    out[1::2] = r * np.sin(theta)
    return out[:n]


def seeded_normal(seed: int, shape, scale: float = 1.0) -> np.ndarray:
    shape = tuple(shape) if np.ndim(shape) else (int(shape),)
    n = int(np.prod(shape))
    return (rng_normal(SeededRng(seed), n) * scale).reshape(shape)
