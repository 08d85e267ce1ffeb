# -*- coding: utf-8 -*-
"""
core.numerics - Dense arithmetic, stable nonlinearities and seedable randomness.

Every other module builds on these helpers. Arrays are plain float64 numpy
arrays in row-major order; randomness comes from counter-based Philox streams
addressed by (seed, stream id, child path) so any stream can be recreated
without replaying the ones before it.
"""
from __future__ import annotations

from itertools import combinations_with_replacement

import numpy as np

_SEED_MASK = (1 << 64) - 1


class ContractError(ValueError):
    """Raised when a caller violates a documented precondition (shape, range)."""


# ------------------------------------------------------------------ #
# Random source
# ------------------------------------------------------------------ #

class RandomSource:
    """Deterministic random stream identified by ``(seed, stream_id, path)``.

    Identical identifiers give identical draw sequences. ``child(i)`` derives
    an independent sub-stream without touching this stream's state, which is
    what keeps per-example and per-minibatch masks reproducible regardless of
    iteration order. Instances are single-owner.
    """

    def __init__(self, seed: int, stream_id: int = 0, path: tuple[int, ...] = ()):
        self.seed = int(seed) & _SEED_MASK
        self.stream_id = int(stream_id)
        self.path = tuple(int(p) for p in path)
        self._gen: np.random.Generator | None = None

    def __repr__(self) -> str:
        return f'RandomSource(seed={self.seed}, stream_id={self.stream_id}, path={self.path})'

    @property
    def generator(self) -> np.random.Generator:
        """The underlying numpy Generator (created on first use)."""
        if self._gen is None:
            ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream_id, *self.path))
            self._gen = np.random.Generator(np.random.Philox(ss))
        return self._gen

    def child(self, index: int) -> RandomSource:
        """Independent sub-stream; does not advance this stream."""
        return RandomSource(self.seed, self.stream_id, self.path + (int(index),))


# ------------------------------------------------------------------ #
# Elementwise nonlinearities
# ------------------------------------------------------------------ #

def sigmoid(x) -> np.ndarray:
    """Logistic function using the branch form that never overflows."""
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def log1p_exp(x) -> np.ndarray:
    """Softplus ``log(1 + e^x)`` as ``max(x, 0) + log1p(e^-|x|)``."""
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def logit(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


# ------------------------------------------------------------------ #
# Sampling
# ------------------------------------------------------------------ #

def bernoulli_sample(p, rng: RandomSource) -> np.ndarray:
    """Independent 0/1 draws, entry (i, j) is 1 with probability p[i, j]."""
    p = np.asarray(p, dtype=np.float64)
    if not np.all(np.isfinite(p)) or np.any(p < 0.0) or np.any(p > 1.0):
        raise ContractError('bernoulli_sample: probabilities must lie in [0, 1]')
    return (rng.generator.random(p.shape) < p).astype(np.float64)


# ------------------------------------------------------------------ #
# Linear algebra with shape contracts
# ------------------------------------------------------------------ #

def _as_matrix(a, name: str) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ContractError(f'{name}: expected a matrix, got shape {a.shape}')
    return a


def matmul(a, b) -> np.ndarray:
    a, b = _as_matrix(a, 'matmul'), _as_matrix(b, 'matmul')
    if a.shape[1] != b.shape[0]:
        raise ContractError(f'matmul: shape mismatch {a.shape} x {b.shape}')
    return a @ b


def transpose(a) -> np.ndarray:
    return np.ascontiguousarray(_as_matrix(a, 'transpose').T)


def _same_shape(op: str, a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError(f'{op}: shape mismatch {a.shape} vs {b.shape}')
    return a, b


def add(a, b) -> np.ndarray:
    a, b = _same_shape('add', a, b)
    return a + b


def sub(a, b) -> np.ndarray:
    a, b = _same_shape('sub', a, b)
    return a - b


def scale(a, s: float) -> np.ndarray:
    return np.asarray(a, dtype=np.float64) * float(s)


def hadamard(mask, w) -> np.ndarray:
    """Elementwise product, the masking operation ``m * W``."""
    mask, w = _same_shape('hadamard', mask, w)
    return mask * w


# ------------------------------------------------------------------ #
# Misc
# ------------------------------------------------------------------ #

def enumerate_binary(n: int) -> np.ndarray:
    """All 2**n binary vectors as rows, first unit as the most significant bit."""
    if n < 0:
        raise ContractError(f'enumerate_binary: n must be >= 0, got {n}')
    k = np.arange(2 ** n, dtype=np.int64)[:, None]
    shifts = np.arange(n - 1, -1, -1, dtype=np.int64)[None, :]
    return ((k >> shifts) & 1).astype(np.float64)


def ceil_count(fraction: float, n: int) -> int:
    """Exact count ``ceil(fraction * n)`` that ignores float noise (0.7 * 10 -> 7)."""
    return int(np.ceil(round(float(fraction) * n, 9)))


def enumerate_compositions(total: int, parts: int) -> np.ndarray:
    """All non-negative integer vectors of length *parts* summing to *total*."""
    if parts <= 0 or total < 0:
        raise ContractError(f'enumerate_compositions: bad arguments ({total}, {parts})')
    rows = [np.bincount(np.asarray(c, dtype=np.int64), minlength=parts)
            for c in combinations_with_replacement(range(parts), total)]
    if not rows:
        return np.zeros((1, parts))
    return np.asarray(rows, dtype=np.float64)
