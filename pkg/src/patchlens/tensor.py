"""Float32 tensor values, seeded random streams, and the shared statistics.

Tensors are plain numpy float32 arrays; every public operation here
accumulates in float64 regardless of storage precision. Random numbers come
from counter-based Philox streams so that one master seed plus a stream id
always reproduces the same values, on any platform, in any order of use.
"""
from __future__ import annotations

import math

import numpy as np

from .errors import DegenerateCorrelationError, NumericError

DTYPE = np.float32

# Children of stream s occupy s * 2**20 + 1 .. s * 2**20 + 2**20, so split()
# chains stay collision-free up to three levels for the stream ids used here.
_SPLIT_BASE = 1 << 20


class Rng:
    """One reproducible random stream, addressed by (seed, stream).

    Generator: numpy Philox4x64 keyed with (seed, stream), values drawn
    through numpy's Generator. Identical (seed, stream) pairs give bitwise
    identical sequences; distinct streams are statistically independent.
    An Rng is single-owner: share work across threads by deriving one
    stream per unit of work, never by sharing one instance.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream = int(stream) & 0xFFFFFFFFFFFFFFFF
        key = np.array([self.seed, self.stream], dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, stream={self.stream})"

    def spawn(self, stream: int) -> "Rng":
        """Fresh stream under the same master seed."""
        return Rng(self.seed, stream)

    def split(self, k: int) -> "Rng":
        """Child stream k of this stream (disjoint from other children)."""
        return Rng(self.seed, self.stream * _SPLIT_BASE + k + 1)

    def normal(self, mean: float, stddev: float, shape) -> np.ndarray:
        return self._gen.normal(mean, stddev, size=shape).astype(DTYPE)

    def uniform(self, low: float, high: float, shape=None) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def integers(self, low: int, high: int) -> int:
        """One integer in [low, high)."""
        return int(self._gen.integers(low, high))

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, seq):
        return seq[self.integers(0, len(seq))]


def gaussian_sample(rng: Rng, mean: float, stddev: float, shape) -> np.ndarray:
    """I.i.d. Normal(mean, stddev^2) draws as a float32 tensor.

    Consumes state from rng. stddev may be zero (degenerate point mass)
    but never negative.
    """
    if stddev < 0:
        raise ValueError(f"stddev must be nonnegative, got {stddev}")
    shape = tuple(int(s) for s in np.atleast_1d(shape))
    if len(shape) == 0 or any(s <= 0 for s in shape):
        raise ValueError(f"shape must be non-empty with positive extents, got {shape}")
    if not (math.isfinite(mean) and math.isfinite(stddev)):
        raise NumericError("gaussian_sample requires finite mean and stddev")
    return rng.normal(mean, stddev, shape)


def tensor_sum(t: np.ndarray) -> float:
    """Sum over all cells, accumulated in float64."""
    return float(np.sum(t, dtype=np.float64))


def variance(t: np.ndarray) -> float:
    """Population variance over all cells (two-pass, float64 accumulation)."""
    flat = np.asarray(t, dtype=np.float64).ravel()
    if flat.size == 0:
        raise ValueError("variance of an empty tensor is undefined")
    mean = flat.mean()
    dev = flat - mean
    return float(np.mean(dev * dev))


def pearson_abs(x, y) -> float:
    """Magnitude of the Pearson correlation coefficient, in [0, 1].

    Raises DegenerateCorrelationError when either sequence is constant;
    callers decide how degenerate neurons rank.
    """
    xa = np.asarray(x, dtype=np.float64).ravel()
    ya = np.asarray(y, dtype=np.float64).ravel()
    if xa.shape != ya.shape:
        raise ValueError(f"length mismatch: {xa.size} vs {ya.size}")
    if xa.size < 2:
        raise ValueError("correlation needs at least two points")
    dx = xa - xa.mean()
    dy = ya - ya.mean()
    sxx = float(np.dot(dx, dx))
    syy = float(np.dot(dy, dy))
    if sxx == 0.0 or syy == 0.0:
        raise DegenerateCorrelationError("zero-variance sequence in correlation")
    r = float(np.dot(dx, dy)) / math.sqrt(sxx * syy)
    return min(abs(r), 1.0)


def ensure_finite(arr: np.ndarray, context: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {context}")
