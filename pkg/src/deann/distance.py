"""Scalar and batched squared Euclidean distances.

Batch distances use the inner-product identity

    ||q - x||^2 = ||q||^2 + ||x||^2 - 2 <q, x>

so the dominant cost is one matrix product, which BLAS executes as a
blocked/tiled kernel.  Inputs may be single precision; all products and
norms are accumulated in double precision.  Tiny negative results from
cancellation are clamped to zero; negatives beyond the clamp tolerance
indicate corrupt cached norms and raise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset, PermutedDataset

__all__ = ["DistanceMatrix", "NormConsistencyError", "sqdist", "batch_sqdist", "window_sqdist"]

# Entries below -CLAMP_REL * (squared-norm scale) are treated as corruption,
# not rounding.
CLAMP_REL = 1e-3


class NormConsistencyError(RuntimeError):
    """A batch distance came out far more negative than rounding can explain."""


@dataclass
class DistanceMatrix:
    """N x n double-precision squared L2 distances, clamped to be >= 0."""

    values: np.ndarray

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]


def sqdist(x, y) -> float:
    """Squared L2 distance with double accumulation; the scalar oracle."""
    xv = np.asarray(x, dtype=np.float64).ravel()
    yv = np.asarray(y, dtype=np.float64).ravel()
    if xv.shape != yv.shape:
        raise ValueError(f"dimension mismatch: {xv.shape[0]} vs {yv.shape[0]}")
    diff = xv - yv
    return float(diff @ diff)


def _clamp(d2: np.ndarray, scale: float) -> np.ndarray:
    tol = CLAMP_REL * max(scale, 1.0)
    worst = d2.min() if d2.size else 0.0
    if worst < -tol:
        raise NormConsistencyError(
            f"batch distance {worst:g} below clamp tolerance {-tol:g}; cached norms look corrupt"
        )
    np.maximum(d2, 0.0, out=d2)
    return d2


def batch_sqdist(queries, dataset: Dataset) -> DistanceMatrix:
    """All squared distances between query rows and dataset rows.

    `queries` is an N x d array.  The N x n result is exact up to rounding
    of the identity above; every entry is clamped to be nonnegative.
    """
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    if q.shape[1] != dataset.d:
        raise ValueError(f"dimension mismatch: queries d={q.shape[1]}, dataset d={dataset.d}")
    q_norms = np.einsum("ij,ij->i", q, q)
    x64 = dataset.data64()
    d2 = q @ x64.T
    d2 *= -2.0
    d2 += q_norms[:, None]
    d2 += dataset.sq_norms[None, :]
    scale = float(q_norms.max(initial=0.0) + dataset.sq_norms.max(initial=0.0))
    return DistanceMatrix(values=_clamp(d2, scale))


def window_ranges(n: int, start: int, count: int) -> list[tuple[int, int]]:
    """Contiguous [lo, hi) ranges covering `count` rows from `start` mod n."""
    if not 0 <= start < n:
        raise ValueError(f"start {start} out of range for n={n}")
    if not 1 <= count <= n:
        raise ValueError(f"count {count} out of range for n={n}")
    if start + count <= n:
        return [(start, start + count)]
    return [(start, n), (0, start + count - n)]


def window_sqdist(permuted: PermutedDataset, start: int, count: int, query) -> np.ndarray:
    """Squared distances from `query` to `count` consecutive permuted rows.

    Row indices run start, start+1, ... mod n, so the window wraps at most
    once and each contiguous block is evaluated with one matrix-vector
    product.
    """
    base = permuted.base
    y = np.asarray(query, dtype=np.float64).ravel()
    if y.shape[0] != base.d:
        raise ValueError(f"dimension mismatch: query d={y.shape[0]}, dataset d={base.d}")
    y_norm = float(y @ y)
    x64 = base.data64()
    out = np.empty(count, dtype=np.float64)
    filled = 0
    for lo, hi in window_ranges(base.n, start, count):
        block = x64[lo:hi]
        d2 = block @ y
        d2 *= -2.0
        d2 += base.sq_norms[lo:hi]
        d2 += y_norm
        out[filled : filled + (hi - lo)] = d2
        filled += hi - lo
    scale = float(base.sq_norms.max(initial=0.0) + y_norm)
    return _clamp(out, scale)
