"""Radially decreasing kernels evaluated from precomputed distances.

Every kernel maps a distance to a value in [0, 1] that decreases with
distance and increases with the bandwidth.  Each family consumes a
different distance: squared L2 for the gaussian kernel, plain L2 for the
exponential kernel, L1 for the laplacian kernel.  Values are always
computed in double precision regardless of the input dtype; results that
underflow the double range come back as exactly 0.0.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

__all__ = ["KernelFamily", "KernelSpec", "kernel_from_distance", "kernel_pair"]


class KernelFamily(str, enum.Enum):
    """Kernel families, named as they appear in CLI flags and config files."""

    EXPONENTIAL = "exponential"
    GAUSSIAN = "gaussian"
    LAPLACIAN = "laplacian"

    @property
    def metric(self) -> str:
        """Distance this family consumes: "l2", "sql2" or "l1"."""
        return _METRIC[self]


_METRIC = {
    KernelFamily.EXPONENTIAL: "l2",
    KernelFamily.GAUSSIAN: "sql2",
    KernelFamily.LAPLACIAN: "l1",
}


@dataclass(frozen=True)
class KernelSpec:
    """A kernel family together with a bandwidth h > 0.

    The bandwidth is in the same units as coordinate distances and acts as
    a pure scaling factor on them.
    """

    family: KernelFamily
    bandwidth: float

    def __post_init__(self):
        object.__setattr__(self, "family", KernelFamily(self.family))
        h = float(self.bandwidth)
        if not math.isfinite(h) or h <= 0.0:
            raise ValueError(f"bandwidth must be positive and finite, got {self.bandwidth!r}")
        object.__setattr__(self, "bandwidth", h)

    @property
    def metric(self) -> str:
        return self.family.metric


def kernel_from_distance(spec: KernelSpec, dist):
    """Evaluate the kernel on one distance or an array of distances.

    `dist` must already be the metric the family consumes (squared L2 for
    gaussian, L2 for exponential, L1 for laplacian).  Scalar input yields a
    float, array input an ndarray of float64.
    """
    scalar = np.isscalar(dist) or np.ndim(dist) == 0
    d = np.asarray(dist, dtype=np.float64)
    if not np.all(np.isfinite(d)):
        raise ValueError("distance must be finite")
    if np.any(d < 0.0):
        raise ValueError("distance must be nonnegative")
    h = spec.bandwidth
    if spec.family is KernelFamily.GAUSSIAN:
        out = np.exp(-d / (2.0 * h * h))
    else:
        out = np.exp(-d / h)
    return float(out) if scalar else out


def kernel_pair(spec: KernelSpec, x, y) -> float:
    """Kernel value between two points, using the family's own metric.

    Distances are accumulated in double precision even for single
    precision inputs.
    """
    xv = np.asarray(x, dtype=np.float64).ravel()
    yv = np.asarray(y, dtype=np.float64).ravel()
    if xv.shape != yv.shape:
        raise ValueError(f"dimension mismatch: {xv.shape[0]} vs {yv.shape[0]}")
    if xv.size == 0:
        raise ValueError("vectors must have dimension >= 1")
    diff = xv - yv
    metric = spec.metric
    if metric == "sql2":
        dist = float(diff @ diff)
    elif metric == "l2":
        dist = math.sqrt(float(diff @ diff))
    else:
        dist = float(np.abs(diff).sum())
    return kernel_from_distance(spec, dist)
