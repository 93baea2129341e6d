"""Computable theory formulas and error metrics.

Covers the uniform-sampling sample-size bound and its reduction under
near-neighbor domination, the power-law model of distances to the
rank-k neighbor, the bandwidth regimes that model implies for the
gaussian kernel, the median nearest-neighbor bandwidth rule, binary
search for a bandwidth hitting a target median KDE, and relative-error
reporting with a floor below which queries are excluded.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .distance import batch_sqdist
from .estimators import naive_kde
from .kernels import KernelFamily, KernelSpec, kernel_from_distance

__all__ = [
    "PowerLawFit",
    "BandwidthRegimes",
    "ErrorReport",
    "NoBandwidthError",
    "rs_sample_size",
    "domination_delta",
    "dominated_sample_size",
    "knn_rank_profile",
    "fit_power_law",
    "power_law_bandwidth_regimes",
    "median_rule_bandwidth",
    "fit_bandwidth",
    "relative_error",
]

DEFAULT_KDE_FLOOR = 1e-16

# full N x n distance caches above this many entries are recomputed in
# blocks instead of held in memory
_CACHE_LIMIT = 50_000_000


class NoBandwidthError(RuntimeError):
    """No bandwidth can reach the requested target median KDE."""

    def __init__(self, target: float, low: float, high: float):
        self.target = target
        self.achievable = (low, high)
        super().__init__(
            f"target median KDE {target:g} unreachable; achievable range is [{low:g}, {high:g})"
        )


@dataclass
class PowerLawFit:
    """Least-squares fit of avg squared distance to rank r as alpha*(r/n)^beta."""

    alpha: float
    beta: float
    rms_log_residual: float


@dataclass
class BandwidthRegimes:
    """Gaussian-kernel bandwidth markers under a power-law distance profile.

    h_dominated: scale where a polylogarithmic number of nearest neighbors
    carries almost all kernel mass.  h_low_ceiling: at or below this scale
    the KDE cannot exceed tau.  h_high_floor: at or above this scale the
    KDE is at least 1 - delta.
    """

    h_dominated: float
    h_low_ceiling: float
    h_high_floor: float


@dataclass
class ErrorReport:
    """Per-query relative errors over queries whose exact KDE clears the floor."""

    per_query_rel_err: np.ndarray
    mean_rel_err: float
    excluded_count: int


def rs_sample_size(eps: float, tau: float, fail_prob: float) -> int:
    """Samples sufficient for a (1+eps)-approximation of KDE values >= tau,
    failing with probability at most fail_prob: ceil(3 ln(1/fail_prob) / (eps^2 tau))."""
    if not (eps > 0 and math.isfinite(eps)):
        raise ValueError(f"eps must be positive and finite, got {eps}")
    if not 0 < tau <= 1:
        raise ValueError(f"tau must be in (0, 1], got {tau}")
    if not 0 < fail_prob < 1:
        raise ValueError(f"fail_prob must be in (0, 1), got {fail_prob}")
    return math.ceil(3.0 * math.log(1.0 / fail_prob) / (eps * eps * tau))


def dominated_sample_size(eps: float, tau: float, delta: float, fail_prob: float) -> int:
    """Sample count when the k nearest neighbors already carry a (1-delta)
    fraction of the kernel mass: a delta-fraction of :func:`rs_sample_size`."""
    if not 0 < delta <= 1:
        raise ValueError(f"delta must be in (0, 1], got {delta}")
    if not (eps > 0 and math.isfinite(eps)):
        raise ValueError(f"eps must be positive and finite, got {eps}")
    if not 0 < tau <= 1:
        raise ValueError(f"tau must be in (0, 1], got {tau}")
    if not 0 < fail_prob < 1:
        raise ValueError(f"fail_prob must be in (0, 1), got {fail_prob}")
    return math.ceil(3.0 * math.log(1.0 / fail_prob) * delta / (eps * eps * tau))


def domination_delta(dataset: Dataset, kernel: KernelSpec, query, k: int) -> float:
    """Fraction of total kernel mass NOT carried by the k nearest neighbors.

    Nearness is measured by the kernel itself (largest values first, ties
    by lower index), so the result is exact for any family.  A zero total
    mass is reported as delta = 1 with a warning.
    """
    n = dataset.n
    if not 0 <= k <= n:
        raise ValueError(f"k={k} out of range [0, {n}]")
    y = np.asarray(query, dtype=np.float64).ravel()
    if kernel.metric == "l1":
        vals = kernel_from_distance(kernel, np.abs(dataset.data64() - y).sum(axis=1))
    else:
        d2 = batch_sqdist(y.reshape(1, -1), dataset).values[0]
        if kernel.family is KernelFamily.GAUSSIAN:
            vals = kernel_from_distance(kernel, d2)
        else:
            vals = kernel_from_distance(kernel, np.sqrt(d2))
    total = float(vals.sum())
    if total <= 0.0:
        warnings.warn("total kernel mass is zero; domination delta defined as 1")
        return 1.0
    if k == 0:
        return 1.0
    top = np.sort(vals)[::-1][:k]
    delta = 1.0 - float(top.sum()) / total
    return min(max(delta, 0.0), 1.0)


def knn_rank_profile(dataset: Dataset, queries, max_rank: int) -> np.ndarray:
    """Average squared distance to the rank-r neighbor over a query set,
    for r = 1 .. max_rank."""
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    if not 1 <= max_rank <= dataset.n:
        raise ValueError(f"max_rank={max_rank} out of range [1, {dataset.n}]")
    d2 = batch_sqdist(q, dataset).values
    d2.partition(max_rank - 1, axis=1)
    top = np.sort(d2[:, :max_rank], axis=1)
    return top.mean(axis=0)


def fit_power_law(knn_sq_distances, n: int) -> PowerLawFit:
    """Fit log(avg sq distance at rank r) = log(alpha) + beta log(r/n).

    `knn_sq_distances[r-1]` is the per-rank average for rank r; at least
    two ranks are required and all averages must be positive.
    """
    dists = np.asarray(knn_sq_distances, dtype=np.float64)
    if dists.ndim != 1 or len(dists) < 2:
        raise ValueError("need per-rank averages for at least two ranks")
    if np.any(dists <= 0):
        raise ValueError("per-rank average squared distances must be positive")
    ranks = np.arange(1, len(dists) + 1, dtype=np.float64)
    x = np.log(ranks / n)
    ylog = np.log(dists)
    coeffs = np.polyfit(x, ylog, 1)
    beta = float(coeffs[0])
    alpha = float(math.exp(coeffs[1]))
    resid = ylog - np.polyval(coeffs, x)
    return PowerLawFit(
        alpha=alpha,
        beta=beta,
        rms_log_residual=float(np.sqrt(np.mean(resid**2))),
    )


def power_law_bandwidth_regimes(
    alpha: float, beta: float, n: int, tau: float, delta: float
) -> BandwidthRegimes:
    """Bandwidth markers for the gaussian kernel on a power-law distance
    profile with squared rank-r distance alpha*(r/n)^beta."""
    if alpha <= 0 or beta <= 0 or n < 1:
        raise ValueError("alpha, beta must be positive and n >= 1")
    if not 0 < tau < 1 or not 0 < delta < 1:
        raise ValueError("tau and delta must be in (0, 1)")
    h_dom_sq = (alpha / 2.0) * n ** (-beta)
    return BandwidthRegimes(
        h_dominated=math.sqrt(h_dom_sq),
        h_low_ceiling=math.sqrt(h_dom_sq / math.log(1.0 / tau)),
        h_high_floor=math.sqrt(alpha / (2.0 * beta * math.log(1.0 / (1.0 - delta)))),
    )


def _lower_median(values: np.ndarray) -> float:
    ordered = np.sort(values)
    return float(ordered[(len(ordered) - 1) // 2])


def median_rule_bandwidth(dataset: Dataset, sample_size: int, seed: int) -> float:
    """Median L2 distance from a seeded point sample to each point's nearest
    other point; the usual rule-of-thumb bandwidth."""
    n = dataset.n
    if n < 2:
        raise ValueError(f"need n >= 2, got {n}")
    rng = np.random.default_rng(seed)
    size = min(sample_size, n)
    picks = np.sort(rng.choice(n, size=size, replace=False))
    d2 = batch_sqdist(dataset.data64()[picks], dataset).values
    d2[np.arange(size), picks] = np.inf  # a point is not its own neighbor
    nn = np.sqrt(d2.min(axis=1))
    h = _lower_median(nn)
    if h == 0.0:
        warnings.warn("median nearest-neighbor distance is zero; degenerate bandwidth")
    return h


def _median_kde_fn(train: Dataset, queries: np.ndarray, family: KernelFamily):
    """Closure h -> lower median of the exact KDE over `queries`.

    The metric distances do not depend on h, so they are computed once and
    cached when they fit in memory; otherwise each call recomputes in
    blocks through naive_kde.
    """
    n_entries = queries.shape[0] * train.n
    if n_entries > _CACHE_LIMIT:
        def median_kde(h: float) -> float:
            batch = naive_kde(train, KernelSpec(family, h), queries)
            return _lower_median(batch.values)

        return median_kde

    if family is KernelFamily.LAPLACIAN:
        dist = np.abs(queries[:, None, :] - train.data64()[None, :, :]).sum(axis=2)
    else:
        dist = batch_sqdist(queries, train).values
        if family is not KernelFamily.GAUSSIAN:
            np.sqrt(dist, out=dist)

    def median_kde(h: float) -> float:
        if family is KernelFamily.GAUSSIAN:
            vals = np.exp(dist / (-2.0 * h * h))
        else:
            vals = np.exp(dist / (-h))
        return _lower_median(vals.mean(axis=1))

    return median_kde


def fit_bandwidth(
    train: Dataset,
    validation_queries,
    kernel_family,
    target_mu: float,
    rel_tol: float = 0.01,
    max_iter: int = 200,
) -> float:
    """Bandwidth whose median exact KDE over the validation queries matches
    target_mu within rel_tol, found by bracket expansion plus bisection.

    The median KDE is monotone nondecreasing in h for every family here,
    which justifies bisection.  Raises :class:`NoBandwidthError` when even
    a vanishing bandwidth leaves the median above the target (duplicate
    points force a positive floor).
    """
    family = KernelFamily(kernel_family)
    if not 0 < target_mu < 1:
        raise ValueError(f"target_mu must be in (0, 1), got {target_mu}")
    queries = np.atleast_2d(np.asarray(validation_queries, dtype=np.float64))
    if queries.shape[0] < 1:
        raise ValueError("validation query set must be nonempty")
    median_kde = _median_kde_fn(train, queries, family)

    # bracket seed: median pairwise distance over a small sample of train rows
    rng = np.random.default_rng(0)
    picks = rng.choice(train.n, size=min(100, train.n), replace=False)
    sample = train.data64()[picks]
    if family is KernelFamily.LAPLACIAN:
        pair = np.abs(sample[:, None, :] - sample[None, :, :]).sum(axis=2)
    else:
        pair = np.sqrt(np.maximum(
            np.add.outer(np.einsum("ij,ij->i", sample, sample),
                         np.einsum("ij,ij->i", sample, sample))
            - 2.0 * (sample @ sample.T), 0.0))
    off_diag = pair[~np.eye(len(sample), dtype=bool)]
    scale = _lower_median(off_diag) if off_diag.size else 1.0
    if scale <= 0.0:
        scale = 1.0

    h_lo = 1e-9 * scale
    med_lo = median_kde(h_lo)
    if abs(med_lo - target_mu) <= rel_tol * target_mu:
        return h_lo
    if med_lo > target_mu:
        raise NoBandwidthError(target_mu, med_lo, 1.0)

    h_hi = scale
    med_hi = median_kde(h_hi)
    doublings = 0
    while med_hi < target_mu and doublings < 64:
        h_lo = h_hi  # tighten the lower side as the bracket expands
        h_hi *= 2.0
        med_hi = median_kde(h_hi)
        doublings += 1
    if med_hi < target_mu:
        raise NoBandwidthError(target_mu, med_lo, med_hi)

    for _ in range(max_iter):
        h_mid = math.sqrt(h_lo * h_hi)  # geometric midpoint suits the huge bracket
        med = median_kde(h_mid)
        if abs(med - target_mu) <= rel_tol * target_mu:
            return h_mid
        if med < target_mu:
            h_lo = h_mid
        else:
            h_hi = h_mid
    raise NoBandwidthError(target_mu, median_kde(h_lo), median_kde(h_hi))


def relative_error(estimates, exact, floor: float = DEFAULT_KDE_FLOOR) -> ErrorReport:
    """Per-query |Z - mu| / mu over queries with mu >= floor.

    Queries whose exact value falls below the floor are excluded from the
    mean and counted in excluded_count.
    """
    z = np.asarray(estimates, dtype=np.float64).ravel()
    mu = np.asarray(exact, dtype=np.float64).ravel()
    if z.shape != mu.shape:
        raise ValueError(f"length mismatch: {z.shape[0]} estimates vs {mu.shape[0]} exact values")
    included = mu >= floor
    rel = np.abs(z[included] - mu[included]) / mu[included]
    mean = float(rel.mean()) if rel.size else float("nan")
    return ErrorReport(
        per_query_rel_err=rel,
        mean_rel_err=mean,
        excluded_count=int((~included).sum()),
    )
