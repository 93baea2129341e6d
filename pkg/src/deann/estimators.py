"""KDE estimators: exact, uniform sampling, permuted sampling, and the
combined neighbor-plus-sampling estimator.

The combined estimator (``deann``) asks a black-box nearest-neighbor
index for up to k near points X1, evaluates their kernel contribution
exactly, and estimates the contribution of the remainder X2 = X \\ X1
from m random samples drawn strictly inside X2.  The two parts are
weighted by the actual partition sizes,

    value = (k_hat / n) * Z1 + ((n - k_hat) / n) * Z2,

where k_hat is the number of neighbors actually returned.  Weighting by
k_hat rather than the requested k keeps the estimator unbiased whenever
m > 0, no matter how poor the neighbor set is.  With m = 0 the remainder
is dropped entirely; that estimate is biased low and flagged as
truncated.  With k = 0 the index is never queried and the estimator
degenerates to plain random sampling.

Two samplers are supported for X2:

* uniform with replacement (``rng=``): indices are drawn uniformly from
  the whole dataset and members of X1 are rejected and redrawn, which is
  exact X2-restricted sampling with expected overhead n / (n - k_hat);
* permuted contiguous (``rsp_state=``): a cursor walks a pre-permuted
  copy of the data, skipping rows whose original index lies in X1, which
  for a single query is sampling without replacement.  If fewer than m
  rows of X2 exist, one full pass (an exact Z2) is taken and the
  estimate is flagged as clamped.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import Dataset, PermutedDataset, permute
from .distance import batch_sqdist, window_ranges, window_sqdist
from .kernels import KernelFamily, KernelSpec, kernel_from_distance

__all__ = [
    "Estimate",
    "BatchKde",
    "RspState",
    "naive_kde",
    "rs_kde",
    "rsp_kde",
    "deann",
    "deann_batch",
]

# cap on entries of a temporary distance block (float64)
_BLOCK_ENTRIES = 4_000_000


@dataclass
class Estimate:
    """A single KDE estimate plus its cost counters.

    kernel_evals always equals neighbors_used + samples_used.  `truncated`
    marks the biased m = 0 variant that drops the remainder; `clamped`
    marks a permuted-sampling call that exhausted the remainder in one
    full pass (so Z2 was exact).
    """

    value: float
    kernel_evals: int
    neighbors_used: int
    samples_used: int
    truncated: bool = False
    clamped: bool = False


@dataclass
class BatchKde:
    """Exact KDE values for a query batch plus the total kernel-eval count."""

    values: np.ndarray
    kernel_evals: int


@dataclass
class RspState:
    """Permuted copy of the data plus the running cursor of the sampler."""

    permuted: PermutedDataset
    cursor: int = 0

    @classmethod
    def from_dataset(cls, dataset: Dataset, seed: int, cursor: int = 0) -> "RspState":
        return cls(permuted=permute(dataset, seed), cursor=cursor)

    @property
    def n(self) -> int:
        return self.permuted.n


def _kernel_from_sql2(spec: KernelSpec, d2: np.ndarray) -> np.ndarray:
    """Kernel values from squared L2 distances for the L2-metric families."""
    if spec.family is KernelFamily.GAUSSIAN:
        return kernel_from_distance(spec, d2)
    return kernel_from_distance(spec, np.sqrt(d2))


def _kernel_rows(dataset: Dataset, spec: KernelSpec, rows: np.ndarray, query64: np.ndarray) -> np.ndarray:
    """Kernel values between `query64` and the given dataset rows."""
    if len(rows) == 0:
        return np.empty(0, dtype=np.float64)
    x = dataset.data64()[rows]
    if spec.metric == "l1":
        dist = np.abs(x - query64).sum(axis=1)
        return kernel_from_distance(spec, dist)
    d2 = x @ query64
    d2 *= -2.0
    d2 += dataset.sq_norms[rows]
    d2 += float(query64 @ query64)
    np.maximum(d2, 0.0, out=d2)
    return _kernel_from_sql2(spec, d2)


def naive_kde(dataset: Dataset, kernel: KernelSpec, queries) -> BatchKde:
    """Exact KDE of every query against the full dataset.

    L2-metric kernels go through the batched matrix-product distances; the
    laplacian kernel takes a direct L1 pass.  Query blocks are sized so
    temporaries stay bounded.  Accumulation is double precision.
    """
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    if q.shape[1] != dataset.d:
        raise ValueError(f"dimension mismatch: queries d={q.shape[1]}, dataset d={dataset.d}")
    n = dataset.n
    values = np.empty(q.shape[0], dtype=np.float64)
    if kernel.metric == "l1":
        x64 = dataset.data64()
        step = max(1, _BLOCK_ENTRIES // dataset.d)
        for j, y in enumerate(q):
            acc = 0.0
            for lo in range(0, n, step):
                dist = np.abs(x64[lo : lo + step] - y).sum(axis=1)
                acc += float(kernel_from_distance(kernel, dist).sum())
            values[j] = acc / n
        return BatchKde(values=values, kernel_evals=q.shape[0] * n)
    block = max(1, _BLOCK_ENTRIES // n)
    for lo in range(0, q.shape[0], block):
        hi = min(q.shape[0], lo + block)
        d2 = batch_sqdist(q[lo:hi], dataset).values
        values[lo:hi] = _kernel_from_sql2(kernel, d2).mean(axis=1)
    return BatchKde(values=values, kernel_evals=q.shape[0] * n)


def rs_kde(dataset: Dataset, kernel: KernelSpec, query, m: int, rng: np.random.Generator) -> Estimate:
    """Uniform sampling with replacement: mean kernel value over m draws."""
    if m < 1:
        raise ValueError(f"m={m} must be >= 1")
    y = np.asarray(query, dtype=np.float64).ravel()
    draws = rng.integers(0, dataset.n, size=m)
    vals = _kernel_rows(dataset, kernel, draws, y)
    return Estimate(
        value=float(vals.mean()),
        kernel_evals=m,
        neighbors_used=0,
        samples_used=m,
    )


def _window_kernel_sum(state: RspState, kernel: KernelSpec, query64: np.ndarray, start: int, count: int) -> float:
    """Kernel-value sum over `count` consecutive permuted rows from `start`."""
    base = state.permuted.base
    if kernel.metric == "l1":
        total = 0.0
        for lo, hi in window_ranges(base.n, start, count):
            dist = np.abs(base.data64()[lo:hi] - query64).sum(axis=1)
            total += float(kernel_from_distance(kernel, dist).sum())
        return total
    d2 = window_sqdist(state.permuted, start, count, query64)
    return float(_kernel_from_sql2(kernel, d2).sum())


def rsp_kde(state: RspState, kernel: KernelSpec, query, m: int) -> Estimate:
    """Permuted contiguous sampling: mean kernel value over the next m
    permuted rows, wrapping mod n; advances the cursor by m.

    For a single query this is sampling without replacement; m = n is an
    exact full pass.
    """
    n = state.n
    if not 1 <= m <= n:
        raise ValueError(f"m={m} out of range [1, {n}]")
    y = np.asarray(query, dtype=np.float64).ravel()
    if y.shape[0] != state.permuted.base.d:
        raise ValueError(f"dimension mismatch: query d={y.shape[0]}, dataset d={state.permuted.base.d}")
    total = _window_kernel_sum(state, kernel, y, state.cursor, m)
    state.cursor = (state.cursor + m) % n
    return Estimate(
        value=total / m,
        kernel_evals=m,
        neighbors_used=0,
        samples_used=m,
    )


def _rs_excluding(
    dataset: Dataset,
    kernel: KernelSpec,
    query64: np.ndarray,
    m: int,
    rng: np.random.Generator,
    exclude: np.ndarray | None,
    n_excluded: int,
) -> tuple[float, int]:
    """Mean kernel value over m uniform draws restricted to the complement
    of `exclude` (rejection sampling, with replacement)."""
    n = dataset.n
    total = 0.0
    accepted = 0
    while accepted < m:
        need = m - accepted
        if n_excluded == 0:
            batch = need
        else:
            # expected overshoot covers the rejection rate; capped so a
            # nearly-excluded dataset iterates instead of allocating n*m
            batch = min(math.ceil(need * n / (n - n_excluded)) + 8, max(4 * need, 65536))
        draws = rng.integers(0, n, size=batch)
        if n_excluded:
            draws = draws[~exclude[draws]]
        draws = draws[:need]
        if len(draws) == 0:
            continue
        total += float(_kernel_rows(dataset, kernel, draws, query64).sum())
        accepted += len(draws)
    return total / m, m


def _block_kernel_values(base: Dataset, kernel: KernelSpec, query64: np.ndarray, lo: int, hi: int) -> np.ndarray:
    """Kernel values for the contiguous row block [lo, hi) via one matvec."""
    if kernel.metric == "l1":
        dist = np.abs(base.data64()[lo:hi] - query64).sum(axis=1)
        return kernel_from_distance(kernel, dist)
    d2 = base.data64()[lo:hi] @ query64
    d2 *= -2.0
    d2 += base.sq_norms[lo:hi]
    d2 += float(query64 @ query64)
    np.maximum(d2, 0.0, out=d2)
    return _kernel_from_sql2(kernel, d2)


def _rsp_excluding(
    state: RspState,
    kernel: KernelSpec,
    query64: np.ndarray,
    m: int,
    exclude: np.ndarray | None,
    n_excluded: int,
) -> tuple[float, int, bool]:
    """Walk the permuted rows from the cursor, skipping excluded original
    indices, until m rows are accepted or a full pass completes.

    The cursor advances past skipped rows as well.  Returns the mean over
    the accepted rows, their count, and whether the walk was clamped to a
    full pass (fewer than m rows of the remainder exist).  Each window
    block is evaluated with one streaming matvec and excluded rows are
    masked from the result, so skips cost no extra memory passes.
    """
    n = state.n
    if n_excluded == 0:
        # no exclusions: identical to the plain contiguous window
        count = min(m, n)
        total = _window_kernel_sum(state, kernel, query64, state.cursor, count)
        state.cursor = (state.cursor + count) % n
        return total / count, count, count < m

    perm = state.permuted.permutation
    base = state.permuted.base
    advanced = 0  # rows consumed so far, accepted and skipped alike
    taken = 0
    total = 0.0
    while taken < m and advanced < n:
        pos = (state.cursor + advanced) % n
        chunk = min(n - advanced, max(m - taken + 64, 64))
        consumed = chunk
        for lo, hi in window_ranges(n, pos, chunk):
            keep = ~exclude[perm[lo:hi]]
            kept = int(np.count_nonzero(keep))
            need = m - taken
            if kept >= need:
                cut = int(np.flatnonzero(keep)[need - 1]) + 1
                keep = keep[:cut]
                hi = lo + cut
                consumed = (lo - pos) % n + cut
                kept = need
            if kept:
                vals = _block_kernel_values(base, kernel, query64, lo, hi)
                total += float(vals[keep].sum())
                taken += kept
            if taken == m:
                break
        advanced += consumed
    state.cursor = (state.cursor + advanced) % n
    if taken == 0:
        return 0.0, 0, True
    return total / taken, taken, taken < m


def deann(
    dataset: Dataset,
    kernel: KernelSpec,
    ann,
    query,
    k: int,
    m: int,
    *,
    rng: np.random.Generator | None = None,
    rsp_state: RspState | None = None,
) -> Estimate:
    """Combined estimator: exact near part from the ANN, sampled far part.

    Exactly one of `rng` (uniform sampler) or `rsp_state` (permuted
    sampler) must be given when m > 0.  `ann` may be None when k = 0.
    """
    n = dataset.n
    if not 0 <= k <= n:
        raise ValueError(f"k={k} out of range [0, {n}]")
    if m < 0:
        raise ValueError(f"m={m} must be >= 0")
    if m > 0 and k >= n:
        raise ValueError("m > 0 requires k + 1 <= n so the remainder is nonempty")
    if m > 0 and (rng is None) == (rsp_state is None):
        raise ValueError("give exactly one of rng= or rsp_state= when m > 0")
    if rsp_state is not None and rsp_state.n != n:
        raise ValueError("rsp_state was built for a different dataset size")
    y = np.asarray(query, dtype=np.float64).ravel()
    if y.shape[0] != dataset.d:
        raise ValueError(f"dimension mismatch: query d={y.shape[0]}, dataset d={dataset.d}")

    if k > 0:
        neighbors = ann.query(y, k)
        x1 = np.asarray(neighbors.indices, dtype=np.int64)
    else:
        neighbors = None
        x1 = np.empty(0, dtype=np.int64)
    k_hat = len(x1)
    if k_hat == 0:
        z1 = 0.0
    elif kernel.metric == "l1":
        # index distances are L2; the laplacian kernel needs L1 recomputed
        z1 = float(_kernel_rows(dataset, kernel, x1, y).mean())
    else:
        # the index contract guarantees sq_distances match recomputation
        z1 = float(_kernel_from_sql2(kernel, neighbors.sq_distances).mean())

    if m == 0:
        return Estimate(
            value=(k_hat / n) * z1,
            kernel_evals=k_hat,
            neighbors_used=k_hat,
            samples_used=0,
            truncated=k_hat < n,
        )

    if k_hat:
        exclude = np.zeros(n, dtype=bool)
        exclude[x1] = True
    else:
        exclude = None
    if rng is not None:
        z2, used = _rs_excluding(dataset, kernel, y, m, rng, exclude, k_hat)
        clamped = False
    else:
        z2, used, clamped = _rsp_excluding(rsp_state, kernel, y, m, exclude, k_hat)
    value = (k_hat / n) * z1 + ((n - k_hat) / n) * z2
    return Estimate(
        value=value,
        kernel_evals=k_hat + used,
        neighbors_used=k_hat,
        samples_used=used,
        clamped=clamped,
    )


def deann_batch(
    dataset: Dataset,
    kernel: KernelSpec,
    ann,
    queries,
    k: int,
    m: int,
    *,
    rng: np.random.Generator | None = None,
    rsp_state: RspState | None = None,
    independent_cursors: bool = False,
) -> list[Estimate]:
    """Evaluate a query batch in order.

    With a permuted sampler the single shared state is threaded through
    the batch, so later queries see the cursor where earlier ones left it
    (estimates are then not independent across queries).  Passing
    `independent_cursors=True` instead gives query j its own cursor at
    offset floor(j * n / N) into the shared permutation.
    """
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    out = []
    n_queries = q.shape[0]
    for j in range(n_queries):
        state = rsp_state
        if rsp_state is not None and independent_cursors:
            state = RspState(permuted=rsp_state.permuted, cursor=(j * rsp_state.n) // n_queries)
        out.append(deann(dataset, kernel, ann, q[j], k, m, rng=rng, rsp_state=state))
    return out
