"""Nearest-neighbor layer: exact brute force and an inverted-file k-means index.

The combined estimator treats nearest-neighbor search as a black box
behind :class:`AnnIndex`; anything that can answer `query(y, k)` with a
:class:`NeighborList` plugs in.  Two implementations live here: exact
brute force, and an inverted file built by Lloyd's k-means that probes
the `n_probe` nearest clusters at query time.

Determinism rules used throughout:

* ties in distances are broken by the lower row/centroid index,
* empty clusters are permitted and never reseeded,
* a probe set smaller than k yields a shorter result, never an error
  and never sentinel indices.
"""

from __future__ import annotations

import abc
import struct
from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .distance import batch_sqdist

__all__ = [
    "NeighborList",
    "AnnIndex",
    "BruteForceIndex",
    "IvfIndex",
    "IvfAnnIndex",
    "brute_force_knn",
    "ivf_build",
    "ivf_query",
    "recall",
    "save_ivf_index",
    "load_ivf_index",
]

IVF_MAGIC = b"DEANNIVF"
IVF_VERSION = 1

KMEANS_MAX_ITER = 25
KMEANS_REL_TOL = 1e-4


@dataclass
class NeighborList:
    """Distinct dataset row indices with nondecreasing squared distances."""

    indices: np.ndarray
    sq_distances: np.ndarray

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.sq_distances = np.asarray(self.sq_distances, dtype=np.float64)
        if self.indices.shape != self.sq_distances.shape:
            raise ValueError("indices and sq_distances must have equal length")
        if len(np.unique(self.indices)) != len(self.indices):
            raise ValueError("neighbor indices must be distinct")
        if len(self.sq_distances) > 1 and np.any(np.diff(self.sq_distances) < 0):
            raise ValueError("sq_distances must be nondecreasing")

    def __len__(self) -> int:
        return len(self.indices)


class AnnIndex(abc.ABC):
    """Black-box k-NN interface: anything answering query(y, k) plugs in."""

    @abc.abstractmethod
    def query(self, query, k: int) -> NeighborList:
        """Return up to k near neighbors of `query`."""


def _query_sqdists(dataset: Dataset, query) -> np.ndarray:
    return batch_sqdist(np.asarray(query, dtype=np.float64).reshape(1, -1), dataset).values[0]


def _smallest_k(d2: np.ndarray, ids: np.ndarray, k: int) -> NeighborList:
    """k smallest entries of d2, ties broken by lower id.

    argpartition may split equal values arbitrarily across the cut, so the
    candidate set is widened to everything tied with the boundary value.
    The id-based lexsort only runs when equal distances actually occur.
    """
    k = min(k, len(d2))
    if k < len(d2):
        part = np.argpartition(d2, k - 1)[:k]
        boundary = d2[part].max()
        cand = np.flatnonzero(d2 <= boundary)
        cd = d2[cand]
    else:
        cand = np.arange(len(d2))
        cd = d2
    order = np.argsort(cd, kind="stable")
    if len(order) > 1 and np.any(np.diff(cd[order]) == 0.0):
        order = np.lexsort((ids[cand], cd))
    sel = cand[order[:k]]
    return NeighborList(indices=ids[sel], sq_distances=d2[sel])


def brute_force_knn(dataset: Dataset, query, k: int) -> NeighborList:
    """Exact k nearest rows by squared L2 distance."""
    if not 1 <= k <= dataset.n:
        raise ValueError(f"k={k} out of range [1, {dataset.n}]")
    d2 = _query_sqdists(dataset, query)
    ids = np.arange(dataset.n, dtype=np.int64)
    return _smallest_k(d2, ids, k)


class BruteForceIndex(AnnIndex):
    """Exact baseline wrapping :func:`brute_force_knn`."""

    def __init__(self, dataset: Dataset):
        self.dataset = dataset

    def query(self, query, k: int) -> NeighborList:
        return brute_force_knn(self.dataset, query, k)


@dataclass
class IvfIndex:
    """k-means centroids plus per-cluster member lists."""

    centroids: np.ndarray
    assignments: list[np.ndarray]
    seed: int

    @property
    def n_clusters(self) -> int:
        return self.centroids.shape[0]

    @property
    def d(self) -> int:
        return self.centroids.shape[1]


def _centroid_sqdists(x64: np.ndarray, sq_norms: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    c_norms = np.einsum("ij,ij->i", centroids, centroids)
    d2 = x64 @ centroids.T
    d2 *= -2.0
    d2 += sq_norms[:, None]
    d2 += c_norms[None, :]
    np.maximum(d2, 0.0, out=d2)
    return d2


def _kmeans_pp_init(x64: np.ndarray, n_clusters: int, rng: np.random.Generator) -> np.ndarray:
    n = x64.shape[0]
    centroids = np.empty((n_clusters, x64.shape[1]), dtype=np.float64)
    first = int(rng.integers(n))
    centroids[0] = x64[first]
    closest = np.einsum("ij,ij->i", x64 - centroids[0], x64 - centroids[0])
    for c in range(1, n_clusters):
        total = closest.sum()
        if total <= 0.0:
            # all remaining mass sits on existing centroids; fall back to uniform
            pick = int(rng.integers(n))
        else:
            pick = int(rng.choice(n, p=closest / total))
        centroids[c] = x64[pick]
        diff = x64 - centroids[c]
        np.minimum(closest, np.einsum("ij,ij->i", diff, diff), out=closest)
    return centroids


def ivf_build(dataset: Dataset, n_clusters: int, seed: int) -> IvfIndex:
    """Lloyd's k-means with k-means++ seeding; deterministic given seed.

    Iterates at most KMEANS_MAX_ITER times or until the within-cluster sum
    of squares decreases by less than KMEANS_REL_TOL relatively.  Each row
    is assigned to its nearest centroid, ties to the lower centroid index;
    a cluster that loses all members keeps its previous centroid.
    """
    n = dataset.n
    if not 1 <= n_clusters <= n:
        raise ValueError(f"n_clusters={n_clusters} out of range [1, {n}]")
    rng = np.random.default_rng(seed)
    x64 = dataset.data64()
    centroids = _kmeans_pp_init(x64, n_clusters, rng)
    prev_wcss = np.inf
    labels = None
    for _ in range(KMEANS_MAX_ITER):
        d2 = _centroid_sqdists(x64, dataset.sq_norms, centroids)
        labels = np.argmin(d2, axis=1)  # argmin takes the lowest index on ties
        wcss = float(d2[np.arange(n), labels].sum())
        for c in range(n_clusters):
            members = x64[labels == c]
            if len(members):
                centroids[c] = members.mean(axis=0)
        if prev_wcss - wcss <= KMEANS_REL_TOL * max(prev_wcss, 1e-300):
            break
        prev_wcss = wcss
    # final assignment against the final centroids
    d2 = _centroid_sqdists(x64, dataset.sq_norms, centroids)
    labels = np.argmin(d2, axis=1)
    assignments = [np.flatnonzero(labels == c).astype(np.int64) for c in range(n_clusters)]
    return IvfIndex(centroids=centroids, assignments=assignments, seed=seed)


def ivf_query(index: IvfIndex, dataset: Dataset, query, k: int, n_probe: int) -> NeighborList:
    """Exact k-NN restricted to the members of the n_probe nearest clusters.

    Returns fewer than k neighbors when the probed clusters hold fewer
    members; never returns duplicates or sentinels.
    """
    if k < 1:
        raise ValueError(f"k={k} must be >= 1")
    if not 1 <= n_probe <= index.n_clusters:
        raise ValueError(f"n_probe={n_probe} out of range [1, {index.n_clusters}]")
    y = np.asarray(query, dtype=np.float64).ravel()
    if y.shape[0] != index.d:
        raise ValueError(f"dimension mismatch: query d={y.shape[0]}, index d={index.d}")
    c_d2 = np.einsum("ij,ij->i", index.centroids - y, index.centroids - y)
    c_ids = np.arange(index.n_clusters, dtype=np.int64)
    probe = c_ids[np.lexsort((c_ids, c_d2))[:n_probe]]
    members = [index.assignments[c] for c in probe if len(index.assignments[c])]
    if not members:
        return NeighborList(indices=np.empty(0, np.int64), sq_distances=np.empty(0, np.float64))
    cand = np.concatenate(members)
    # norms identity keeps this one gather plus one matvec
    d2 = dataset.data64()[cand] @ y
    d2 *= -2.0
    d2 += dataset.sq_norms[cand]
    d2 += float(y @ y)
    np.maximum(d2, 0.0, out=d2)
    return _smallest_k(d2, cand, k)


class IvfAnnIndex(AnnIndex):
    """Binds an IvfIndex, its dataset, and a probe width to the query interface.

    Vectors are re-stored contiguously per cluster, the usual inverted-file
    layout, so probing streams whole blocks instead of gathering scattered
    rows.  Candidate ranking runs in single precision for throughput; the
    selected neighbors are then re-evaluated in double precision, so the
    returned sq_distances keep the recomputation contract.
    """

    def __init__(self, dataset: Dataset, index: IvfIndex, n_probe: int):
        if not 1 <= n_probe <= index.n_clusters:
            raise ValueError(f"n_probe={n_probe} out of range [1, {index.n_clusters}]")
        self.dataset = dataset
        self.index = index
        self.n_probe = n_probe
        order = np.concatenate([a for a in index.assignments]) if index.n_clusters else np.empty(0, np.int64)
        self._row_ids = np.ascontiguousarray(order, dtype=np.int64)
        self._vectors32 = np.ascontiguousarray(dataset.data[self._row_ids])
        self._norms32 = dataset.sq_norms[self._row_ids].astype(np.float32)
        sizes = np.array([len(a) for a in index.assignments], dtype=np.int64)
        self._offsets = np.concatenate([[0], np.cumsum(sizes)])
        self._centroid_norms = np.einsum("ij,ij->i", index.centroids, index.centroids)
        self._centroid_ids = np.arange(index.n_clusters, dtype=np.int64)

    @classmethod
    def build(cls, dataset: Dataset, n_clusters: int, seed: int, n_probe: int) -> "IvfAnnIndex":
        return cls(dataset, ivf_build(dataset, n_clusters, seed), n_probe)

    def _probe_clusters(self, y: np.ndarray) -> np.ndarray:
        c_d2 = self.index.centroids @ y
        c_d2 *= -2.0
        c_d2 += self._centroid_norms
        n_probe = self.n_probe
        if n_probe < len(c_d2):
            part = np.argpartition(c_d2, n_probe - 1)[:n_probe]
            boundary = c_d2[part].max()
            cand = np.flatnonzero(c_d2 <= boundary)
        else:
            cand = self._centroid_ids
        order = np.lexsort((self._centroid_ids[cand], c_d2[cand]))[:n_probe]
        return cand[order]

    def query(self, query, k: int) -> NeighborList:
        if k < 1:
            raise ValueError(f"k={k} must be >= 1")
        y = np.asarray(query, dtype=np.float64).ravel()
        if y.shape[0] != self.index.d:
            raise ValueError(f"dimension mismatch: query d={y.shape[0]}, index d={self.index.d}")
        probe = self._probe_clusters(y)
        blocks = [(self._offsets[c], self._offsets[c + 1]) for c in probe]
        blocks = [(lo, hi) for lo, hi in blocks if hi > lo]
        if not blocks:
            return NeighborList(indices=np.empty(0, np.int64), sq_distances=np.empty(0, np.float64))
        y32 = y.astype(np.float32)
        if len(blocks) == 1:
            lo, hi = blocks[0]
            d2 = self._vectors32[lo:hi] @ y32
            norms = self._norms32[lo:hi]
            ids = self._row_ids[lo:hi]
        else:
            d2 = np.concatenate([self._vectors32[lo:hi] @ y32 for lo, hi in blocks])
            norms = np.concatenate([self._norms32[lo:hi] for lo, hi in blocks])
            ids = np.concatenate([self._row_ids[lo:hi] for lo, hi in blocks])
        d2 = norms - np.float32(2.0) * d2
        # rank in single precision (the query norm shifts all entries
        # equally, so it cannot change the ranking and is omitted)
        k_sel = min(k, len(d2))
        if k_sel < len(d2):
            part = np.argpartition(d2, k_sel - 1)[:k_sel]
            boundary = d2[part].max()
            cand = np.flatnonzero(d2 <= boundary)
            order = np.argsort(d2[cand], kind="stable")[: k_sel]
            sel_ids = ids[cand[order]]
        else:
            sel_ids = ids
        # exact distances for the selected rows, deterministic final order
        x64 = self.dataset.data64()
        ex = x64[sel_ids] @ y
        ex *= -2.0
        ex += self.dataset.sq_norms[sel_ids]
        ex += float(y @ y)
        np.maximum(ex, 0.0, out=ex)
        return _smallest_k(ex, sel_ids, len(sel_ids))


def recall(approx: NeighborList, exact: NeighborList) -> float:
    """|approx intersect exact| / |exact|."""
    if len(exact) == 0:
        raise ValueError("exact neighbor list must be nonempty")
    hits = np.intersect1d(approx.indices, exact.indices).size
    return hits / len(exact)


def save_ivf_index(index: IvfIndex, path) -> None:
    """Versioned binary container; absence of a saved index is never an error."""
    with open(path, "wb") as f:
        f.write(IVF_MAGIC)
        f.write(struct.pack("<IIIQ", IVF_VERSION, index.n_clusters, index.d, index.seed))
        f.write(np.ascontiguousarray(index.centroids, dtype="<f8").tobytes())
        for members in index.assignments:
            f.write(struct.pack("<I", len(members)))
            f.write(np.ascontiguousarray(members, dtype="<u4").tobytes())


def load_ivf_index(path) -> IvfIndex:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != IVF_MAGIC:
            raise ValueError(f"{path}: bad index magic {magic!r}")
        version, n_clusters, d, seed = struct.unpack("<IIIQ", f.read(20))
        if version != IVF_VERSION:
            raise ValueError(f"{path}: unsupported index version {version}")
        centroids = np.frombuffer(f.read(n_clusters * d * 8), dtype="<f8").reshape(n_clusters, d)
        assignments = []
        for _ in range(n_clusters):
            (count,) = struct.unpack("<I", f.read(4))
            members = np.frombuffer(f.read(count * 4), dtype="<u4").astype(np.int64)
            assignments.append(members)
    return IvfIndex(centroids=centroids.copy(), assignments=assignments, seed=seed)
