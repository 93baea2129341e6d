"""Deterministic synthetic datasets for experiments and tests.

Two generators: a Gaussian mixture with well-separated components, and a
planted power-law instance where the sorted squared distances from a
designated query (the origin) follow alpha*((i+1)/n)^beta exactly, built
as points on a one-dimensional ray embedded in d dimensions.
"""

from __future__ import annotations

import numpy as np

from .data import Dataset

__all__ = ["gaussian_mixture", "power_law_planted", "mixture_queries", "planted_query"]


def gaussian_mixture(
    n: int,
    d: int,
    n_components: int,
    seed: int,
    center_scale: float = 10.0,
    component_std: float = 1.0,
) -> Dataset:
    """n points from an equal-weight Gaussian mixture.

    Component centers are drawn once from N(0, center_scale^2 I); points
    cycle through components so counts differ by at most one.
    """
    if n < 1 or d < 1 or n_components < 1:
        raise ValueError("n, d and n_components must all be >= 1")
    rng = np.random.default_rng(seed)
    centers = rng.normal(0.0, center_scale, size=(n_components, d))
    labels = np.arange(n) % n_components
    points = centers[labels] + rng.normal(0.0, component_std, size=(n, d))
    return Dataset.from_array(points.astype(np.float32))


def mixture_queries(
    dataset_seed: int,
    n_queries: int,
    d: int,
    n_components: int,
    center_scale: float = 10.0,
    component_std: float = 1.0,
    query_seed: int | None = None,
) -> np.ndarray:
    """Fresh draws from the same mixture a dataset seed produced.

    Regenerates the centers from `dataset_seed` so queries share the
    distribution without being dataset rows.
    """
    rng = np.random.default_rng(dataset_seed)
    centers = rng.normal(0.0, center_scale, size=(n_components, d))
    qrng = np.random.default_rng(dataset_seed + 1 if query_seed is None else query_seed)
    labels = qrng.integers(0, n_components, size=n_queries)
    return centers[labels] + qrng.normal(0.0, component_std, size=(n_queries, d))


def power_law_planted(n: int, alpha: float, beta: float, d: int = 1) -> Dataset:
    """Points on the first coordinate axis whose squared distances from the
    origin are alpha*((i+1)/n)^beta for i = 0 .. n-1.

    The designated query is the zero vector; remaining coordinates are 0.
    """
    if n < 1 or d < 1:
        raise ValueError("n and d must be >= 1")
    if alpha <= 0 or beta <= 0:
        raise ValueError("alpha and beta must be positive")
    i = np.arange(1, n + 1, dtype=np.float64)
    radii = np.sqrt(alpha * (i / n) ** beta)
    points = np.zeros((n, d), dtype=np.float64)
    points[:, 0] = radii
    return Dataset.from_array(points.astype(np.float32))


def planted_query(d: int) -> np.ndarray:
    """The designated query of :func:`power_law_planted`: the origin."""
    return np.zeros(d, dtype=np.float64)
