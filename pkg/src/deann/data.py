"""Dataset container, file formats, splitting and the sampling permutation.

A dataset is an immutable row-major n x d single-precision matrix with
cached double-precision squared row norms.  The binary file format is
fixed-layout so writes round-trip bit exactly:

    magic  8 bytes  b"DEANN1\\x00\\x00"
    n      u32 little-endian
    d      u32 little-endian
    data   n*d IEEE-754 float32 little-endian, row-major

CSV files are comma-separated decimal floats, one row per line, no header.

All randomized operations (splitting, permuting) take explicit integer
seeds and are driven by NumPy's PCG64 generator, so results reproduce
across platforms.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Dataset",
    "Splits",
    "PermutedDataset",
    "DatasetFormatError",
    "load",
    "save",
    "split",
    "permute",
]

MAGIC = b"DEANN1\x00\x00"
_HEADER = struct.Struct("<8sII")


class DatasetFormatError(ValueError):
    """Raised when a dataset file cannot be parsed."""


@dataclass(eq=False)
class Dataset:
    """Immutable row matrix plus cached squared L2 row norms."""

    data: np.ndarray
    sq_norms: np.ndarray
    _data64: np.ndarray | None = field(default=None, repr=False, compare=False)

    @classmethod
    def from_array(cls, arr) -> "Dataset":
        data = np.ascontiguousarray(arr, dtype=np.float32)
        if data.ndim != 2:
            raise ValueError(f"dataset must be 2-dimensional, got shape {data.shape}")
        n, d = data.shape
        if n < 1 or d < 1:
            raise ValueError(f"dataset must have n >= 1 and d >= 1, got {n} x {d}")
        if not np.all(np.isfinite(data)):
            raise ValueError("dataset entries must be finite")
        d64 = data.astype(np.float64)
        sq_norms = np.einsum("ij,ij->i", d64, d64)
        data.flags.writeable = False
        sq_norms.flags.writeable = False
        return cls(data=data, sq_norms=sq_norms)

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def d(self) -> int:
        return self.data.shape[1]

    def data64(self) -> np.ndarray:
        """Double-precision view of the rows, cached after first use."""
        if self._data64 is None:
            d64 = self.data.astype(np.float64)
            d64.flags.writeable = False
            self._data64 = d64
        return self._data64

    def take(self, indices) -> "Dataset":
        """New dataset from a row subset (norms recomputed)."""
        return Dataset.from_array(self.data[np.asarray(indices, dtype=np.intp)])


@dataclass
class Splits:
    """Disjoint train/validation/test parts whose union is the input."""

    train: Dataset
    validation: Dataset
    test: Dataset
    seed: int
    train_indices: np.ndarray
    validation_indices: np.ndarray
    test_indices: np.ndarray


@dataclass
class PermutedDataset:
    """A dataset reordered by a stored permutation.

    Row i of `base` equals row `permutation[i]` of the original, and
    `inverse_permutation[permutation[i]] == i`.
    """

    base: Dataset
    permutation: np.ndarray
    inverse_permutation: np.ndarray

    @property
    def n(self) -> int:
        return self.base.n


def save(dataset: Dataset, path, fmt: str = "binary") -> None:
    """Write a dataset; binary writes are bit-exact per the module format."""
    if fmt == "binary":
        with open(path, "wb") as f:
            f.write(_HEADER.pack(MAGIC, dataset.n, dataset.d))
            f.write(np.ascontiguousarray(dataset.data, dtype="<f4").tobytes())
    elif fmt == "csv":
        np.savetxt(path, dataset.data, delimiter=",", fmt="%.9g")
    else:
        raise ValueError(f"unknown format {fmt!r}")


def load(path, fmt: str = "binary") -> Dataset:
    """Read a dataset written by :func:`save` (or any file in either format)."""
    if fmt == "binary":
        return _load_binary(path)
    if fmt == "csv":
        return _load_csv(path)
    raise ValueError(f"unknown format {fmt!r}")


def _load_binary(path) -> Dataset:
    with open(path, "rb") as f:
        header = f.read(_HEADER.size)
        if len(header) != _HEADER.size:
            raise DatasetFormatError(f"{path}: truncated header at byte {len(header)}")
        magic, n, d = _HEADER.unpack(header)
        if magic != MAGIC:
            raise DatasetFormatError(f"{path}: bad magic {magic!r} at byte 0")
        if n < 1 or d < 1:
            raise DatasetFormatError(f"{path}: invalid shape {n} x {d} in header")
        payload = f.read()
    expected = n * d * 4
    if len(payload) != expected:
        raise DatasetFormatError(
            f"{path}: expected {expected} data bytes after byte {_HEADER.size}, got {len(payload)}"
        )
    data = np.frombuffer(payload, dtype="<f4").reshape(n, d)
    return Dataset.from_array(data)


def _load_csv(path) -> Dataset:
    rows = []
    width = None
    with open(path, "r") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if width is None:
                width = len(parts)
            elif len(parts) != width:
                raise DatasetFormatError(
                    f"{path}: line {lineno} has {len(parts)} fields, expected {width}"
                )
            try:
                rows.append([float(p) for p in parts])
            except ValueError as exc:
                raise DatasetFormatError(f"{path}: line {lineno}: {exc}") from exc
    if not rows:
        raise DatasetFormatError(f"{path}: no data rows")
    return Dataset.from_array(np.asarray(rows, dtype=np.float32))


def split(dataset: Dataset, seed: int) -> Splits:
    """Seeded disjoint split: up to 500 validation rows, up to 500 test rows,
    the rest training.

    Indices are shuffled with PCG64(seed); the first block becomes the
    validation set, the second the test set.  For small inputs each query
    block shrinks so that at least one training row always remains.
    """
    n = dataset.n
    if n <= 2:
        raise ValueError(f"cannot split a dataset with n={n}; need n > 2")
    n_val = min(500, n - 2)
    n_test = min(500, n - n_val - 1)
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    val_idx = np.sort(order[:n_val])
    test_idx = np.sort(order[n_val : n_val + n_test])
    train_idx = np.sort(order[n_val + n_test :])
    return Splits(
        train=dataset.take(train_idx),
        validation=dataset.take(val_idx),
        test=dataset.take(test_idx),
        seed=seed,
        train_indices=train_idx,
        validation_indices=val_idx,
        test_indices=test_idx,
    )


def permute(dataset: Dataset, seed: int) -> PermutedDataset:
    """Reorder rows by a seeded Fisher-Yates shuffle (PCG64).

    Rows and their cached norms move together, so nothing is recomputed.
    """
    rng = np.random.default_rng(seed)
    perm = rng.permutation(dataset.n).astype(np.int64)
    inverse = np.empty_like(perm)
    inverse[perm] = np.arange(dataset.n, dtype=np.int64)
    perm.flags.writeable = False
    inverse.flags.writeable = False
    base_data = dataset.data[perm]
    base_norms = dataset.sq_norms[perm]
    base_data.flags.writeable = False
    base_norms.flags.writeable = False
    return PermutedDataset(
        base=Dataset(data=base_data, sq_norms=base_norms),
        permutation=perm,
        inverse_permutation=inverse,
    )
