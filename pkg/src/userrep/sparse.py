"""Sparse vectors and the sparse-times-dense products built on them."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from .autodiff import Tensor, spmm


@dataclass(frozen=True)
class SparseVec:
    """Sparse vector of length ``dim`` holding only nonzero entries.

    Indices are kept sorted ascending; values never contain an exact zero.
    """

    dim: int
    indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    values: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.float64))

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64).reshape(-1)
        val = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if self.dim < 1:
            raise ValueError(f"dim must be positive, got {self.dim}")
        if idx.shape != val.shape:
            raise ValueError(f"{idx.size} indices but {val.size} values")
        if idx.size:
            if idx.min() < 0 or idx.max() >= self.dim:
                raise ValueError(f"index out of range for dim {self.dim}")
            if np.any(val == 0.0):
                raise ValueError("SparseVec may not store explicit zeros")
            order = np.argsort(idx, kind="stable")
            idx, val = idx[order], val[order]
            if np.any(np.diff(idx) == 0):
                raise ValueError("duplicate index in SparseVec")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "values", val)

    @classmethod
    def from_dict(cls, dim: int, entries: Mapping[int, float]) -> "SparseVec":
        items = [(int(k), float(v)) for k, v in entries.items() if v != 0.0]
        if not items:
            return cls(dim)
        idx, val = zip(*items)
        return cls(dim, np.array(idx), np.array(val))

    @classmethod
    def from_dense(cls, dense: np.ndarray) -> "SparseVec":
        dense = np.asarray(dense, dtype=np.float64)
        nz = np.flatnonzero(dense)
        return cls(dense.size, nz, dense[nz])

    @property
    def nnz(self) -> int:
        return int(self.indices.size)

    def to_dict(self) -> dict[int, float]:
        return {int(i): float(v) for i, v in zip(self.indices, self.values)}

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.dim)
        out[self.indices] = self.values
        return out

    def __eq__(self, other) -> bool:
        if not isinstance(other, SparseVec):
            return NotImplemented
        return (self.dim == other.dim and np.array_equal(self.indices, other.indices)
                and np.array_equal(self.values, other.values))


def sparse_dense_matvec(v: SparseVec, w: Tensor) -> Tensor:
    """Return ``sum_j v_j * w[j]`` touching only the rows stored in ``v``."""
    if w.ndim != 2:
        raise ValueError(f"expected a 2-D dense operand, got shape {w.shape}")
    if v.dim != w.shape[0]:
        raise ValueError(f"dimension mismatch: sparse dim {v.dim} vs dense rows {w.shape[0]} (dense shape {w.shape})")
    row = sp.csr_matrix((v.values, v.indices, np.array([0, v.nnz])), shape=(1, v.dim))
    return spmm(row, w).reshape(w.shape[1])


def stack_rows(vectors: Sequence[SparseVec], dim: int | None = None) -> sp.csr_matrix:
    """Stack sparse vectors into a CSR matrix, one row per vector."""
    if dim is None:
        if not vectors:
            raise ValueError("cannot infer dim from an empty list")
        dim = vectors[0].dim
    indptr = np.zeros(len(vectors) + 1, dtype=np.int64)
    for i, v in enumerate(vectors):
        if v.dim != dim:
            raise ValueError(f"row {i} has dim {v.dim}, expected {dim}")
        indptr[i + 1] = indptr[i] + v.nnz
    if vectors:
        indices = np.concatenate([v.indices for v in vectors])
        values = np.concatenate([v.values for v in vectors])
    else:
        indices = np.zeros(0, dtype=np.int64)
        values = np.zeros(0)
    return sp.csr_matrix((values, indices, indptr), shape=(len(vectors), dim))
