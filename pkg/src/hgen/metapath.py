"""Meta-path compilation into homogeneous target-node graphs.

A meta-path is compiled by chaining the boolean biadjacency matrices of its
steps (exists-path semantics) and then building the symmetric-normalized
propagation operator ``D^-1/2 (A + I) D^-1/2`` used by GCN layers.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np

from . import kernels
from .hetgraph import HeteroGraph


def _ro(a, dtype):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class SparseBoolMatrix:
    """CSR pattern with sorted, duplicate-free rows."""

    shape: tuple[int, int]
    indptr: np.ndarray
    indices: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "shape", (int(self.shape[0]), int(self.shape[1])))
        object.__setattr__(self, "indptr", _ro(self.indptr, np.int64))
        object.__setattr__(self, "indices", _ro(self.indices, np.int64))
        if len(self.indptr) != self.shape[0] + 1 or self.indptr[-1] != len(self.indices):
            raise ValueError("inconsistent CSR structure")

    @classmethod
    def from_pairs(cls, shape, pairs) -> "SparseBoolMatrix":
        rows, cols = int(shape[0]), int(shape[1])
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        keys = np.unique(pairs[:, 0] * max(cols, 1) + pairs[:, 1])
        r = keys // max(cols, 1)
        indptr = np.zeros(rows + 1, dtype=np.int64)
        np.cumsum(np.bincount(r, minlength=rows), out=indptr[1:])
        return cls((rows, cols), indptr, keys % max(cols, 1))

    @classmethod
    def from_dense(cls, dense) -> "SparseBoolMatrix":
        dense = np.asarray(dense, dtype=bool)
        return cls.from_pairs(dense.shape, np.argwhere(dense))

    @property
    def nnz(self) -> int:
        return len(self.indices)

    @cached_property
    def row_ids(self) -> np.ndarray:
        return np.repeat(np.arange(self.shape[0], dtype=np.int64), np.diff(self.indptr))

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.shape, dtype=bool)
        out[self.row_ids, self.indices] = True
        return out

    def transpose(self) -> "SparseBoolMatrix":
        t_indptr, t_indices, _ = kernels.csr_transpose(self.indptr, self.indices,
                                                       np.zeros(self.nnz), self.shape[1])
        return SparseBoolMatrix((self.shape[1], self.shape[0]), t_indptr, t_indices)

    def matmul(self, other: "SparseBoolMatrix") -> "SparseBoolMatrix":
        if self.shape[1] != other.shape[0]:
            raise ValueError(f"dimension mismatch: {self.shape} @ {other.shape}")
        indptr, indices = kernels.bool_spgemm(self.indptr, self.indices, other.indptr, other.indices,
                                              other.shape[1])
        return SparseBoolMatrix((self.shape[0], other.shape[1]), indptr, indices)

    def with_diagonal(self) -> "SparseBoolMatrix":
        n = min(self.shape)
        diag = np.arange(n, dtype=np.int64)
        pairs = np.concatenate([np.stack([self.row_ids, self.indices], 1), np.stack([diag, diag], 1)])
        return SparseBoolMatrix.from_pairs(self.shape, pairs)

    def without_diagonal(self) -> "SparseBoolMatrix":
        keep = self.row_ids != self.indices
        return SparseBoolMatrix.from_pairs(self.shape, np.stack([self.row_ids[keep], self.indices[keep]], 1))

    def __eq__(self, other):
        if not isinstance(other, SparseBoolMatrix):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self.indptr, other.indptr) \
            and np.array_equal(self.indices, other.indices)

    __hash__ = None


@dataclass(frozen=True, eq=False)
class CSRMatrix:
    """Real-valued CSR matrix; used as a constant operator in propagation."""

    shape: tuple[int, int]
    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "shape", (int(self.shape[0]), int(self.shape[1])))
        object.__setattr__(self, "indptr", _ro(self.indptr, np.int64))
        object.__setattr__(self, "indices", _ro(self.indices, np.int64))
        object.__setattr__(self, "data", _ro(self.data, np.float64))

    @classmethod
    def from_dense(cls, dense) -> "CSRMatrix":
        dense = np.asarray(dense, dtype=np.float64)
        pattern = SparseBoolMatrix.from_dense(dense != 0)
        return cls(dense.shape, pattern.indptr, pattern.indices, dense[pattern.row_ids, pattern.indices])

    @property
    def nnz(self) -> int:
        return len(self.indices)

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.shape)
        rows = np.repeat(np.arange(self.shape[0]), np.diff(self.indptr))
        out[rows, self.indices] = self.data
        return out

    @cached_property
    def T(self) -> "CSRMatrix":
        t_indptr, t_indices, t_data = kernels.csr_transpose(self.indptr, self.indices, self.data, self.shape[1])
        return CSRMatrix((self.shape[1], self.shape[0]), t_indptr, t_indices, t_data)

    def dot(self, dense: np.ndarray) -> np.ndarray:
        if dense.shape[0] != self.shape[1]:
            raise ValueError(f"dimension mismatch: {self.shape} @ {dense.shape}")
        return kernels.csr_spmm(self.indptr, self.indices, self.data, dense)

    def __eq__(self, other):
        if not isinstance(other, CSRMatrix):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self.indptr, other.indptr) \
            and np.array_equal(self.indices, other.indices) and np.array_equal(self.data, other.data)

    __hash__ = None


def normalized_operator(adjacency: SparseBoolMatrix) -> CSRMatrix:
    """``D^-1/2 (A + I) D^-1/2`` with ``D`` the row sums of ``A + I``.

    The sum is arithmetic: a node that reaches itself through the meta-path
    (A[u, u] = 1) gets a diagonal weight of 2.
    """
    closed = adjacency.with_diagonal()
    on_diag = closed.row_ids == closed.indices
    self_path = np.zeros(closed.shape[0], dtype=bool)
    self_path[adjacency.row_ids[adjacency.row_ids == adjacency.indices]] = True
    weights = np.ones(closed.nnz)
    weights[on_diag] += self_path[closed.row_ids[on_diag]]
    deg = np.bincount(closed.row_ids, weights=weights, minlength=closed.shape[0])
    inv_sqrt = 1.0 / np.sqrt(deg)
    data = weights * inv_sqrt[closed.row_ids] * inv_sqrt[closed.indices]
    return CSRMatrix(closed.shape, closed.indptr, closed.indices, data)


def mean_operator(pattern: SparseBoolMatrix) -> CSRMatrix:
    """Row-averaging operator over ``pattern``; empty rows stay zero."""
    deg = np.diff(pattern.indptr).astype(np.float64)
    inv = np.divide(1.0, deg, out=np.zeros_like(deg), where=deg > 0)
    return CSRMatrix(pattern.shape, pattern.indptr, pattern.indices, inv[pattern.row_ids])


@dataclass(frozen=True, eq=False)
class MetaPathGraph:
    path_name: str
    adjacency: SparseBoolMatrix
    norm_operator: CSRMatrix

    @property
    def n(self) -> int:
        return self.adjacency.shape[0]

    @cached_property
    def closed_neighborhood(self) -> SparseBoolMatrix:
        """A + I pattern (GAT neighbourhoods)."""
        return self.adjacency.with_diagonal()

    @cached_property
    def neighbor_mean(self) -> CSRMatrix:
        """Mean over off-diagonal neighbours (GraphSAGE aggregation)."""
        return mean_operator(self.adjacency.without_diagonal())

    def __eq__(self, other):
        if not isinstance(other, MetaPathGraph):
            return NotImplemented
        return self.path_name == other.path_name and self.adjacency == other.adjacency \
            and self.norm_operator == other.norm_operator

    __hash__ = None


def biadjacency(g: HeteroGraph, edge_type: str) -> SparseBoolMatrix:
    if edge_type not in g.edges:
        raise KeyError(f"unknown edge type {edge_type!r}")
    et = g.edges[edge_type]
    return SparseBoolMatrix.from_pairs((g.node_counts[et.src_type], g.node_counts[et.dst_type]), et.pairs)


def path_name(path: Sequence[str]) -> str:
    return "/".join(path)


def compile_metapath(g: HeteroGraph, path: Sequence[str]) -> MetaPathGraph:
    g.check_meta_path(path)
    product = biadjacency(g, path[0])
    for step in path[1:]:
        factor = biadjacency(g, step)
        if product.shape[1] != factor.shape[0]:
            raise ValueError(f"dimension mismatch at step {step!r}: {product.shape} @ {factor.shape}")
        product = product.matmul(factor)
    if product.shape != (g.n, g.n):
        raise ValueError(f"meta-path {list(path)} compiled to shape {product.shape}, expected {(g.n, g.n)}")
    return MetaPathGraph(path_name(path), product, normalized_operator(product))


def compile_all(g: HeteroGraph) -> list[MetaPathGraph]:
    return [compile_metapath(g, p) for p in g.meta_paths]


def drop_edges(mpg: MetaPathGraph, rate: float, seed) -> MetaPathGraph:
    """Remove each off-diagonal unordered pair {u, v} with probability ``rate``.

    One coin is drawn per unordered pair, so a symmetric adjacency stays
    symmetric. Self-paths are kept.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"edge drop rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return mpg
    adj = mpg.adjacency
    rows, cols = adj.row_ids, adj.indices
    n = adj.shape[1]
    keys = np.minimum(rows, cols) * n + np.maximum(rows, cols)
    uniq, inverse = np.unique(keys, return_inverse=True)
    coins = np.random.default_rng(seed).random(len(uniq)) >= rate
    keep = coins[inverse] | (rows == cols)
    kept = SparseBoolMatrix.from_pairs(adj.shape, np.stack([rows[keep], cols[keep]], 1))
    return MetaPathGraph(mpg.path_name, kept, normalized_operator(kept))


# --------------------------------------------------------------------------
# on-disk cache
# --------------------------------------------------------------------------

def cache_path_for(graph_path) -> Path:
    graph_path = Path(graph_path)
    return graph_path.with_name(graph_path.name + ".metapaths.npz")


def _file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def save_metapath_cache(graph_path, mpgs: Sequence[MetaPathGraph]) -> Path:
    arrays = {"digest": np.array(_file_digest(graph_path)), "count": np.array(len(mpgs))}
    for i, mpg in enumerate(mpgs):
        arrays[f"{i}.name"] = np.array(mpg.path_name)
        arrays[f"{i}.shape"] = np.array(mpg.adjacency.shape)
        arrays[f"{i}.adj_indptr"] = mpg.adjacency.indptr
        arrays[f"{i}.adj_indices"] = mpg.adjacency.indices
        arrays[f"{i}.op_indptr"] = mpg.norm_operator.indptr
        arrays[f"{i}.op_indices"] = mpg.norm_operator.indices
        arrays[f"{i}.op_data"] = mpg.norm_operator.data
    out = cache_path_for(graph_path)
    with open(out, "wb") as fh:
        np.savez(fh, **arrays)
    return out


def load_metapath_cache(graph_path) -> list[MetaPathGraph] | None:
    """Cached graphs for ``graph_path``, or None when absent or stale."""
    cache = cache_path_for(graph_path)
    if not cache.exists():
        return None
    with np.load(cache, allow_pickle=False) as z:
        if str(z["digest"]) != _file_digest(graph_path):
            return None
        out = []
        for i in range(int(z["count"])):
            shape = tuple(int(s) for s in z[f"{i}.shape"])
            adj = SparseBoolMatrix(shape, z[f"{i}.adj_indptr"], z[f"{i}.adj_indices"])
            op = CSRMatrix(shape, z[f"{i}.op_indptr"], z[f"{i}.op_indices"], z[f"{i}.op_data"])
            out.append(MetaPathGraph(str(z[f"{i}.name"]), adj, op))
    return out


def compile_cached(g: HeteroGraph, graph_path=None) -> list[MetaPathGraph]:
    if graph_path is None:
        return compile_all(g)
    cached = load_metapath_cache(graph_path)
    if cached is not None and [m.path_name for m in cached] == [path_name(p) for p in g.meta_paths]:
        return cached
    mpgs = compile_all(g)
    save_metapath_cache(graph_path, mpgs)
    return mpgs
