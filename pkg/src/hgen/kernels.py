"""Sparse CSR kernels with a numba fast path and a pure-numpy fallback.

The numba versions are used when numba imports cleanly and the environment
variable ``HGEN_DISABLE_NUMBA`` is unset (or ``0``). Both implementations are
importable as ``numba_kernels`` / ``numpy_kernels`` so tests and benchmarks can
compare them directly; the module-level names dispatch to the active one.

All CSR structures are ``(indptr, indices)`` with int64 arrays; row segments
are sorted and duplicate-free unless noted otherwise.
"""
from __future__ import annotations

import os
import types

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is an install dependency
    numba = None

HAVE_NUMBA = numba is not None
USE_NUMBA = HAVE_NUMBA and os.environ.get("HGEN_DISABLE_NUMBA", "0").lower() in ("", "0", "false", "no")

_I64 = np.int64


# --------------------------------------------------------------------------
# pure numpy path
# --------------------------------------------------------------------------

def _row_ids(indptr):
    return np.repeat(np.arange(len(indptr) - 1, dtype=_I64), np.diff(indptr))


def _np_bool_spgemm(a_indptr, a_indices, b_indptr, b_indices, n_cols):
    n_rows = len(a_indptr) - 1
    a_rows = _row_ids(a_indptr)
    counts = b_indptr[a_indices + 1] - b_indptr[a_indices]
    total = int(counts.sum())
    if total == 0:
        return np.zeros(n_rows + 1, dtype=_I64), np.zeros(0, dtype=_I64)
    rows = np.repeat(a_rows, counts)
    seg_start = np.repeat(b_indptr[a_indices], counts)
    offsets = np.arange(total, dtype=_I64) - np.repeat(np.cumsum(counts) - counts, counts)
    cols = b_indices[seg_start + offsets]
    keys = np.unique(rows * n_cols + cols)
    out_rows = keys // n_cols
    indptr = np.zeros(n_rows + 1, dtype=_I64)
    np.cumsum(np.bincount(out_rows, minlength=n_rows), out=indptr[1:])
    return indptr, (keys % n_cols).astype(_I64)


def _np_csr_spmm(indptr, indices, data, dense):
    n_rows = len(indptr) - 1
    out = np.zeros((n_rows, dense.shape[1]), dtype=np.float64)
    if len(indices) == 0:
        return out
    prod = data[:, None] * dense[indices]
    lengths = np.diff(indptr)
    nonempty = lengths > 0
    out[nonempty] = np.add.reduceat(prod, indptr[:-1][nonempty], axis=0)
    return out


def _np_csr_transpose(indptr, indices, data, n_cols):
    order = np.argsort(indices, kind="stable")
    rows = _row_ids(indptr)
    t_indptr = np.zeros(n_cols + 1, dtype=_I64)
    np.cumsum(np.bincount(indices, minlength=n_cols), out=t_indptr[1:])
    return t_indptr, rows[order].astype(_I64), data[order]


def _np_sddmm(indptr, indices, left, right):
    rows = _row_ids(indptr)
    return np.einsum("ij,ij->i", left[rows], right[indices])


def _np_segment_softmax(indptr, values):
    out = np.zeros_like(values)
    lengths = np.diff(indptr)
    nonempty = lengths > 0
    if not nonempty.any():
        return out
    starts = indptr[:-1][nonempty]
    seg_max = np.maximum.reduceat(values, starts)
    shift = np.repeat(seg_max, lengths[nonempty])
    ex = np.exp(values - shift)
    seg_sum = np.add.reduceat(ex, starts)
    return ex / np.repeat(seg_sum, lengths[nonempty])


def _np_segment_softmax_backward(indptr, alpha, grad):
    lengths = np.diff(indptr)
    nonempty = lengths > 0
    dot = np.zeros(len(lengths))
    if nonempty.any():
        dot[nonempty] = np.add.reduceat(alpha * grad, indptr[:-1][nonempty])
    return alpha * (grad - np.repeat(dot, lengths))


def _np_scatter_add_rows(index, values, n_rows):
    out = np.zeros((n_rows, values.shape[1]), dtype=np.float64)
    np.add.at(out, index, values)
    return out


numpy_kernels = types.SimpleNamespace(
    bool_spgemm=_np_bool_spgemm,
    csr_spmm=_np_csr_spmm,
    csr_transpose=_np_csr_transpose,
    sddmm=_np_sddmm,
    segment_softmax=_np_segment_softmax,
    segment_softmax_backward=_np_segment_softmax_backward,
    scatter_add_rows=_np_scatter_add_rows,
)


# --------------------------------------------------------------------------
# numba path
# --------------------------------------------------------------------------

if HAVE_NUMBA:
    njit = numba.njit(cache=True, nogil=True)

    @njit
    def _nb_bool_spgemm(a_indptr, a_indices, b_indptr, b_indices, n_cols):
        n_rows = a_indptr.shape[0] - 1
        marker = np.full(n_cols, -1, dtype=np.int64)
        indptr = np.zeros(n_rows + 1, dtype=np.int64)
        # symbolic pass sizes the output exactly
        for i in range(n_rows):
            count = 0
            for p in range(a_indptr[i], a_indptr[i + 1]):
                k = a_indices[p]
                for q in range(b_indptr[k], b_indptr[k + 1]):
                    j = b_indices[q]
                    if marker[j] != i:
                        marker[j] = i
                        count += 1
            indptr[i + 1] = indptr[i] + count
        indices = np.empty(indptr[n_rows], dtype=np.int64)
        marker[:] = -1
        for i in range(n_rows):
            pos = indptr[i]
            for p in range(a_indptr[i], a_indptr[i + 1]):
                k = a_indices[p]
                for q in range(b_indptr[k], b_indptr[k + 1]):
                    j = b_indices[q]
                    if marker[j] != i:
                        marker[j] = i
                        indices[pos] = j
                        pos += 1
            indices[indptr[i]:indptr[i + 1]] = np.sort(indices[indptr[i]:indptr[i + 1]])
        return indptr, indices

    @njit
    def _nb_csr_spmm(indptr, indices, data, dense):
        n_rows = indptr.shape[0] - 1
        width = dense.shape[1]
        out = np.zeros((n_rows, width), dtype=np.float64)
        for i in range(n_rows):
            for p in range(indptr[i], indptr[i + 1]):
                j = indices[p]
                w = data[p]
                for c in range(width):
                    out[i, c] += w * dense[j, c]
        return out

    @njit
    def _nb_csr_transpose(indptr, indices, data, n_cols):
        n_rows = indptr.shape[0] - 1
        nnz = indices.shape[0]
        t_indptr = np.zeros(n_cols + 1, dtype=np.int64)
        for p in range(nnz):
            t_indptr[indices[p] + 1] += 1
        for j in range(n_cols):
            t_indptr[j + 1] += t_indptr[j]
        fill = t_indptr[:-1].copy()
        t_indices = np.empty(nnz, dtype=np.int64)
        t_data = np.empty(nnz, dtype=data.dtype)
        for i in range(n_rows):
            for p in range(indptr[i], indptr[i + 1]):
                j = indices[p]
                t_indices[fill[j]] = i
                t_data[fill[j]] = data[p]
                fill[j] += 1
        return t_indptr, t_indices, t_data

    @njit
    def _nb_sddmm(indptr, indices, left, right):
        n_rows = indptr.shape[0] - 1
        width = left.shape[1]
        out = np.empty(indices.shape[0], dtype=np.float64)
        for i in range(n_rows):
            for p in range(indptr[i], indptr[i + 1]):
                j = indices[p]
                acc = 0.0
                for c in range(width):
                    acc += left[i, c] * right[j, c]
                out[p] = acc
        return out

    @njit
    def _nb_segment_softmax(indptr, values):
        out = np.zeros_like(values)
        for i in range(indptr.shape[0] - 1):
            lo, hi = indptr[i], indptr[i + 1]
            if hi == lo:
                continue
            top = values[lo]
            for p in range(lo + 1, hi):
                if values[p] > top:
                    top = values[p]
            total = 0.0
            for p in range(lo, hi):
                out[p] = np.exp(values[p] - top)
                total += out[p]
            for p in range(lo, hi):
                out[p] /= total
        return out

    @njit
    def _nb_segment_softmax_backward(indptr, alpha, grad):
        out = np.empty_like(alpha)
        for i in range(indptr.shape[0] - 1):
            lo, hi = indptr[i], indptr[i + 1]
            dot = 0.0
            for p in range(lo, hi):
                dot += alpha[p] * grad[p]
            for p in range(lo, hi):
                out[p] = alpha[p] * (grad[p] - dot)
        return out

    @njit
    def _nb_scatter_add_rows(index, values, n_rows):
        width = values.shape[1]
        out = np.zeros((n_rows, width), dtype=np.float64)
        for e in range(index.shape[0]):
            r = index[e]
            for c in range(width):
                out[r, c] += values[e, c]
        return out

    numba_kernels = types.SimpleNamespace(
        bool_spgemm=_nb_bool_spgemm,
        csr_spmm=_nb_csr_spmm,
        csr_transpose=_nb_csr_transpose,
        sddmm=_nb_sddmm,
        segment_softmax=_nb_segment_softmax,
        segment_softmax_backward=_nb_segment_softmax_backward,
        scatter_add_rows=_nb_scatter_add_rows,
    )
else:  # pragma: no cover
    numba_kernels = None


active = numba_kernels if USE_NUMBA else numpy_kernels
backend = "numba" if USE_NUMBA else "numpy"


def _contig(a, dtype):
    return np.ascontiguousarray(a, dtype=dtype)


def bool_spgemm(a_indptr, a_indices, b_indptr, b_indices, n_cols):
    """Boolean-semiring product of two CSR patterns; returns the result pattern."""
    return active.bool_spgemm(_contig(a_indptr, _I64), _contig(a_indices, _I64),
                              _contig(b_indptr, _I64), _contig(b_indices, _I64), int(n_cols))


def csr_spmm(indptr, indices, data, dense):
    """Sparse (CSR, real) times dense."""
    return active.csr_spmm(_contig(indptr, _I64), _contig(indices, _I64),
                           _contig(data, np.float64), _contig(dense, np.float64))


def csr_transpose(indptr, indices, data, n_cols):
    return active.csr_transpose(_contig(indptr, _I64), _contig(indices, _I64),
                                _contig(data, np.float64), int(n_cols))


def sddmm(indptr, indices, left, right):
    """Per stored entry (i, j): dot(left[i], right[j])."""
    return active.sddmm(_contig(indptr, _I64), _contig(indices, _I64),
                        _contig(left, np.float64), _contig(right, np.float64))


def segment_softmax(indptr, values):
    return active.segment_softmax(_contig(indptr, _I64), _contig(values, np.float64))


def segment_softmax_backward(indptr, alpha, grad):
    return active.segment_softmax_backward(_contig(indptr, _I64), _contig(alpha, np.float64),
                                           _contig(grad, np.float64))


def scatter_add_rows(index, values, n_rows):
    return active.scatter_add_rows(_contig(index, _I64), _contig(values, np.float64), int(n_rows))
