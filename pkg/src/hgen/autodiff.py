"""Dense 2-D tensors with a reverse-mode tape.

Operations record onto the innermost active :class:`Tape` whenever one of
their inputs requires a gradient; outside a tape they just compute values.
Every value is a float64 array of exactly two dimensions.

    with Tape() as tape:
        loss = l1_norm(matmul(x, w))
    tape.backward(loss)
    w.grad
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import kernels

_tape_stack: list["Tape"] = []


class Tensor:
    __slots__ = ("value", "requires_grad", "grad", "name", "_tape", "_node")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        value = np.asarray(value, dtype=np.float64)
        if value.ndim == 0:
            value = value.reshape(1, 1)
        elif value.ndim == 1:
            value = value.reshape(1, -1)
        elif value.ndim != 2:
            raise ValueError(f"tensors are 2-D, got shape {value.shape}")
        self.value = value
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name
        self._tape = None
        self._node = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def item(self) -> float:
        if self.value.size != 1:
            raise ValueError("item() needs a 1x1 tensor")
        return float(self.value[0, 0])

    def numpy(self) -> np.ndarray:
        return self.value

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Append-only record of differentiable operations."""

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self.visits = 0

    def __len__(self):
        return len(self.records)

    def __enter__(self):
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack.remove(self)
        return False

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable):
        out._tape = self
        out._node = len(self.records)
        self.records.append((out, inputs, vjp))

    def backward(self, loss: Tensor):
        """Accumulate d(loss)/d(leaf) into ``.grad`` of requires-grad leaves."""
        if loss.shape != (1, 1):
            raise ValueError(f"backward needs a scalar (1x1) loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise ValueError("loss was not recorded on this tape")
        buffers: list[np.ndarray | None] = [None] * len(self.records)
        buffers[loss._node] = np.ones((1, 1))
        for idx in range(loss._node, -1, -1):
            self.visits += 1
            g = buffers[idx]
            if g is None:
                continue
            buffers[idx] = None
            _, inputs, vjp = self.records[idx]
            for inp, gi in zip(inputs, vjp(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp._tape is self:
                    j = inp._node
                    buffers[j] = gi if buffers[j] is None else buffers[j] + gi
                elif inp.is_leaf:
                    inp.grad = np.array(gi, dtype=np.float64) if inp.grad is None else inp.grad + gi


def _emit(value, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    out = Tensor(value)
    if _tape_stack and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _tape_stack[-1].record(out, tuple(inputs), vjp)
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def _broadcast_shape(a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}") from None


# --------------------------------------------------------------------------
# linear algebra and elementwise arithmetic
# --------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"shape mismatch in matmul: {a.shape} @ {b.shape}")
    av, bv = a.value, b.value
    return _emit(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    sa, sb = a.shape, b.shape
    return _emit(a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    sa, sb = a.shape, b.shape
    return _emit(a.value - b.value, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    av, bv = a.value, b.value
    return _emit(av * bv, (a, b), lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    av, bv = a.value, b.value
    out = av / bv
    return _emit(out, (a, b), lambda g: (_unbroadcast(g / bv, av.shape),
                                         _unbroadcast(-g * out / bv, bv.shape)))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _emit(a.value * c, (a,), lambda g: (g * c,))


def add_scalar(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _emit(a.value + float(c), (a,), lambda g: (g,))


def reciprocal(a) -> Tensor:
    a = as_tensor(a)
    out = 1.0 / a.value
    return _emit(out, (a,), lambda g: (-g * out * out,))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _emit(a.value.T.copy(), (a,), lambda g: (g.T,))


def sum_all(a) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    return _emit(np.array([[a.value.sum()]]), (a,), lambda g: (np.full(shape, g[0, 0]),))


# --------------------------------------------------------------------------
# activations
# --------------------------------------------------------------------------

def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.value > 0
    return _emit(np.where(pos, a.value, 0.0), (a,), lambda g: (g * pos,))


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = as_tensor(a)
    factor = np.where(a.value > 0, 1.0, float(slope))
    return _emit(a.value * factor, (a,), lambda g: (g * factor,))


def elu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.value > 0
    ex = np.exp(np.minimum(a.value, 0.0))
    return _emit(np.where(pos, a.value, ex - 1.0), (a,), lambda g: (g * np.where(pos, 1.0, ex),))


ACTIVATIONS = {"relu": relu, "elu": elu, "leaky_relu": leaky_relu, "identity": lambda a: a}


# --------------------------------------------------------------------------
# shape manipulation and reductions
# --------------------------------------------------------------------------

def concat_cols(tensors: Sequence) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat_cols needs at least one tensor")
    rows = {t.shape[0] for t in tensors}
    if len(rows) != 1:
        raise ValueError(f"row mismatch in concat_cols: {[t.shape for t in tensors]}")
    if len(tensors) == 1:
        return tensors[0]
    bounds = np.cumsum([0] + [t.shape[1] for t in tensors])
    value = np.concatenate([t.value for t in tensors], axis=1)
    return _emit(value, tensors, lambda g: tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(tensors))))


def concat_rows(tensors: Sequence) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    cols = {t.shape[1] for t in tensors}
    if len(cols) != 1:
        raise ValueError(f"column mismatch in concat_rows: {[t.shape for t in tensors]}")
    if len(tensors) == 1:
        return tensors[0]
    bounds = np.cumsum([0] + [t.shape[0] for t in tensors])
    value = np.concatenate([t.value for t in tensors], axis=0)
    return _emit(value, tensors, lambda g: tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(tensors))))


def take_col(a, j: int) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        out[:, j] = g[:, 0]
        return (out,)

    return _emit(a.value[:, j:j + 1].copy(), (a,), vjp)


def row_mean(a) -> Tensor:
    a = as_tensor(a)
    n, k = a.shape
    return _emit(a.value.mean(axis=1, keepdims=True), (a,), lambda g: (np.repeat(g / k, k, axis=1),))


def col_mean(a) -> Tensor:
    a = as_tensor(a)
    n, k = a.shape
    return _emit(a.value.mean(axis=0, keepdims=True), (a,), lambda g: (np.repeat(g / n, n, axis=0),))


def _row_select(a, pick):
    a = as_tensor(a)
    if a.shape[1] < 1:
        raise ValueError("row reduction over zero columns")
    cols = pick(a.value, axis=1)  # numpy returns the first attaining index
    rows = np.arange(a.shape[0])
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        out[rows, cols] = g[:, 0]
        return (out,)

    return _emit(a.value[rows, cols][:, None], (a,), vjp)


def row_max(a) -> Tensor:
    return _row_select(a, np.argmax)


def row_min(a) -> Tensor:
    return _row_select(a, np.argmin)


def l1_norm(a) -> Tensor:
    a = as_tensor(a)
    sign = np.sign(a.value)
    return _emit(np.array([[np.abs(a.value).sum()]]), (a,), lambda g: (g[0, 0] * sign,))


# --------------------------------------------------------------------------
# randomness and losses
# --------------------------------------------------------------------------

def dropout_mask(shape, rate: float, seed) -> Tensor:
    """Inverted-dropout mask: 0 with probability ``rate``, else ``1/(1-rate)``."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return Tensor(np.ones(shape))
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    keep = rng.random(shape) >= rate
    return Tensor(keep / (1.0 - rate))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, labels, subset) -> Tensor:
    """Mean over ``subset`` of -log softmax(logits)[label]."""
    logits = as_tensor(logits)
    subset = np.asarray(subset, dtype=np.int64).reshape(-1)
    if subset.size == 0:
        raise ValueError("cross-entropy over an empty node subset")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    z = logits.value[subset]
    y = labels[subset]
    if y.min() < 0 or y.max() >= z.shape[1]:
        raise ValueError("label out of range")
    z = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    loss = np.mean(log_norm - z[np.arange(len(y)), y])
    shape = logits.shape

    def vjp(g):
        p = np.exp(z - log_norm[:, None])
        p[np.arange(len(y)), y] -= 1.0
        out = np.zeros(shape)
        np.add.at(out, subset, p * (g[0, 0] / len(y)))
        return (out,)

    return _emit(np.array([[loss]]), (logits,), vjp)


# --------------------------------------------------------------------------
# sparse operators
# --------------------------------------------------------------------------

def sparse_dense_matmul(sp, d) -> Tensor:
    """``sp @ d`` for a constant CSR matrix ``sp``."""
    d = as_tensor(d)
    if sp.shape[1] != d.shape[0]:
        raise ValueError(f"shape mismatch in sparse_dense_matmul: {sp.shape} @ {d.shape}")
    return _emit(sp.dot(d.value), (d,), lambda g: (sp.T.dot(g),))


def gather_rows(a, index) -> Tensor:
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    n = a.shape[0]
    return _emit(a.value[index], (a,), lambda g: (kernels.scatter_add_rows(index, g, n),))


def segment_softmax(e, indptr) -> Tensor:
    """Softmax of an (E, 1) column within each CSR row segment."""
    e = as_tensor(e)
    alpha = kernels.segment_softmax(indptr, e.value[:, 0])
    return _emit(alpha[:, None], (e,),
                 lambda g: (kernels.segment_softmax_backward(indptr, alpha, g[:, 0])[:, None],))


def edge_spmm(pattern, weights, d) -> Tensor:
    """out[u] = sum over stored (u, v) of weights[e] * d[v].

    ``pattern`` is a square CSR pattern; ``weights`` is an (nnz, 1) tensor.
    """
    weights, d = as_tensor(weights), as_tensor(d)
    indptr, indices = pattern.indptr, pattern.indices
    w = weights.value[:, 0]
    n_cols = pattern.shape[1]
    if d.shape[0] != n_cols or weights.shape[0] != len(indices):
        raise ValueError("shape mismatch in edge_spmm")

    def vjp(g):
        dw = kernels.sddmm(indptr, indices, g, d.value)[:, None]
        t_indptr, t_indices, t_w = kernels.csr_transpose(indptr, indices, w, n_cols)
        dd = kernels.csr_spmm(t_indptr, t_indices, t_w, g)
        return dw, dd

    return _emit(kernels.csr_spmm(indptr, indices, w, d.value), (weights, d), vjp)


# --------------------------------------------------------------------------
# optimisation
# --------------------------------------------------------------------------

def adam_step(params: dict, grads: dict, state: dict, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, weight_decay: float = 0.0) -> dict:
    """In-place Adam update of the arrays in ``params``; returns ``state``.

    ``state`` holds ``t`` and per-name ``m``/``v`` moment arrays; pass ``{}``
    to start fresh. Weight decay is decoupled (applied to the parameter, not
    folded into the gradient).
    """
    t = state.get("t", 0) + 1
    state["t"] = t
    m, v = state.setdefault("m", {}), state.setdefault("v", {})
    c1, c2 = 1.0 - beta1 ** t, 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if name not in m:
            m[name] = np.zeros_like(p)
            v[name] = np.zeros_like(p)
        if m[name].shape != p.shape:
            raise ValueError(f"optimizer state shape mismatch for {name!r}")
        m[name] = beta1 * m[name] + (1.0 - beta1) * g
        v[name] = beta2 * v[name] + (1.0 - beta2) * g * g
        if weight_decay:
            p -= lr * weight_decay * p
        p -= lr * (m[name] / c1) / (np.sqrt(v[name] / c2) + eps)
    return state


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float = 5e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = dict(params)
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.state: dict = {}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        adam_step({k: p.value for k, p in self.params.items()},
                  {k: p.grad for k, p in self.params.items()},
                  self.state, self.lr, self.betas[0], self.betas[1], self.eps, self.weight_decay)


def check_finite(t: Tensor, what: str = "tensor"):
    if not np.all(np.isfinite(t.value)):
        raise FloatingPointError(f"non-finite values in {what}")
