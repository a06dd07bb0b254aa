"""Dense tensors with reverse-mode automatic differentiation.

A ``Tensor`` wraps a NumPy array and records the operations applied to it.
Calling :meth:`Tensor.backward` on a scalar result walks the recorded graph
in reverse topological order and accumulates gradients into every reachable
tensor with ``requires_grad=True``. Gradients add up across backward calls
until an explicit :meth:`Tensor.zero_grad`.

Float32 is the working precision; float64 inputs stay float64 so the same
graph can be checked against finite differences in tests. Reductions and
the transcendental forward/backward passes are delegated to the selected
kernel backend (:mod:`redbert.kernels`).
"""

from __future__ import annotations

import numpy as np

from . import kernels
from .errors import ContractError, NumericError, ShapeError

__all__ = [
    "Tensor", "matmul", "softmax", "log_softmax", "cross_entropy", "nll_mean",
    "gelu", "layer_norm", "embedding_lookup", "dropout", "concat", "reshape",
    "transpose", "swapaxes", "tensor_sum", "tensor_mean",
]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    # ---------------------------------------------------------- bookkeeping

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(()))

    def detach(self):
        """A new leaf tensor sharing this tensor's values, cut from the graph."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        else:
            self.grad.fill(0.0)

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g.astype(self.data.dtype, copy=False)

    def backward(self):
        """Accumulate d(self)/d(leaf) into every reachable requires_grad tensor."""
        if self.data.size != 1:
            raise ContractError(
                f"backward requires a scalar, got shape {self.data.shape}")
        topo = _toposort(self)
        self.accumulate_grad(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    # ------------------------------------------------------------ operators

    def __add__(self, other):
        return _add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return _add(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return _add(self, _mul(_as_tensor(other, self.dtype), -1.0))

    def __rsub__(self, other):
        return _add(_as_tensor(other, self.dtype), _mul(self, -1.0))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return _mul_tensors(self, other)
        arr = np.asarray(other)
        if arr.ndim == 0:
            return _mul(self, float(arr))
        return _mul_tensors(self, _as_tensor(arr, self.dtype))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return _mul_tensors(self, _reciprocal(other))
        arr = np.asarray(other)
        if arr.ndim == 0:
            return _mul(self, 1.0 / float(arr))
        return _mul_tensors(self, _reciprocal(_as_tensor(arr, self.dtype)))

    def __neg__(self):
        return _mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return (f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, "
                f"requires_grad={self.requires_grad})")


def _as_tensor(value, dtype):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _make(data, parents, backward):
    """Graph node constructor; drops the tape when no parent needs gradients."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _toposort(root):
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited or not node.requires_grad:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))
    return order


def _unbroadcast(g, shape):
    """Reduce gradient g back to `shape` by summing broadcast axes."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, dim in enumerate(shape) if dim == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ------------------------------------------------------------- arithmetic


def _add(a, b):
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.data.shape))

    return _make(data, (a, b), backward)


def _mul(a, scalar):
    scalar = float(scalar)
    data = a.data * np.asarray(scalar, dtype=a.dtype)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * scalar)

    return _make(data, (a,), backward)


def _mul_tensors(a, b):
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), backward)


def _reciprocal(a):
    data = 1.0 / a.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(-g * data * data)

    return _make(data, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with broadcasting over leading batch dimensions."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(
            f"matmul needs >=2-D operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(
            f"matmul inner dimensions disagree: {a.data.shape} x {b.data.shape}")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(
            f"matmul batch dimensions not broadcastable: "
            f"{a.data.shape} x {b.data.shape}") from exc

    def backward(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a.accumulate_grad(_unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b.accumulate_grad(_unbroadcast(gb, b.data.shape))

    return _make(data, (a, b), backward)


# --------------------------------------------------------------- reductions


def tensor_sum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if not x.requires_grad:
            return
        if axis is None:
            x.accumulate_grad(np.broadcast_to(g, x.data.shape))
            return
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axis)
        x.accumulate_grad(np.broadcast_to(gg, x.data.shape))

    return _make(np.asarray(data), (x,), backward)


def tensor_mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        count = x.data.size
    else:
        count = x.data.shape[axis]
    return _mul(tensor_sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


# ------------------------------------------------------------- shape moves


def reshape(x: Tensor, shape) -> Tensor:
    data = x.data.reshape(shape)

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g.reshape(x.data.shape))

    return _make(data, (x,), backward)


def transpose(x: Tensor, axes) -> Tensor:
    data = np.transpose(x.data, axes)
    inverse = np.argsort(axes)

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(np.transpose(g, inverse))

    return _make(data, (x,), backward)


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    data = np.swapaxes(x.data, a, b)

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(np.swapaxes(g, a, b))

    return _make(data, (x,), backward)


def concat(tensors, axis=-1) -> Tensor:
    """Concatenate along `axis`; gradient splits back to each input."""
    datas = [t.data for t in tensors]
    data = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t.accumulate_grad(g[tuple(idx)])

    return _make(data, tuple(tensors), backward)


# -------------------------------------------------- activations and norms


def gelu(x: Tensor) -> Tensor:
    data = kernels.gelu_fwd(x.data)

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(kernels.gelu_bwd(x.data, g))

    return _make(data, (x,), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-stabilized softmax; slices along `axis` sum to 1."""
    if np.isnan(x.data).any():
        raise NumericError("softmax received NaN input")
    moved = np.moveaxis(x.data, axis, -1)
    y = kernels.softmax_fwd(np.ascontiguousarray(moved))
    data = np.moveaxis(y, -1, axis)

    def backward(g):
        if x.requires_grad:
            gm = np.ascontiguousarray(np.moveaxis(g, axis, -1))
            dx = kernels.softmax_bwd(y, gm)
            x.accumulate_grad(np.moveaxis(dx, -1, axis))

    return _make(data, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if np.isnan(x.data).any():
        raise NumericError("log_softmax received NaN input")
    moved = np.moveaxis(x.data, axis, -1)
    y = kernels.log_softmax_fwd(np.ascontiguousarray(moved))
    data = np.moveaxis(y, -1, axis)

    def backward(g):
        if x.requires_grad:
            gm = np.ascontiguousarray(np.moveaxis(g, axis, -1))
            dx = kernels.log_softmax_bwd(y, gm)
            x.accumulate_grad(np.moveaxis(dx, -1, axis))

    return _make(data, (x,), backward)


def cross_entropy(log_probs: Tensor, target_index: int) -> Tensor:
    """-log p[target] for a single log-probability row.

    The row must already be normalized: logsumexp within 1e-5 of zero.
    """
    row = log_probs.data.reshape(-1)
    lse = np.logaddexp.reduce(row.astype(np.float64))
    if abs(lse) > 1e-5:
        raise ContractError(
            f"cross_entropy expects a normalized log-probability row "
            f"(logsumexp={lse:.3g})")
    if not 0 <= target_index < row.size:
        raise IndexError(
            f"target index {target_index} out of range for {row.size} classes")
    data = np.asarray(-row[target_index])

    def backward(g):
        if log_probs.requires_grad:
            full = np.zeros_like(log_probs.data)
            full.reshape(-1)[target_index] = -g
            log_probs.accumulate_grad(full)

    return _make(data, (log_probs,), backward)


def nll_mean(log_probs: Tensor, targets) -> Tensor:
    """Mean of -log_probs[i, targets[i]] over rows; the batched loss form."""
    targets = np.asarray(targets, dtype=np.int64)
    n, k = log_probs.data.shape
    if targets.shape != (n,):
        raise ShapeError(
            f"targets shape {targets.shape} does not match {n} rows")
    if targets.min(initial=0) < 0 or targets.max(initial=0) >= k:
        raise IndexError(f"target out of range for {k} classes")
    picked = log_probs.data[np.arange(n), targets]
    data = np.asarray(-picked.mean())

    def backward(g):
        if log_probs.requires_grad:
            full = np.zeros_like(log_probs.data)
            full[np.arange(n), targets] = -g / n
            log_probs.accumulate_grad(full)

    return _make(data, (log_probs,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis, then scale and shift."""
    if gamma.data.shape != x.data.shape[-1:] or beta.data.shape != x.data.shape[-1:]:
        raise ShapeError(
            f"layer_norm scale/shift shape {gamma.data.shape}/{beta.data.shape} "
            f"does not match feature dim {x.data.shape[-1]}")
    # the kernel is monomorphic over dtype; promote scale/shift to x's
    gdata = gamma.data.astype(x.dtype, copy=False)
    bdata = beta.data.astype(x.dtype, copy=False)
    y, mean, rstd = kernels.layer_norm_fwd(
        np.ascontiguousarray(x.data), gdata, bdata, eps)

    def backward(g):
        dx, dgamma, dbeta = kernels.layer_norm_bwd(
            x.data, gdata, mean, rstd, np.ascontiguousarray(g))
        if x.requires_grad:
            x.accumulate_grad(dx)
        if gamma.requires_grad:
            gamma.accumulate_grad(dgamma)
        if beta.requires_grad:
            beta.accumulate_grad(dbeta)

    return _make(y, (x, gamma, beta), backward)


# ----------------------------------------------------------------- lookups


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of a 2-D table; gradient scatter-adds into the table."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.data.ndim != 2:
        raise ShapeError(f"lookup table must be 2-D, got {table.data.shape}")
    n = table.data.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        bad = int(np.argmax((ids < 0) | (ids >= n)))
        raise IndexError(f"id out of range at flat position {bad} "
                         f"(table has {n} rows)")
    data = table.data[ids]

    def backward(g):
        if table.requires_grad:
            gt = np.zeros_like(table.data)
            np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.data.shape[1]))
            table.accumulate_grad(gt)

    return _make(data, (table,), backward)


def dropout(x: Tensor, p: float, rng, train: bool) -> Tensor:
    """Inverted dropout; identity when eval mode or p == 0."""
    if not train or p == 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ContractError(f"dropout rate must be in [0, 1), got {p}")
    keep = (rng.random(x.data.shape) >= p).astype(x.dtype)
    scale = 1.0 / (1.0 - p)
    data = x.data * keep * np.asarray(scale, dtype=x.dtype)

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g * keep * scale)

    return _make(data, (x,), backward)
