"""Dense float64 arrays with tape-based reverse-mode differentiation.

Only the operations the upsampling network needs are provided. Every op
records a node on the active :class:`Tape` when at least one input requires
a gradient; outside a tape the ops evaluate eagerly and record nothing.

Example::

    w = DiffArray(np.ones((3, 2)), requires_grad=True)
    with Tape() as tape:
        loss = relu(x @ w).sum()
        tape.backward(loss)
    w.grad  # dloss/dw
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np
from scipy import sparse

from .. import kernels

__all__ = [
    "DiffArray",
    "Tape",
    "DimensionError",
    "ContractError",
    "NumericError",
    "as_array",
    "backward",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "pointwise_linear",
    "relu",
    "softmax_lastdim",
    "max_reduce",
    "concat",
    "gather_rows",
    "sum_all",
    "sum_axis",
    "mean_all",
    "reshape",
    "broadcast_to",
    "slice_axis",
    "swapaxes",
    "square",
    "safe_sqrt",
    "neighbor_max_relu",
    "neighbor_edges_relu",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(RuntimeError):
    """An API precondition was violated."""


class NumericError(FloatingPointError):
    """Non-finite values reached an op that requires finite input."""


_local = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class _Node:
    __slots__ = ("op", "inputs", "out", "backward")

    def __init__(self, op, inputs, out, backward):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.backward = backward


class DiffArray:
    """A float64 array that can take part in reverse-mode differentiation."""

    __slots__ = ("data", "grad", "node", "requires_grad", "name")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        data = np.asarray(data, dtype=np.float64)
        # ascontiguousarray would promote 0-d scalars to shape (1,)
        self.data = data if data.flags.c_contiguous else np.array(data, order="C")
        self.grad: np.ndarray | None = None
        self.node: _Node | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on array of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"DiffArray(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis: int | None = None):
        return sum_all(self) if axis is None else sum_axis(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Tape:
    """Append-only record of differentiable ops for one forward/backward cycle.

    Use as a context manager; nested tapes shadow outer ones on the same
    thread. Tapes are thread-confined: each thread has its own stack.
    Leaving the context releases the recorded graph (outputs keep their data
    but become constants), so run ``backward`` inside the ``with`` block.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()
        # node.out <-> out.node is a reference cycle; break it eagerly
        self.reset()

    def reset(self) -> None:
        for node in self.nodes:
            node.out.node = None
        self.nodes.clear()

    def record(self, op: str, inputs: Sequence[DiffArray], out: DiffArray, fn: Callable) -> None:
        node = _Node(op, tuple(inputs), out, fn)
        out.node = node
        self.nodes.append(node)

    def backward(self, root: DiffArray) -> None:
        """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every reachable leaf.

        Repeated calls without zeroing grads add to the existing buffers.
        """
        if root.size != 1:
            raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
        if root.node is None:
            if root.requires_grad:
                _accumulate_leaf(root, np.ones_like(root.data))
            return
        grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for x, gx in zip(node.inputs, in_grads):
                if gx is None or not x.requires_grad:
                    continue
                if x.node is None:
                    _accumulate_leaf(x, gx)
                else:
                    key = id(x)
                    prev = grads.get(key)
                    grads[key] = gx if prev is None else prev + gx


def _accumulate_leaf(x: DiffArray, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=np.float64).reshape(x.shape)
    x.grad = g.copy() if x.grad is None else x.grad + g


def backward(root: DiffArray) -> None:
    """Run backward on the tape that produced ``root``."""
    tape = _active_tape()
    if tape is None:
        raise ContractError("backward called outside an active Tape")
    tape.backward(root)


def as_array(x) -> DiffArray:
    return x if isinstance(x, DiffArray) else DiffArray(x)


def _make(op: str, data: np.ndarray, inputs: Sequence[DiffArray], fn: Callable) -> DiffArray:
    needs = any(x.requires_grad for x in inputs)
    out = DiffArray(data, requires_grad=needs)
    if needs:
        tape = _active_tape()
        if tape is not None:
            tape.record(op, inputs, out, fn)
        else:
            # evaluated outside any tape: nothing can flow back
            out.requires_grad = False
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: DiffArray, b: DiffArray, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> DiffArray:
    a, b = as_array(a), as_array(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> DiffArray:
    a, b = as_array(a), as_array(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> DiffArray:
    a, b = as_array(a), as_array(b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def fn(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make("mul", ad * bd, (a, b), fn)


def neg(a) -> DiffArray:
    a = as_array(a)
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def square(a) -> DiffArray:
    a = as_array(a)
    ad = a.data
    return _make("square", ad * ad, (a,), lambda g: (2.0 * ad * g,))


def safe_sqrt(a) -> DiffArray:
    """Square root whose gradient is defined as 0 where the input is 0."""
    a = as_array(a)
    if np.any(a.data < 0):
        raise NumericError("safe_sqrt of a negative value")
    out = np.sqrt(a.data)

    def fn(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(out > 0, 0.5 / out, 0.0)
        return (g * d,)

    return _make("sqrt", out, (a,), fn)


def relu(x) -> DiffArray:
    x = as_array(x)
    out = np.maximum(x.data, 0.0)
    return _make("relu", out, (x,), lambda g: (g * (out > 0),))


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> DiffArray:
    """Batched matrix product over the last two axes with broadcasting."""
    a, b = as_array(a), as_array(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul: batch extents of {a.shape} and {b.shape} do not broadcast") from None
    ad, bd = a.data, b.data

    def fn(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make("matmul", ad @ bd, (a, b), fn)


def pointwise_linear(x, w, b=None) -> DiffArray:
    """Shared-weight 1x1 convolution: ``x[..., C_in] @ w[C_in, C_out] + b``."""
    x, w = as_array(x), as_array(w)
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise DimensionError(f"pointwise_linear: input {x.shape} does not match weight {w.shape}")
    if b is not None:
        b = as_array(b)
        if b.shape != (w.shape[1],):
            raise DimensionError(f"pointwise_linear: bias {b.shape} does not match weight {w.shape}")
    xd, wd = x.data, w.data
    lead = xd.shape[:-1]
    flat = xd.reshape(-1, wd.shape[0])
    out = flat @ wd
    if b is not None:
        out = out + b.data

    def fn(g):
        g2 = g.reshape(-1, wd.shape[1])
        gx = (g2 @ wd.T).reshape(xd.shape) if x.requires_grad else None
        gw = flat.T @ g2 if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    inputs = (x, w) if b is None else (x, w, b)
    return _make("pointwise_linear", out.reshape(*lead, wd.shape[1]), inputs, fn)


def softmax_lastdim(x) -> DiffArray:
    x = as_array(x)
    if not np.all(np.isfinite(x.data)):
        raise NumericError("softmax_lastdim received non-finite logits")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def fn(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make("softmax", y, (x,), fn)


# ---------------------------------------------------------------- reductions / shape


def max_reduce(x, axis: int = -1) -> DiffArray:
    """Max over ``axis``; the gradient goes to the lowest-index maximizer."""
    x = as_array(x)
    axis = axis % x.ndim
    if axis == x.ndim - 1:
        idx = np.argmax(x.data, axis=axis)
        out = np.take_along_axis(x.data, idx[..., None], axis=axis)[..., 0]
    else:
        lead = int(np.prod(x.shape[:axis], dtype=np.int64))
        trail = int(np.prod(x.shape[axis + 1:], dtype=np.int64))
        out, idx = kernels.max_middle(x.data.reshape(lead, x.shape[axis], trail))
        out = out.reshape(x.shape[:axis] + x.shape[axis + 1:])
        idx = idx.reshape(out.shape)
    shape = x.shape

    def fn(g):
        gx = np.zeros(shape)
        np.put_along_axis(gx, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return _make("max_reduce", out, (x,), fn)


def sum_all(x) -> DiffArray:
    x = as_array(x)
    shape = x.shape
    return _make("sum", np.array(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape),))


def sum_axis(x, axis: int, keepdims: bool = False) -> DiffArray:
    x = as_array(x)
    axis = axis % x.ndim
    shape = x.shape

    def fn(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _make("sum_axis", x.data.sum(axis=axis, keepdims=keepdims), (x,), fn)


def mean_all(x) -> DiffArray:
    x = as_array(x)
    n = x.size
    shape = x.shape
    return _make("mean", np.array(x.data.mean()), (x,),
                 lambda g: (np.broadcast_to(g / n, shape),))


def reshape(x, shape: Sequence[int]) -> DiffArray:
    x = as_array(x)
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {old} as {tuple(shape)}") from None
    return _make("reshape", out, (x,), lambda g: (g.reshape(old),))


def broadcast_to(x, shape: Sequence[int]) -> DiffArray:
    x = as_array(x)
    old = x.shape
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError:
        raise DimensionError(f"broadcast_to: cannot broadcast {old} to {tuple(shape)}") from None
    return _make("broadcast", out, (x,), lambda g: (_unbroadcast(g, old),))


def slice_axis(x, axis: int, start: int, stop: int) -> DiffArray:
    """``x[..., start:stop, ...]`` along one axis."""
    x = as_array(x)
    axis = axis % x.ndim
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)
    shape = x.shape

    def fn(g):
        gx = np.zeros(shape)
        gx[sl] = g
        return (gx,)

    return _make("slice", x.data[sl], (x,), fn)


def swapaxes(x, a1: int = -1, a2: int = -2) -> DiffArray:
    x = as_array(x)
    return _make("swapaxes", np.swapaxes(x.data, a1, a2), (x,), lambda g: (np.swapaxes(g, a1, a2),))


def concat(xs: Sequence, axis: int = -1) -> DiffArray:
    xs = [as_array(x) for x in xs]
    if not xs:
        raise DimensionError("concat of an empty sequence")
    nd = xs[0].ndim
    axis = axis % nd
    for x in xs:
        if x.ndim != nd or x.shape[:axis] + x.shape[axis + 1:] != xs[0].shape[:axis] + xs[0].shape[axis + 1:]:
            raise DimensionError(f"concat: shapes {[x.shape for x in xs]} differ off axis {axis}")
    bounds = np.cumsum([0] + [x.shape[axis] for x in xs])

    def fn(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) if xs[i].requires_grad else None
                     for i in range(len(xs)))

    return _make("concat", np.concatenate([x.data for x in xs], axis=axis), xs, fn)


def gather_rows(x, indices) -> DiffArray:
    """``x[indices]`` along axis 0; the gradient is scatter-added back."""
    x = as_array(x)
    idx = np.asarray(indices)
    if idx.dtype.kind not in "iu":
        raise TypeError("gather_rows indices must be integers")
    n = x.shape[0]
    if idx.size and (idx.min() < -n or idx.max() >= n):
        raise IndexError(f"gather_rows: index out of range for {n} rows")
    idx = np.where(idx < 0, idx + n, idx)
    shape = x.shape
    row = int(np.prod(shape[1:], dtype=np.int64))

    def fn(g):
        flat_idx = idx.reshape(-1)
        # scatter-add as a sparse selection-matrix product; far faster than np.add.at
        sel = sparse.csr_matrix((np.ones(flat_idx.size), (flat_idx, np.arange(flat_idx.size))),
                                shape=(n, flat_idx.size))
        return (np.asarray(sel @ g.reshape(flat_idx.size, row)).reshape(shape),)

    return _make("gather_rows", x.data[idx], (x,), fn)


def neighbor_max_relu(nbr, ctr, w_dist, idx, dist) -> DiffArray:
    """Fused ``relu(max_k(nbr[idx[:, k]] + ctr + dist[:, k] * w_dist))``.

    Shapes: nbr (M, C), ctr (N, C), w_dist (C,), idx/dist (N, K); output (N, C).
    Equivalent to gather_rows/add/mul/relu/max_reduce but never holds the
    (N, K, C) intermediate. Ties go to the lowest k, like :func:`max_reduce`.
    ``dist`` may be a plain array (treated as constant) or a DiffArray.
    """
    nbr, ctr, w_dist = as_array(nbr), as_array(ctr), as_array(w_dist)
    idx = np.asarray(idx)
    dist_arr = dist if isinstance(dist, DiffArray) else None
    dist = np.asarray(dist.data if dist_arr is not None else dist, dtype=np.float64)
    N, K = idx.shape
    C = ctr.shape[1]
    if nbr.shape[1] != C or ctr.shape[0] != N or w_dist.shape != (C,) or dist.shape != (N, K):
        raise DimensionError(f"neighbor_max_relu: inconsistent shapes nbr={nbr.shape} ctr={ctr.shape} "
                             f"w_dist={w_dist.shape} idx={idx.shape} dist={dist.shape}")
    m = nbr.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= m):
        raise IndexError("neighbor_max_relu: index out of range")
    best, arg = kernels.neighbor_max(nbr.data, ctr.data, w_dist.data, idx, dist)
    out = np.maximum(best, 0.0)
    rows = np.arange(N)[:, None]
    inputs = (nbr, ctr, w_dist) + ((dist_arr,) if dist_arr is not None else ())

    def fn(g):
        ge = g * (out > 0)
        src = idx[rows, arg]
        g_nbr = None
        if nbr.requires_grad:
            flat = (src * C + np.arange(C)).reshape(-1)
            g_nbr = np.bincount(flat, weights=ge.reshape(-1), minlength=m * C).reshape(m, C)
        g_w = (ge * dist[rows, arg]).sum(axis=0) if w_dist.requires_grad else None
        grads = (g_nbr, ge, g_w)
        if dist_arr is not None:
            g_d = None
            if dist_arr.requires_grad:
                flat = (rows * K + arg).reshape(-1)
                g_d = np.bincount(flat, weights=(ge * w_dist.data).reshape(-1), minlength=N * K).reshape(N, K)
            grads += (g_d,)
        return grads

    return _make("neighbor_max_relu", out, inputs, fn)


def neighbor_edges_relu(nbr, ctr, w_dist, idx, dist=None) -> DiffArray:
    """Fused ``relu(nbr[idx] + ctr[:, None] + dist[..., None] * w_dist)``, shape (N, S, C).

    ``w_dist``/``dist`` may both be None to drop the distance term. ``dist``
    may be a plain array (treated as constant) or a DiffArray.
    """
    nbr, ctr = as_array(nbr), as_array(ctr)
    idx = np.asarray(idx)
    N, S = idx.shape
    C = ctr.shape[1]
    if nbr.shape[1] != C or ctr.shape[0] != N:
        raise DimensionError(f"neighbor_edges_relu: nbr {nbr.shape} / ctr {ctr.shape} / idx {idx.shape} disagree")
    m = nbr.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= m):
        raise IndexError("neighbor_edges_relu: index out of range")
    out = nbr.data[idx]
    out += ctr.data[:, None, :]
    inputs = [nbr, ctr]
    dist_arr = dist if isinstance(dist, DiffArray) else None
    if w_dist is not None:
        w_dist = as_array(w_dist)
        dist = np.asarray(dist.data if dist_arr is not None else dist, dtype=np.float64).reshape(N, S, 1)
        out += dist * w_dist.data
        inputs.append(w_dist)
        if dist_arr is not None:
            inputs.append(dist_arr)
    np.maximum(out, 0.0, out=out)

    def fn(g):
        ge = g * (out > 0)
        g_nbr = None
        if nbr.requires_grad:
            flat = idx.reshape(-1)
            sel = sparse.csr_matrix((np.ones(flat.size), (flat, np.arange(flat.size))), shape=(m, flat.size))
            g_nbr = np.asarray(sel @ ge.reshape(flat.size, C))
        grads = [g_nbr, ge.sum(axis=1)]
        if w_dist is not None:
            grads.append((ge * dist).sum(axis=(0, 1)) if w_dist.requires_grad else None)
            if dist_arr is not None:
                grads.append((ge * w_dist.data).sum(axis=-1) if dist_arr.requires_grad else None)
        return tuple(grads)

    return _make("neighbor_edges_relu", out, inputs, fn)
