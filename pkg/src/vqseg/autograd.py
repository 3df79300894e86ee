"""Dense float64 tensors with reverse-mode differentiation.

The engine records a dynamic graph per forward pass: every operation whose
inputs require gradients appends a node holding its inputs and a backward
closure.  ``backward(root)`` sweeps the recorded nodes exactly once, in
reverse execution order (a valid reverse-topological order, since inputs
always execute before their consumers), accumulating gradients into the
``grad`` field of requires-grad leaves.  The graph is freed after the sweep
unless ``retain_graph`` is set.

All computation is in 64-bit floats.  Broadcasting follows trailing-shape
alignment (each aligned pair of extents must be equal or 1); anything else
raises :class:`DimensionError`.
"""

from __future__ import annotations

import itertools

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError, DomainError

_SEQ = itertools.count()


class Tensor:
    """N-dimensional float64 array participating in a differentiation graph."""

    __slots__ = ("data", "requires_grad", "grad", "_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._op: _Node | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.item())

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return detach(self)

    def backward(self, retain_graph: bool = False):
        backward(self, retain_graph=retain_graph)

    # operator sugar --------------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class _Node:
    """One executed operation: inputs, output, and its backward closure."""

    __slots__ = ("name", "seq", "inputs", "grad_fn", "out")

    def __init__(self, name, inputs, grad_fn, out):
        self.name = name
        self.seq = next(_SEQ)
        self.inputs = inputs
        self.grad_fn = grad_fn
        self.out = out


def _wrap(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(data, name, inputs, grad_fn) -> Tensor:
    out = Tensor(data)
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._op = _Node(name, inputs, grad_fn, out)
    return out


def _collect(root: Tensor) -> list[_Node]:
    """All nodes reachable from root, sorted into execution order."""
    nodes, seen, stack = [], set(), [root]
    while stack:
        node = stack.pop()._op
        if node is not None and id(node) not in seen:
            seen.add(id(node))
            nodes.append(node)
            stack.extend(node.inputs)
    nodes.sort(key=lambda nd: nd.seq)
    return nodes


def backward(root: Tensor, retain_graph: bool = False):
    """Populate ``grad`` on every requires-grad leaf below a scalar root.

    Grads accumulate across calls: run ``zero_grad`` on leaves to reset.
    The recorded graph is freed afterwards unless ``retain_graph`` is set.
    """
    if root.data.size != 1:
        raise ContractError(f"backward root must be scalar, got shape {root.shape}")
    nodes = _collect(root)
    if root._op is None:
        if root.requires_grad:
            seed = np.ones_like(root.data)
            root.grad = seed if root.grad is None else root.grad + seed
        return
    grads = {id(root): np.ones_like(root.data)}
    for node in reversed(nodes):
        g_out = grads.pop(id(node.out), None)
        if g_out is None:
            continue
        for t, g in zip(node.inputs, node.grad_fn(g_out)):
            if g is None or not t.requires_grad:
                continue
            if t._op is None:
                t.grad = g if t.grad is None else t.grad + g
            else:
                key = id(t)
                grads[key] = g if key not in grads else grads[key] + g
    if not retain_graph:
        for node in nodes:
            node.out._op = None
            node.inputs = ()
            node.grad_fn = None
            node.out = None


def trace(root: Tensor) -> list[tuple[int, str, tuple]]:
    """(seq, op name, output shape) for every recorded node, execution order."""
    return [(nd.seq, nd.name, nd.out.shape) for nd in _collect(root)]


def first_nonfinite(root: Tensor) -> str | None:
    """Name of the earliest-executed op with a non-finite output, if any."""
    for nd in _collect(root):
        if not np.isfinite(nd.out.data).all():
            return f"{nd.name}#{nd.seq}"
    if not np.isfinite(root.data).all():
        return "leaf"
    return None


# -- broadcasting helpers ----------------------------------------------------


def _validate_broadcast(sa: tuple, sb: tuple):
    for da, db in zip(reversed(sa), reversed(sb)):
        if da != db and da != 1 and db != 1:
            raise DimensionError(
                f"shapes {sa} and {sb} do not broadcast: trailing extents must match or be 1"
            )


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gd, sd) in enumerate(zip(g.shape, shape)) if sd == 1 and gd != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise and broadcast ops -------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _validate_broadcast(a.shape, b.shape)
    return _make(
        a.data + b.data, "add", (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    _validate_broadcast(a.shape, b.shape)
    return _make(
        a.data - b.data, "sub", (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    _validate_broadcast(a.shape, b.shape)
    return _make(
        a.data * b.data, "mul", (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a: Tensor, b: Tensor) -> Tensor:
    _validate_broadcast(a.shape, b.shape)
    return _make(
        a.data / b.data, "div", (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, "neg", (a,), lambda g: (-g,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    # np.maximum (not where) so NaN propagates for the non-finite diagnostics
    return _make(np.maximum(a.data, 0.0), "relu", (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make(out, "sigmoid", (a,), lambda g: (g * out * (1.0 - out),))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError("log requires strictly positive inputs")
    return _make(np.log(a.data), "log", (a,), lambda g: (g / a.data,))


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, "square", (a,), lambda g: (g * 2.0 * a.data,))


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0):
        raise DomainError("sqrt requires non-negative inputs")
    out = np.sqrt(a.data)
    return _make(out, "sqrt", (a,), lambda g: (g / (2.0 * out),))


def clip(a: Tensor, low: float, high: float) -> Tensor:
    # gradient passes only strictly inside the interval
    mask = (a.data > low) & (a.data < high)
    return _make(np.clip(a.data, low, high), "clip", (a,), lambda g: (g * mask,))


# -- reductions ---------------------------------------------------------------


def _reduce_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def _expand_reduced(g, in_shape, axes, keepdims):
    if not keepdims:
        shape = list(g.shape)
        for a in sorted(axes):
            shape.insert(a, 1)
        g = g.reshape(shape)
    return np.broadcast_to(g, in_shape)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _reduce_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)
    return _make(
        np.asarray(out), "sum", (a,),
        lambda g: (_expand_reduced(g, a.shape, axes, keepdims).copy(),),
    )


def mean_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _reduce_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if a.ndim else 1
    out = a.data.mean(axis=axes, keepdims=keepdims)
    return _make(
        np.asarray(out), "mean", (a,),
        lambda g: (_expand_reduced(g, a.shape, axes, keepdims) / count,),
    )


# -- shape manipulation --------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return _make(a.data.reshape(shape), "reshape", (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), "transpose", (a,), lambda g: (g.transpose(inverse),))


def concat(tensors, axis: int) -> Tensor:
    tensors = tuple(tensors)
    ndim = tensors[0].ndim
    axis = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(
            i != axis and t.shape[i] != tensors[0].shape[i] for i in range(ndim)
        ):
            raise DimensionError(
                f"concat shapes {[t.shape for t in tensors]} differ off axis {axis}"
            )
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, offsets, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), "concat", tensors, grad_fn)


# -- linear algebra ------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    sa, sb = a.shape, b.shape
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {sa} and {sb}")
    if sa[-1] != sb[-2]:
        raise DimensionError(f"matmul inner extents disagree: {sa} x {sb}")
    if b.ndim == 2:
        def grad_fn(g):
            ga = g @ b.data.T
            gb = a.data.reshape(-1, sa[-1]).T @ g.reshape(-1, sb[-1])
            return ga, gb
    elif a.ndim == b.ndim and sa[:-2] == sb[:-2]:
        def grad_fn(g):
            return g @ b.data.swapaxes(-1, -2), a.data.swapaxes(-1, -2) @ g
    else:
        raise DimensionError(
            f"matmul supports (...,m,k)x(k,n) or equal leading batch dims, got {sa} x {sb}"
        )
    return _make(a.data @ b.data, "matmul", (a, b), grad_fn)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if not -a.ndim <= axis < a.ndim:
        raise DimensionError(f"softmax axis {axis} invalid for shape {a.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)  # stability
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return _make(out, "softmax", (a,), grad_fn)


# -- spatial ops ---------------------------------------------------------------


def _pair(v) -> tuple[int, int]:
    return (v, v) if isinstance(v, int) else tuple(v)


def conv2d(x: Tensor, w: Tensor, stride=1, padding=0) -> Tensor:
    """Cross-correlation of NCHW input with FCkhkw kernels."""
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d input and kernel, got {x.shape}, {w.shape}")
    bsz, cin, h, wd = x.shape
    fout, cker, kh, kw = w.shape
    if cker != cin:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape} vs kernel {w.shape}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if h + 2 * ph < kh or wd + 2 * pw < kw:
        raise DimensionError(
            f"conv2d geometry unsatisfiable: input {x.shape}, kernel {w.shape}, "
            f"stride {(sh, sw)}, padding {(ph, pw)}"
        )
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (wd + 2 * pw - kw) // sw + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    out = np.einsum("bcijuv,fcuv->bfij", windows, w.data, optimize=True)

    def grad_fn(g):
        gw = np.einsum("bcijuv,bfij->fcuv", windows, g, optimize=True)
        gxp = np.zeros_like(xp)
        for u in range(kh):
            for v in range(kw):
                gxp[:, :, u:u + sh * ho:sh, v:v + sw * wo:sw] += np.einsum(
                    "bfij,fc->bcij", g, w.data[:, :, u, v], optimize=True
                )
        gx = gxp[:, :, ph:ph + h, pw:pw + wd]
        return np.ascontiguousarray(gx), gw

    return _make(out, "conv2d", (x, w), grad_fn)


def avg_pool2x2(x: Tensor) -> Tensor:
    if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise DimensionError(f"avg_pool2x2 needs even spatial extents, got {x.shape}")
    b, c, h, w = x.shape
    out = x.data.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def grad_fn(g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) / 4.0,)

    return _make(out, "avg_pool2x2", (x,), grad_fn)


def upsample_nearest2x(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise DimensionError(f"upsample_nearest2x expects 4-d input, got {x.shape}")
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
    b, c, h, w = x.shape

    def grad_fn(g):
        return (g.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _make(out, "upsample_nearest2x", (x,), grad_fn)


# -- gather / scatter ----------------------------------------------------------


def take_rows(table: Tensor, indices: np.ndarray) -> Tensor:
    """Select rows of a 2-d table; backward scatter-adds into the chosen rows."""
    if table.ndim != 2:
        raise DimensionError(f"take_rows expects a 2-d table, got {table.shape}")
    idx = np.asarray(indices, dtype=np.int64)
    out = table.data[idx]  # fancy indexing copies rows bitwise

    def grad_fn(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return _make(out, "take_rows", (table,), grad_fn)


def gather_tokens(values: Tensor, idx: np.ndarray) -> Tensor:
    """Per-batch token gather: out[b, q] = values[b, idx[b, q]]."""
    if values.ndim != 3:
        raise DimensionError(f"gather_tokens expects (B, T, d) values, got {values.shape}")
    idx = np.asarray(idx, dtype=np.int64)
    bsz = values.shape[0]
    out = np.take_along_axis(values.data, idx[:, :, None], axis=1)
    rows = np.arange(bsz)[:, None]

    def grad_fn(g):
        gv = np.zeros_like(values.data)
        np.add.at(gv, (rows, idx), g)
        return (gv,)

    return _make(out, "gather_tokens", (values,), grad_fn)


# -- gradient rewiring ---------------------------------------------------------


def detach(a: Tensor) -> Tensor:
    """Constant copy: same values, no gradient path."""
    return Tensor(a.data.copy())


def straight_through(z_con: Tensor, z_q: Tensor) -> Tensor:
    """Forward is z_q bitwise; backward copies the gradient to z_con unchanged."""
    if z_con.shape != z_q.shape:
        raise DimensionError(f"straight_through shapes differ: {z_con.shape} vs {z_q.shape}")
    return _make(z_q.data.copy(), "straight_through", (z_con, z_q), lambda g: (g, None))
