"""Dense N-d tensors with reverse-mode differentiation.

A small tape-free engine: every op returns an :class:`AutoTensor` that keeps
references to its parents and a closure mapping the output gradient to parent
gradients. :func:`backward` walks the graph in reverse topological order.

Shapes are never broadcast implicitly. The only exceptions are scalar
multiplication (:func:`scale`) and the explicit helpers :func:`add_bias` and
:func:`expand_batch`.
"""
from __future__ import annotations

import contextlib

import numpy as np

from fact import kernels

DEFAULT_DTYPE = np.float32
LN_EPS = 1e-6

_grad_enabled = True


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class AutoTensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _infer_dtype(data), order="C")
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.op = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self):
        return self.op is None

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return AutoTensor(self.data.copy(), requires_grad=False)

    def backward(self):
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        tag = f", op={self.op}" if self.op else ""
        return f"AutoTensor(shape={self.shape}{flag}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, c):
        return scale(self, c)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def _infer_dtype(data):
    if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
        return data.dtype
    return DEFAULT_DTYPE


def tensor(data, requires_grad=False, dtype=None):
    return AutoTensor(data, requires_grad=requires_grad, dtype=dtype)


def _as_tensor(x):
    return x if isinstance(x, AutoTensor) else AutoTensor(x)


def _make(data, parents, backward_fn, op):
    out = AutoTensor(data, dtype=data.dtype)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.op = op
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


# --------------------------------------------------------------------------
# graph traversal
# --------------------------------------------------------------------------


def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Populate ``.grad`` on every ``requires_grad`` leaf reachable from ``loss``.

    Gradients accumulate across calls; clear them with ``zero_grad``.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# --------------------------------------------------------------------------
# elementwise / structural ops
# --------------------------------------------------------------------------


def _same_shape(a, b, op):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ (no broadcasting)")


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b):
    """Elementwise product of equally shaped tensors."""
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "mul")
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def add_n(tensors):
    """Sum of equally shaped tensors in one node."""
    tensors = [_as_tensor(t) for t in tensors]
    for t in tensors[1:]:
        _same_shape(tensors[0], t, "add_n")
    out = tensors[0].data.copy()
    for t in tensors[1:]:
        out += t.data
    return _make(out, tensors, lambda g: tuple(g for _ in tensors), "add_n")


def scale(a, c):
    c = float(c)
    a = _as_tensor(a)
    return _make((a.data * c).astype(a.dtype), (a,), lambda g: ((g * c).astype(g.dtype),), "scale")


def add_bias(a, b):
    """``a + b`` where ``b`` is a vector matching the last axis of ``a``."""
    a, b = _as_tensor(a), _as_tensor(b)
    if b.ndim != 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"add_bias: bias {b.shape} does not match last axis of {a.shape}")
    lead = tuple(range(a.ndim - 1))

    def bw(g):
        return g, g.sum(axis=lead)

    return _make(a.data + b.data, (a, b), bw, "add_bias")


def expand_batch(a, n):
    """Stack ``n`` copies of ``a`` along a new leading axis."""
    a = _as_tensor(a)
    data = np.broadcast_to(a.data, (n,) + a.shape).copy()
    return _make(data, (a,), lambda g: (g.sum(axis=0),), "expand_batch")


def transpose(a, axes=None):
    a = _as_tensor(a)
    if axes is None:
        if a.ndim != 2:
            raise ShapeError(f"transpose without axes needs a matrix, got {a.shape}")
        axes = (1, 0)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                 lambda g: (np.ascontiguousarray(g.transpose(inv)),), "transpose")


def reshape(a, shape):
    a = _as_tensor(a)
    shape = tuple(shape)
    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from exc
    src = a.shape
    return _make(data, (a,), lambda g: (g.reshape(src),), "reshape")


def narrow(a, axis, start, stop):
    """Slice ``[start, stop)`` along ``axis``."""
    a = _as_tensor(a)
    axis = axis % a.ndim
    if not 0 <= start < stop <= a.shape[axis]:
        raise ShapeError(f"narrow: range [{start}, {stop}) invalid for axis {axis} of {a.shape}")
    idx = (slice(None),) * axis + (slice(start, stop),)

    def bw(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        full[idx] = g
        return (full,)

    return _make(np.ascontiguousarray(a.data[idx]), (a,), bw, "narrow")


def slice_rows(a, start, stop):
    return narrow(a, 0, start, stop)


def select(a, index):
    """``a[index]`` along axis 0, dropping that axis."""
    a = _as_tensor(a)
    if not 0 <= index < a.shape[0]:
        raise IndexError(f"select: index {index} out of range for axis of size {a.shape[0]}")

    def bw(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        full[index] = g
        return (full,)

    return _make(a.data[index].copy(), (a,), bw, "select")


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    ref = tensors[0]
    axis = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(
            t.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != axis
        ):
            raise ShapeError(f"concat: {t.shape} incompatible with {ref.shape} on axis {axis}")
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def bw(g):
        pre = (slice(None),) * axis
        return tuple(
            np.ascontiguousarray(g[pre + (slice(bounds[i], bounds[i + 1]),)])
            for i in range(len(tensors))
        )

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


def sum(a):  # noqa: A001 - mirrors numpy naming
    a = _as_tensor(a)
    return _make(np.asarray(a.data.sum(dtype=np.float64), dtype=a.dtype), (a,),
                 lambda g: (np.full(a.shape, g, dtype=a.dtype),), "sum")


def mean(a, axis=None):
    a = _as_tensor(a)
    if axis is None:
        n = a.data.size
        return _make(np.asarray(a.data.mean(dtype=np.float64), dtype=a.dtype), (a,),
                     lambda g: (np.full(a.shape, g / n, dtype=a.dtype),), "mean")
    axis = axis % a.ndim
    n = a.shape[axis]

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g / n, axis), a.shape).astype(a.dtype),)

    return _make(a.data.mean(axis=axis).astype(a.dtype), (a,), bw, "mean")


# --------------------------------------------------------------------------
# contractions
# --------------------------------------------------------------------------


def matmul(a, b):
    """Matrix product; leading (batch) axes must match exactly."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return _make(a.data @ b.data, (a, b), bw, "matmul")


def mode_product(t, m, mode):
    """Mode-``mode`` product of a 3-way tensor with a matrix (1-based mode).

    ``(t x_n m)`` contracts axis ``n`` of ``t`` with the second axis of ``m``;
    the result has ``m.shape[0]`` in place of that axis.
    """
    t, m = _as_tensor(t), _as_tensor(m)
    if t.ndim != 3 or mode not in (1, 2, 3):
        raise ValueError(f"mode_product: invalid mode {mode} for tensor of shape {t.shape}")
    if m.ndim != 2:
        raise ShapeError(f"mode_product: factor must be a matrix, got {m.shape}")
    ax = mode - 1
    if m.shape[1] != t.shape[ax]:
        raise ShapeError(
            f"mode_product: factor {m.shape} does not match mode-{mode} size {t.shape[ax]}"
        )
    # move the contracted axis last, multiply by m^T, move the new axis back
    moved = np.moveaxis(t.data, ax, -1)
    out = np.ascontiguousarray(np.moveaxis(moved @ m.data.T, -1, ax))

    def bw(g):
        g_moved = np.moveaxis(g, ax, -1)
        gt = np.ascontiguousarray(np.moveaxis(g_moved @ m.data, -1, ax)) if t.requires_grad else None
        gm = None
        if m.requires_grad:
            gm = g_moved.reshape(-1, m.shape[0]).T @ moved.reshape(-1, m.shape[1])
        return gt, gm

    return _make(out, (t, m), bw, "mode_product")


# --------------------------------------------------------------------------
# nonlinearities and losses
# --------------------------------------------------------------------------


def _rows(x):
    return np.ascontiguousarray(x.reshape(-1, x.shape[-1]))


def softmax_rows(a):
    """Softmax over the last axis. NaN inputs propagate to NaN outputs."""
    a = _as_tensor(a)
    y = kernels.softmax_forward(_rows(a.data)).reshape(a.shape)

    def bw(g):
        return (kernels.softmax_backward(_rows(y), _rows(g)).reshape(a.shape),)

    return _make(y, (a,), bw, "softmax")


def gelu(a):
    """Exact GELU, ``x * Phi(x)`` with the erf-based normal CDF."""
    a = _as_tensor(a)
    flat = a.data.reshape(-1)
    y = kernels.gelu_forward(flat).reshape(a.shape)

    def bw(g):
        return (kernels.gelu_backward(flat, np.ascontiguousarray(g).reshape(-1)).reshape(a.shape),)

    return _make(y, (a,), bw, "gelu")


def layer_norm(a, gamma, beta, eps=LN_EPS):
    """Normalize the last axis to zero mean / unit variance, then apply ``gamma``, ``beta``."""
    a, gamma, beta = _as_tensor(a), _as_tensor(gamma), _as_tensor(beta)
    d = a.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: gamma {gamma.shape}/beta {beta.shape} vs features {d}")
    out, xhat, rstd = kernels.layernorm_forward(
        _rows(a.data), gamma.data.astype(a.dtype), beta.data.astype(a.dtype), eps
    )

    def bw(g):
        dx, dgamma, dbeta = kernels.layernorm_backward(
            _rows(g), xhat, rstd, gamma.data.astype(a.dtype)
        )
        return dx.reshape(a.shape), dgamma, dbeta

    return _make(out.reshape(a.shape), (a, gamma, beta), bw, "layer_norm")


def log_softmax_np(x):
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def cross_entropy(logits, labels):
    """Mean cross-entropy of ``logits`` (B x C) against integer ``labels``."""
    logits = _as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    b = logits.shape[0]
    logp = log_softmax_np(logits.data.astype(np.float64))
    loss = -logp[np.arange(b), labels].mean()

    def bw(g):
        p = np.exp(logp)
        p[np.arange(b), labels] -= 1.0
        return ((p * (g.item() / b)).astype(logits.dtype),)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), bw, "cross_entropy")
