"""Minimal reverse-mode autodiff over float64 numpy arrays.

Every op returns a new :class:`Tensor`; arrays are never mutated once they
enter a graph. Nodes carry a monotonically increasing id, and
:func:`backward` sweeps them in decreasing id order, so gradient accumulation
follows graph insertion order and is bitwise reproducible.

Broadcasting is deliberately narrow: the second operand of a binary op may
have the same shape as the first or a trailing suffix of it (bias rows,
scalars). Anything else raises :class:`DimensionError`.
"""

from __future__ import annotations

import contextlib
import itertools
import threading

import numpy as np
from scipy.special import erfc

from .errors import ContractError, DimensionError

_ids = itertools.count()
_state = threading.local()

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def is_grad_enabled():
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (teacher / evaluation mode) in this thread."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_id", "op")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float64).view()
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._id = next(_ids)
        self.op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return np.array(self.data)

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ContractError(f"tensor of shape {self.shape} is not a scalar")

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward, op):
    out = Tensor(data)
    out.op = op
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _check_suffix(a, b, op):
    sa, sb = a.shape, b.shape
    if sa == sb:
        return
    if len(sb) <= len(sa) and sa[len(sa) - len(sb):] == sb:
        return
    if len(sa) <= len(sb) and sb[len(sb) - len(sa):] == sa:
        return
    raise DimensionError(f"{op}: shapes {sa} and {sb} are not broadcastable")


def _unbroadcast(grad, shape):
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    return grad


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_suffix(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), backward, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_suffix(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _node(a.data - b.data, (a, b), backward, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_suffix(a, b, "mul")

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(a.data * b.data, (a, b), backward, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_suffix(a, b, "div")
    out = a.data / b.data

    def backward(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _node(out, (a, b), backward, "div")


def elementwise(a, b, kind):
    ops = {"add": add, "sub": sub, "mul": mul}
    if kind not in ops:
        raise ValueError(f"unknown elementwise kind {kind!r}")
    return ops[kind](a, b)


def neg(a):
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a, c):
    c = float(c)
    return _node(a.data * c, (a,), lambda g: (g * c,), "scale")


def sqrt(a):
    out = np.sqrt(a.data)

    def backward(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(out > 0, 0.5 / np.where(out > 0, out, 1.0), 0.0)
        return (g * d,)

    return _node(out, (a,), backward, "sqrt")


def abs_(a):
    return _node(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def clamp_min(a, floor):
    """max(a, floor); gradient is zero wherever the floor is active."""
    mask = a.data > floor
    return _node(np.where(mask, a.data, floor), (a,), lambda g: (g * mask,), "clamp_min")


def exp(a):
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def gelu(a):
    """Exact GELU, x * Phi(x)."""
    x = a.data
    cdf = 0.5 * erfc(-x / _SQRT2)  # no cancellation for large negative x

    def backward(g):
        return (g * (cdf + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)),)

    return _node(x * cdf, (a,), backward, "gelu")


# ---------------------------------------------------------------- linear algebra

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not align")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch shapes {a.shape} and {b.shape} differ")
    if b.ndim > a.ndim:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not align")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if b.ndim == 2:
            k, n = b.shape
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ga, gb

    return _node(out, (a, b), backward, "matmul")


def layer_norm(a, gamma, beta, eps=1e-6):
    d = a.shape[-1]
    if d == 0:
        raise DimensionError("layer_norm: last dimension is empty")
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm: affine shapes {gamma.shape}, {beta.shape} vs width {d}")
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        lead = tuple(range(x.ndim - 1))
        ggamma = (g * xhat).sum(axis=lead)
        gbeta = g.sum(axis=lead)
        gx_hat = g * gamma.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, ggamma, gbeta

    return _node(out, (a, gamma, beta), backward, "layer_norm")


def softmax(a):
    x = a.data
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _node(out, (a,), backward, "softmax")


def log_softmax_np(x):
    m = x.max(axis=-1, keepdims=True)
    z = x - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(logits, labels):
    """Mean of -log softmax(logits)[label] over the leading rows.

    ``logits`` is (n,) with an int label, or (N, n) with an int array.
    """
    labels = np.asarray(labels, dtype=np.int64)
    single = logits.ndim == 1
    x = logits.data[None, :] if single else logits.data.reshape(-1, logits.shape[-1])
    lab = labels.reshape(-1)
    n = x.shape[-1]
    if n < 1:
        raise DimensionError("cross_entropy: no classes")
    if lab.shape[0] != x.shape[0]:
        raise DimensionError(f"cross_entropy: {x.shape[0]} rows vs {lab.shape[0]} labels")
    if lab.size and (lab.min() < 0 or lab.max() >= n):
        raise IndexError(f"cross_entropy: label out of range for {n} classes")
    lsm = log_softmax_np(x)
    rows = np.arange(x.shape[0])
    loss = -lsm[rows, lab].mean()

    def backward(g):
        p = np.exp(lsm)
        p[rows, lab] -= 1.0
        p *= g / x.shape[0]
        return (p.reshape(logits.shape),)

    return _node(np.asarray(loss), (logits,), backward, "cross_entropy")


# ---------------------------------------------------------------- reductions and shape

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise DimensionError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    return tuple(sorted(out))


def sum_(a, axis=None, keepdims=False):
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(out, (a,), backward, "sum")


def mean(a, axis=None, keepdims=False):
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _node(out, (a,), backward, "mean")


def reduce(a, kind, axis=None):
    if kind == "sum":
        return sum_(a, axis)
    if kind == "mean":
        return mean(a, axis)
    raise ValueError(f"unknown reduction {kind!r}")


def reshape(a, shape):
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}") from exc
    return _node(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    if sorted(axes) != list(range(a.ndim)):
        raise DimensionError(f"transpose: invalid permutation {axes} for rank {a.ndim}")
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return _node(out, (a,), lambda g: (g.transpose(inverse),), "transpose")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0]
    ax = _norm_axis(axis, ref.ndim)[0]
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(t.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != ax):
            raise DimensionError(f"concat: shapes {ref.shape} and {t.shape} differ off axis {ax}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([t.data for t in tensors], axis=ax)

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax)
                     for i in range(len(tensors)))

    return _node(out, tuple(tensors), backward, "concat")


def _check_index(index, shape):
    idx = index if isinstance(index, tuple) else (index,)
    if len(idx) > len(shape):
        raise DimensionError(f"slice: too many indices for shape {shape}")
    for dim, i in enumerate(idx):
        if isinstance(i, (int, np.integer)):
            if not -shape[dim] <= i < shape[dim]:
                raise DimensionError(f"slice: index {i} out of bounds for axis {dim} of size {shape[dim]}")
        elif isinstance(i, slice):
            if i.step not in (None, 1):
                raise DimensionError("slice: only unit steps are supported")
            for bound in (i.start, i.stop):
                if bound is not None and not -shape[dim] <= bound <= shape[dim]:
                    raise DimensionError(f"slice: bound {bound} out of range for axis {dim} of size {shape[dim]}")
        else:
            raise DimensionError(f"slice: unsupported index {i!r}")


def slice_(a, index):
    """Basic indexing (ints and unit-step slices); backward scatters into zeros."""
    _check_index(index, a.shape)
    out = np.array(a.data[index])

    def backward(g):
        full = np.zeros(a.shape)
        full[index] = g
        return (full,)

    return _node(out, (a,), backward, "slice")


# ---------------------------------------------------------------- backward

def backward(loss):
    """Populate ``.grad`` on every grad-requiring tensor reachable from ``loss``."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")
    nodes = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t._id in nodes:
            continue
        nodes[t._id] = t
        stack.extend(p for p in t._parents if p.requires_grad and p._id not in nodes)
    grads = {loss._id: np.ones(loss.shape)}
    for nid in sorted(nodes, reverse=True):
        t = nodes[nid]
        g = grads.get(nid)
        if g is None:
            continue
        t.grad = g
        if t._backward is None:
            continue
        for p, pg in zip(t._parents, t._backward(g)):
            if not p.requires_grad or pg is None:
                continue
            prev = grads.get(p._id)
            grads[p._id] = pg if prev is None else prev + pg
    for t in nodes.values():
        if t.grad is None:
            t.grad = np.zeros(t.shape)


def check_gradient(f, x, h=1e-5):
    """Worst relative error between autodiff and central differences.

    ``f`` maps a Tensor to a scalar Tensor; ``x`` is an array or Tensor.
    The denominator is max(|analytic|, |numeric|, 1e-8).
    """
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(x0, requires_grad=True)
    out = f(xt)
    backward(out)
    analytic = xt.grad.reshape(-1)
    flat = x0.reshape(-1)
    worst = 0.0
    with no_grad():
        for i in range(flat.size):
            xp = flat.copy()
            xp[i] += h
            xm = flat.copy()
            xm[i] -= h
            fp = f(Tensor(xp.reshape(x0.shape))).item()
            fm = f(Tensor(xm.reshape(x0.shape))).item()
            numeric = (fp - fm) / (2.0 * h)
            denom = max(abs(analytic[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(analytic[i] - numeric) / denom)
    return worst
