"""Dense float64 tensors with tape-style reverse-mode autodiff.

Every differentiable op builds its output through :func:`record`, which
stores the parents and a closure mapping the output gradient to one gradient
per parent.  :meth:`Tensor.backward` topologically sorts the recorded
subgraph and runs the closures once each, in reverse execution order.

Broadcasting is deliberately narrow: the second operand of ``add``/``mul``
may match a trailing slice of the first operand's shape (bias add, gain).
"""

from __future__ import annotations

import contextlib
import itertools

import numpy as np

from .errors import ContractError, DimensionError, InputError, NumericError

_GRAD_ENABLED = True
_counter = itertools.count()


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_order")

    def __init__(self, data, requires_grad=False, dtype=np.float64):
        arr = np.array(data, dtype=dtype)
        if not np.all(np.isfinite(arr)):
            raise NumericError("tensor data contains NaN or Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._op = "leaf"
        self._order = next(_counter)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(()))

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self):
        """Populate ``.grad`` on every requires_grad leaf reachable from this scalar."""
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        if self._backward is None and not self.requires_grad:
            raise ContractError("loss is not connected to any tensor requiring grad")
        nodes = _topo_order(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topo_order(root):
    # iterative DFS; recursion would overflow on deep graphs
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
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


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def record(data, parents, backward, op):
    """Wrap ``data`` as the output of a differentiable op.

    ``backward(g)`` must return one array (or None) per parent.
    """
    if not np.all(np.isfinite(data)):
        raise NumericError(f"{op} produced NaN or Inf")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._order = next(_counter)
    track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = track
    out._parents = tuple(parents) if track else ()
    out._backward = backward if track else None
    out._op = op
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


def _check_trailing(a, b, op):
    if a.shape == b.shape:
        return
    if b.ndim <= a.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
        return
    raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are not compatible")


# elementwise -----------------------------------------------------------------

def add(a, b):
    _check_trailing(a, b, "add")
    sb = b.shape
    return record(a.data + b.data, (a, b), lambda g: (g, _unbroadcast(g, sb)), "add")


def mul(a, b):
    _check_trailing(a, b, "mul")
    ad, bd, sb = a.data, b.data, b.shape

    def backward(g):
        return g * bd, _unbroadcast(g * ad, sb)

    return record(ad * bd, (a, b), backward, "mul")


def scale(x, c):
    c = float(c)
    return record(x.data * c, (x,), lambda g: (g * c,), "scale")


def exp(x):
    y = np.exp(x.data)
    return record(y, (x,), lambda g: (g * y,), "exp")


def log(x):
    xd = x.data
    if np.any(xd <= 0):
        raise NumericError("log of non-positive value")
    return record(np.log(xd), (x,), lambda g: (g / xd,), "log")


def square(x):
    xd = x.data
    return record(xd * xd, (x,), lambda g: (2.0 * g * xd,), "square")


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def silu(x):
    xd = x.data
    s = _sigmoid(xd)

    def backward(g):
        return (g * s * (1.0 + xd * (1.0 - s)),)

    return record(xd * s, (x,), backward, "silu")


_GELU_K = np.sqrt(2.0 / np.pi)


def gelu(x):
    """tanh-approximated GELU."""
    xd = x.data
    u = _GELU_K * (xd + 0.044715 * xd**3)
    t = np.tanh(u)

    def backward(g):
        du = _GELU_K * (1.0 + 3 * 0.044715 * xd**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * du),)

    return record(0.5 * xd * (1.0 + t), (x,), backward, "gelu")


# reductions / shape ----------------------------------------------------------

def sum(x):  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    return record(np.array(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean(x):
    n = x.size
    shape = x.shape
    return record(
        np.array(x.data.mean()), (x,), lambda g: (np.broadcast_to(g / n, shape).copy(),), "mean"
    )


def reshape(x, shape):
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    return record(out, (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return record(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def concat(tensors, axis=-1):
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("concat of zero tensors")
    axis = axis % tensors[0].ndim
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return record(out, tensors, backward, "concat")


# linear algebra --------------------------------------------------------------

def matmul(a, b):
    """Matrix product; leading (batch) dimensions must match exactly."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return record(ad @ bd, (a, b), backward, "matmul")


def linear(x, w):
    """x[..., k] @ w[k, n] with any number of leading dims on x."""
    if x.shape[-1] != w.shape[0] or w.ndim != 2:
        raise DimensionError(f"linear: incompatible shapes {x.shape} and {w.shape}")
    xd, wd = x.data, w.data
    k = xd.shape[-1]

    def backward(g):
        gw = xd.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
        return g @ wd.T, gw

    return record(xd @ wd, (x, w), backward, "linear")


def embedding(weight, ids):
    """Row lookup ``weight[ids]``; ``ids`` is an integer array."""
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise InputError("embedding ids must be integers")
    n = weight.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise InputError(f"embedding id out of range [0, {n})")
    wshape = weight.shape

    def backward(g):
        gw = np.zeros(wshape, dtype=g.dtype)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, wshape[1]))
        return (gw,)

    return record(weight.data[ids], (weight,), backward, "embedding")


# normalization / softmax -----------------------------------------------------

def rms_norm(x, gain, eps=1e-6):
    xd, gd = x.data, gain.data
    r = 1.0 / np.sqrt(np.mean(xd * xd, axis=-1, keepdims=True) + eps)
    xhat = xd * r

    def backward(g):
        gy = g * gd
        gx = r * (gy - xhat * np.mean(gy * xhat, axis=-1, keepdims=True))
        ggain = (g * xhat).reshape(-1, gd.shape[-1]).sum(axis=0)
        return gx, ggain

    return record(xhat * gd, (x, gain), backward, "rms_norm")


def log_softmax(x, axis=-1):
    xd = x.data
    if not np.all(np.isfinite(xd)):
        raise NumericError("log_softmax input is not finite")
    if xd.shape[axis] < 1:
        raise DimensionError("log_softmax over an empty axis")
    out = log_softmax_array(xd, axis)

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return record(out, (x,), backward, "log_softmax")


def log_softmax_array(z, axis=-1):
    """Plain-array log-softmax via max subtraction."""
    shifted = z - z.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


_MASKS = {}


def _causal_mask(t):
    m = _MASKS.get(t)
    if m is None:
        m = _MASKS[t] = np.tril(np.ones((t, t), dtype=bool))
    return m


def causal_softmax(scores):
    """Softmax over the last axis of [..., T, T] with keys after the query masked out."""
    t = scores.shape[-1]
    if scores.ndim < 2 or scores.shape[-2] != t:
        raise DimensionError(f"causal_softmax needs [..., T, T], got {scores.shape}")
    mask = _causal_mask(t)
    s = np.where(mask, scores.data, -np.inf)
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return record(y, (scores,), backward, "causal_softmax")


def rotary(x, cos, sin):
    """Rotate channel pairs (i, i + D/2) of x[..., T, D] by position-dependent angles.

    ``cos``/``sin`` are plain arrays of shape [T, D/2].
    """
    d = x.shape[-1]
    if d % 2:
        raise DimensionError("rotary needs an even head dimension")
    h = d // 2
    xd = x.data
    x1, x2 = xd[..., :h], xd[..., h:]
    out = np.concatenate([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=-1)

    def backward(g):
        g1, g2 = g[..., :h], g[..., h:]
        return (np.concatenate([g1 * cos + g2 * sin, g2 * cos - g1 * sin], axis=-1),)

    return record(out, (x,), backward, "rotary")


def rotary_tables(t, d, base=10000.0):
    inv = base ** (-np.arange(0, d // 2, dtype=np.float64) * 2.0 / d)
    ang = np.outer(np.arange(t, dtype=np.float64), inv)
    return np.cos(ang), np.sin(ang)
