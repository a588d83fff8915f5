"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every operation on a tensor that requires gradients records its parents and a
backward closure on the result. ``Tensor.backward`` orders the recorded graph
topologically (parents before children) and replays it once in reverse, so
each graph is its own tape and independent graphs share no state.

Broadcasting is deliberately limited to scalar-versus-tensor. Anything else
must go through :func:`broadcast_to` explicitly.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, DimensionError, DomainError, NumericError

__all__ = [
    "Tensor", "tensor", "node", "elementwise", "add", "sub", "mul", "div", "neg",
    "exp", "log", "power", "relu", "tanh", "sigmoid", "softplus", "matmul",
    "sum", "mean", "reshape", "transpose", "take", "concat", "broadcast_to",
    "logsumexp", "log_softmax", "softmax", "clip_min", "grad_check",
]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
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

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __len__(self):
        return self.data.shape[0]

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def numpy(self):
        return self.data

    def detach(self):
        """Return a new leaf sharing the values; gradients never cross it."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        if self.data.size != 1:
            raise ContractError(f"backward needs a scalar root, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("backward root is not attached to any differentiable input")
        order = _topological(self)
        pending = {id(self): np.ones_like(self.data)}
        for t in reversed(order):
            g = pending.pop(id(t), None)
            if g is None:
                continue
            t.grad = g if t.grad is None else t.grad + g
            if t._backward is None:
                continue
            for parent, pg in zip(t._parents, t._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, n):
        return power(self, n)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return _getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def tensor(data, requires_grad=False):
    return data if isinstance(data, Tensor) else Tensor(data, requires_grad)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def node(data, parents, backward, op="op"):
    """Wrap ``data`` as the output of an operation.

    ``backward(g)`` must return one gradient (or None) per parent. When no
    parent requires gradients the result is a detached constant.
    """
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _topological(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        for p in reversed(t._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


# ---------------------------------------------------------------- elementwise

def _pair(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise DimensionError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def _operand(t, other):
    # a size-1 operand is used as a 0-d scalar so it never reshapes the other
    return t.data.reshape(()) if t.size == 1 and t.shape != other.shape else t.data


def _reduce_to(g, shape):
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def add(a, b):
    a, b = _pair(a, b)
    out = _operand(a, b) + _operand(b, a)
    return node(out, (a, b), lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape)), "add")


def sub(a, b):
    a, b = _pair(a, b)
    out = _operand(a, b) - _operand(b, a)
    return node(out, (a, b), lambda g: (_reduce_to(g, a.shape), _reduce_to(-g, b.shape)), "sub")


def mul(a, b):
    a, b = _pair(a, b)
    x, y = _operand(a, b), _operand(b, a)

    def backward(g):
        return _reduce_to(g * y, a.shape), _reduce_to(g * x, b.shape)

    return node(x * y, (a, b), backward, "mul")


def div(a, b):
    a, b = _pair(a, b)
    x, y = _operand(a, b), _operand(b, a)

    def backward(g):
        return _reduce_to(g / y, a.shape), _reduce_to(-g * x / (y * y), b.shape)

    return node(x / y, (a, b), backward, "div")


def neg(a):
    a = _as_tensor(a)
    return node(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a):
    a = _as_tensor(a)
    out = np.exp(a.data)
    return node(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    a = _as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log of a non-positive value")
    x = a.data
    return node(np.log(x), (a,), lambda g: (g / x,), "log")


def power(a, n):
    a = _as_tensor(a)
    x = a.data
    return node(x ** n, (a,), lambda g: (g * n * x ** (n - 1),), "pow")


def relu(a):
    a = _as_tensor(a)
    keep = a.data > 0
    return node(np.where(keep, a.data, 0.0), (a,), lambda g: (g * keep,), "relu")


def tanh(a):
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return node(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def _sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a):
    a = _as_tensor(a)
    out = _sigmoid(a.data)
    return node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(a):
    """log(1 + e^x); logaddexp keeps both tails exact."""
    a = _as_tensor(a)
    x = a.data
    return node(np.logaddexp(0.0, x), (a,), lambda g: (g * _sigmoid(x),), "softplus")


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "div": div, "neg": neg, "exp": exp, "log": log}
_UNARY = {"neg", "exp", "log"}


def elementwise(op_kind, a, b=None):
    try:
        fn = _ELEMENTWISE[op_kind]
    except KeyError:
        raise ContractError(f"unknown elementwise op {op_kind!r}") from None
    if op_kind in _UNARY:
        return fn(a)
    if b is None:
        raise ContractError(f"{op_kind} needs two operands")
    return fn(a, b)


def clip_min(a, floor):
    """max(a, floor) with zero gradient where the floor is active."""
    a = _as_tensor(a)
    active = a.data > floor
    return node(np.where(active, a.data, floor), (a,), lambda g: (g * active,), "clip_min")


# ------------------------------------------------------------------ structure

def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul needs rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner extents differ: {a.shape} @ {b.shape}")
    x, y = a.data, b.data
    return node(x @ y, (a, b), lambda g: (g @ y.T, x.T @ g), "matmul")


def _expand(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(np.asarray(g).reshape((1,) * len(shape)), shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    shape = a.shape
    out = np.sum(a.data, axis=axis, keepdims=keepdims)
    return node(np.asarray(out), (a,), lambda g: (_expand(g, shape, axis, keepdims),), "sum")


def mean(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    shape = a.shape
    count = a.size if axis is None else int(np.prod([shape[i] for i in np.atleast_1d(axis)]))
    out = np.mean(a.data, axis=axis, keepdims=keepdims)
    return node(np.asarray(out), (a,),
                lambda g: (_expand(g, shape, axis, keepdims) / count,), "mean")


def reshape(a, shape):
    a = _as_tensor(a)
    old = a.shape
    return node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None):
    a = _as_tensor(a)
    axes = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return node(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                lambda g: (g.transpose(inverse),), "transpose")


def _getitem(a, idx):
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return node(np.array(a.data[idx]), (a,), backward, "getitem")


def take(a, indices, axis=0):
    """Gather slices along ``axis``; repeated indices accumulate gradient."""
    a = _as_tensor(a)
    indices = np.asarray(indices, dtype=np.intp)
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, indices.ravel(),
                  np.moveaxis(g, axis, 0).reshape((indices.size,) + moved.shape[1:]))
        return (full,)

    return node(np.take(a.data, indices, axis=axis), (a,), backward, "take")


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return node(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def broadcast_to(a, shape):
    """Explicit numpy-style broadcast; the gradient is summed back."""
    a = _as_tensor(a)
    shape = tuple(shape)
    src = a.shape
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError as exc:
        raise DimensionError(f"cannot broadcast {src} to {shape}") from exc
    lead = len(shape) - len(src)

    def backward(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, n in enumerate(src) if n == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)

    return node(np.ascontiguousarray(out), (a,), backward, "broadcast")


# --------------------------------------------------------------- reductions

def logsumexp(a, axis=None, keepdims=False, mask=None):
    """Max-shifted log-sum-exp. ``mask`` (bool, same shape) excludes entries."""
    a = _as_tensor(a)
    x = a.data
    if x.size == 0 or (axis is not None and x.shape[axis] == 0):
        raise DomainError("logsumexp over an empty axis")
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not np.all(np.any(mask, axis=axis)):
            raise DomainError("logsumexp over an axis with every entry masked")
        x = np.where(mask, x, -np.inf)
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    total = np.sum(e, axis=axis, keepdims=True)
    out = m + np.log(total)
    weights = e / total
    shape = a.shape

    def backward(g):
        return (_expand(g, shape, axis, keepdims) * weights,)

    if not keepdims:
        out = out.reshape(()) if axis is None else np.squeeze(out, axis=axis)
    return node(np.asarray(out), (a,), backward, "logsumexp")


def log_softmax(a, axis=-1):
    a = _as_tensor(a)
    x = a.data
    m = np.max(x, axis=axis, keepdims=True)
    shifted = x - m
    out = shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    p = np.exp(out)

    def backward(g):
        return (g - p * np.sum(g, axis=axis, keepdims=True),)

    return node(out, (a,), backward, "log_softmax")


def softmax(a, axis=-1):
    a = _as_tensor(a)
    x = a.data
    e = np.exp(x - np.max(x, axis=axis, keepdims=True))
    p = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        return (p * (g - np.sum(g * p, axis=axis, keepdims=True)),)

    return node(p, (a,), backward, "softmax")


# --------------------------------------------------------------- gradients

def grad_check(f, x, h=1e-5, coords=None):
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps the tensor ``x`` to a scalar tensor; ``x`` is perturbed in
    place and restored. ``coords`` optionally restricts the check to a subset
    of flat indices. Error per coordinate is
    ``|analytic - numeric| / max(1, |analytic|)``.
    """
    x.grad = None
    out = f(x)
    if not np.isfinite(out.data).all():
        raise NumericError("function is not finite at the check point")
    out.backward()
    analytic = np.zeros(x.size) if x.grad is None else x.grad.reshape(-1).copy()
    flat = x.data.reshape(-1)
    idx = range(x.size) if coords is None else np.asarray(coords).ravel()
    worst = 0.0
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x).item()
        flat[i] = orig - h
        fm = f(x).item()
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite evaluation at coordinate {i}")
        numeric = (fp - fm) / (2.0 * h)
        err = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]))
        worst = max(worst, err)
    return worst
