"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Every primitive records its inputs and a backward closure on the output
tensor when any input requires a gradient.  :func:`backward` linearises the
recorded graph into a :class:`Tape` (topological order) and walks it once in
reverse, accumulating gradients into the requires-grad leaves.
"""

import contextlib
import math
import threading

import numpy as np

_state = threading.local()
_default_dtype = np.float64

# clamp used at every in-pipeline log/divide site
EPS = 1e-12


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    """log or divide hit an unguarded non-positive / zero operand."""


def set_default_dtype(dtype):
    global _default_dtype
    _default_dtype = np.dtype(dtype).type


def get_default_dtype():
    return _default_dtype


def _grad_enabled():
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")
    # make ndarray <op> Tensor defer to the Tensor's reflected operator
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = np.array(data, dtype=dtype or _default_dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if requires_grad else None
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
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return not self._parents

    @property
    def T(self):
        return transpose(self)

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return affine(self, -1.0, 0.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)


def as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _result(data, parents, backward, op):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def _axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


# ---------------------------------------------------------------------------
# elementwise binary


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), bw, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, (a, b), bw, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    if np.any(b.data == 0):
        raise DomainError("div: zero denominator (guard the operand with an eps clamp)")
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), bw, "div")


# ---------------------------------------------------------------------------
# elementwise unary


def affine(x, scale=1.0, shift=0.0):
    """``scale * x + shift`` for python scalars."""
    x = as_tensor(x)

    def bw(g):
        return (g * scale,)

    return _result(x.data * scale + shift, (x,), bw, "affine")


def exp(x):
    x = as_tensor(x)
    out = np.exp(x.data)

    def bw(g):
        return (g * out,)

    return _result(out, (x,), bw, "exp")


def log(x):
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise DomainError("log: non-positive operand (guard the operand with an eps clamp)")

    def bw(g):
        return (g / x.data,)

    return _result(np.log(x.data), (x,), bw, "log")


def power(x, p):
    x = as_tensor(x)
    out = x.data ** p

    def bw(g):
        return (g * p * x.data ** (p - 1),)

    return _result(out, (x,), bw, "power")


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0

    def bw(g):
        return (g * mask,)

    return _result(x.data * mask, (x,), bw, "relu")


def clip(x, lo, hi):
    x = as_tensor(x)
    mask = (x.data > lo) & (x.data < hi)

    def bw(g):
        return (g * mask,)

    return _result(np.clip(x.data, lo, hi), (x,), bw, "clip")


# ---------------------------------------------------------------------------
# linear algebra and shape


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data @ b.data, (a, b), bw, "matmul")


def transpose(x, axes=None):
    """Permute axes; the default swaps the last two."""
    x = as_tensor(x)
    if axes is None:
        if x.ndim < 2:
            raise ShapeError(f"transpose: needs at least 2 axes, got shape {x.shape}")
        axes = list(range(x.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        return (np.transpose(g, inv),)

    return _result(np.transpose(x.data, axes), (x,), bw, "transpose")


def reshape(x, shape):
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None

    def bw(g):
        return (g.reshape(x.shape),)

    return _result(out, (x,), bw, "reshape")


def concat(xs, axis=0):
    xs = [as_tensor(x) for x in xs]
    ref = xs[0].shape
    ax = axis % len(ref)
    for x in xs[1:]:
        if x.ndim != len(ref) or any(x.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {ref} and {x.shape} along axis {axis}")
    sizes = np.cumsum([x.shape[ax] for x in xs])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=ax))

    return _result(np.concatenate([x.data for x in xs], axis=ax), tuple(xs), bw, "concat")


def _is_basic_key(key):
    parts = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (slice, int, type(None))) or k is Ellipsis for k in parts)


def getitem(x, key):
    x = as_tensor(x)
    out = x.data[key]
    basic = _is_basic_key(key)

    def bw(g):
        z = np.zeros_like(x.data)
        if basic:
            z[key] = g
        else:
            np.add.at(z, key, g)
        return (z,)

    return _result(np.array(out), (x,), bw, "getitem")


def gather_rows(x, index):
    """Rows of ``x`` selected by an integer index array (repeats allowed)."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)

    def bw(g):
        z = np.zeros_like(x.data)
        np.add.at(z, index, g)
        return (z,)

    return _result(x.data[index], (x,), bw, "gather_rows")


# ---------------------------------------------------------------------------
# reductions


def sum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    axes = _axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(np.asarray(out), (x,), bw, "sum")


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    axes = _axes(axis, x.ndim)
    n = math.prod(x.shape[a] for a in axes)
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return _result(np.asarray(out), (x,), bw, "mean")


def var(x, axis=None, keepdims=False):
    """Population variance (divides by the element count)."""
    x = as_tensor(x)
    axes = _axes(axis, x.ndim)
    n = math.prod(x.shape[a] for a in axes)
    centered = x.data - x.data.mean(axis=axes, keepdims=True)
    out = (centered * centered).mean(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (g * (2.0 / n) * centered,)

    return _result(np.asarray(out), (x,), bw, "var")


def max(x, axis=-1, keepdims=False):
    """Max along one axis; the gradient goes to the first maximal index."""
    x = as_tensor(x)
    ax = axis % x.ndim
    arg = np.expand_dims(np.argmax(x.data, axis=ax), ax)
    out = np.take_along_axis(x.data, arg, axis=ax)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        z = np.zeros_like(x.data)
        np.put_along_axis(z, arg, g, axis=ax)
        return (z,)

    return _result(out if keepdims else np.squeeze(out, ax), (x,), bw, "max")


def softmax(x, axis=-1):
    x = as_tensor(x)
    ax = axis % x.ndim
    e = np.exp(x.data - x.data.max(axis=ax, keepdims=True))
    out = e / e.sum(axis=ax, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=ax, keepdims=True)),)

    return _result(out, (x,), bw, "softmax")


# ---------------------------------------------------------------------------
# tape and backward


class Tape:
    """Recorded primitive applications in topological order."""

    def __init__(self, entries):
        self.entries = entries

    def __len__(self):
        return len(self.entries)

    @classmethod
    def record(cls, root):
        order = []
        seen = set()
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
        return cls(order)


def backward(root, tape=None):
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if root.size != 1:
        raise ShapeError(f"backward: root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        return
    if tape is None:
        tape = Tape.record(root)
    grads = {id(root): np.ones_like(root.data)}
    for node in reversed(tape.entries):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def grad_check(f, x, step=1e-5, indices=None, direction=None):
    """Max relative error between the analytic and central-difference gradient.

    ``f`` maps the leaf tensor ``x`` to a scalar tensor.  A NaN anywhere in
    the numeric estimate is reported as ``inf``.  ``indices`` restricts the
    comparison to those flat coordinates of ``x``.  With ``direction`` a
    single directional derivative along that array is compared instead.
    """
    saved = None if x.grad is None else x.grad.copy()
    x.requires_grad = True
    x.grad = np.zeros_like(x.data)
    backward(f(x))
    analytic = x.grad.copy()
    x.grad = saved

    flat = x.data.reshape(-1)

    def central(delta):
        orig = flat.copy()
        with no_grad():
            flat[:] = orig + delta
            fp = f(x).item()
            flat[:] = orig - delta
            fm = f(x).item()
        flat[:] = orig
        return (fp - fm) / (2 * step)

    if direction is not None:
        v = np.asarray(direction, dtype=flat.dtype).reshape(-1)
        analytic = np.array([analytic.reshape(-1) @ v])
        numeric = np.array([central(step * v)])
    else:
        idx = np.arange(flat.size) if indices is None else np.asarray(indices, dtype=np.int64).reshape(-1)
        analytic = analytic.reshape(-1)[idx]
        numeric = np.empty(len(idx))
        for n, k in enumerate(idx):
            delta = np.zeros_like(flat)
            delta[k] = step
            numeric[n] = central(delta)
    if not np.all(np.isfinite(numeric)):
        return math.inf
    denom = np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom, initial=0.0))


# ---------------------------------------------------------------------------
# parameter containers


class Module:
    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            path = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()


class Linear(Module):
    """Dense layer ``x @ W + b`` with uniform fan-in init."""

    def __init__(self, n_in, n_out, rng, bias=True, gain=math.sqrt(2.0)):
        bound = gain * math.sqrt(3.0 / n_in)
        self.W = Parameter(rng.uniform(-bound, bound, size=(n_in, n_out)))
        self.b = Parameter(np.zeros(n_out)) if bias else None

    def __call__(self, x):
        y = matmul(x, self.W)
        return y if self.b is None else add(y, self.b)
