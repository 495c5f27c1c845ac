"""A small float64 tensor with reverse-mode automatic differentiation.

Tensors wrap read-only numpy arrays. An operation whose inputs include a
tracked tensor (``requires_grad=True`` or produced from one) returns a
tracked tensor that remembers its parents and a closure mapping the output
gradient to input gradients. :func:`backward` rebuilds the tape reachable
from a scalar output, ordered by creation id, and walks it once in reverse.

Non-finite values are rejected at construction: a NaN anywhere in the graph
is treated as a bug, never as a value.
"""

import itertools
from dataclasses import dataclass, field

import numpy as np

from . import _kernels, defaults


class NonFiniteError(ValueError):
    """Raised when an operation would produce or consume NaN/inf."""


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


_node_ids = itertools.count()


def _check_finite(arr, where):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite value in {where}")


class Tensor:
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad=False):
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr, "tensor input")
        arr.flags.writeable = False
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self._parents = ()
        self._backward = None
        self.node_id = next(_node_ids) if requires_grad else None

    @classmethod
    def _result(cls, data, parents, backward, op):
        data = np.asarray(data, dtype=np.float64)
        _check_finite(data, op)
        data.flags.writeable = False
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
            out.node_id = next(_node_ids)
        else:
            out._parents = ()
            out._backward = None
            out.node_id = None
        return out

    # -- array protocol -------------------------------------------------
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
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def detach(self):
        return Tensor(self.data)

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # -- operators ------------------------------------------------------
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# -- elementwise binary ------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._result(a.data + b.data, (a, b), bw, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._result(a.data * b.data, (a, b), bw, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    out = a.data / b.data

    def bw(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return Tensor._result(out, (a, b), bw, "div")


def neg(a):
    a = as_tensor(a)
    return Tensor._result(-a.data, (a,), lambda g: (-g,), "neg")


# -- elementwise unary ---------------------------------------------------------


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return Tensor._result(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return Tensor._result(out, (a,), lambda g: (g / a.data,), "log")


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return Tensor._result(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def _sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a):
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return Tensor._result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(a):
    a = as_tensor(a)
    return Tensor._result(np.maximum(a.data, 0.0), (a,), lambda g: (g * (a.data > 0),), "relu")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a):
    """GELU, tanh approximation (smooth everywhere, unlike relu)."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return Tensor._result(out, (a,), bw, "gelu")


# -- linear algebra ------------------------------------------------------------


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 1:
        return reshape(matmul(reshape(a, (1, a.shape[0])), b), b.shape[:-2] + b.shape[-1:])
    if b.ndim == 1:
        return reshape(matmul(a, reshape(b, (b.shape[0], 1))), a.shape[:-1])
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch shapes {a.shape} and {b.shape} do not broadcast") from None

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor._result(a.data @ b.data, (a, b), bw, "matmul")


def conv3d(x, w, stride=1, padding=0):
    """Channels-last 3D convolution without bias.

    ``x`` is (H, W, D, Cin), ``w`` is (k, k, k, Cin, Cout). Zero padding of
    ``padding`` voxels is applied on every spatial side.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 5:
        raise ShapeError(f"conv3d: expected (H,W,D,C) input and (k,k,k,Cin,Cout) kernel, got {x.shape} and {w.shape}")
    k = w.shape[0]
    if w.shape[:3] != (k, k, k) or w.shape[3] != x.shape[3]:
        raise ShapeError(f"conv3d: kernel {w.shape} does not match input {x.shape}")
    if stride < 1:
        raise ShapeError(f"conv3d: stride must be >= 1, got {stride}")
    xp = x.data
    if padding:
        xp = np.pad(xp, ((padding, padding),) * 3 + ((0, 0),))
    if any(n < k for n in xp.shape[:3]):
        raise ShapeError(f"conv3d: input extents {x.shape[:3]} (padded {xp.shape[:3]}) smaller than kernel {k}")
    out = _kernels.conv3d(xp, w.data, stride)

    def bw(g):
        gx = _kernels.conv3d_grad_input(g, w.data, stride, xp.shape)
        if padding:
            gx = gx[padding:-padding, padding:-padding, padding:-padding]
        gw = _kernels.conv3d_grad_weight(xp, g, stride, k)
        return gx, gw

    return Tensor._result(out, (x, w), bw, "conv3d")


# -- reductions and normalisations --------------------------------------------


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor._result(out, (a,), bw, "sum")


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    count = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis, keepdims), 1.0 / count)


def tmax(a, axis=-1, keepdims=False):
    """Max-reduce along one axis; the gradient goes to the first maximiser."""
    a = as_tensor(a)
    idx = np.expand_dims(np.argmax(a.data, axis=axis), axis)
    out = np.take_along_axis(a.data, idx, axis)
    if not keepdims:
        out = np.squeeze(out, axis)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        ga = np.zeros(a.shape)
        np.put_along_axis(ga, idx, g, axis)
        return (ga,)

    return Tensor._result(out, (a,), bw, "max")


def lp_norm(a, p=defaults.NORM_ORDER, axis=-1, keepdims=False):
    """``(sum |x|^p)^(1/p)`` along ``axis``; subgradient 0 where the norm is 0."""
    a = as_tensor(a)
    if p < 1:
        raise ValueError(f"lp_norm needs p >= 1, got {p}")
    x = a.data
    if p == 1:
        out = np.sum(np.abs(x), axis=axis, keepdims=True)
    elif p == 2:
        out = np.sqrt(np.sum(x * x, axis=axis, keepdims=True))
    else:
        out = np.sum(np.abs(x) ** p, axis=axis, keepdims=True) ** (1.0 / p)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        if p == 1:
            return (g * np.sign(x),)
        safe = np.where(out > 0, out, 1.0)
        if p == 2:
            d = x / safe
        else:
            d = np.sign(x) * np.abs(x) ** (p - 1) / safe ** (p - 1)
        return (g * np.where(out > 0, d, 0.0),)

    res = out if keepdims else np.squeeze(out, axis)
    return Tensor._result(res, (a,), bw, "lp_norm")


def softmax(a, axis=-1):
    a = as_tensor(a)
    z = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return Tensor._result(out, (a,), bw, "softmax")


def log_softmax(a, axis=-1):
    a = as_tensor(a)
    z = a.data - np.max(a.data, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def bw(g):
        return (g - sm * np.sum(g, axis=axis, keepdims=True),)

    return Tensor._result(out, (a,), bw, "log_softmax")


def layer_norm(a, eps=defaults.LAYER_NORM_EPS):
    """Normalise the last axis to zero mean and unit variance (no affine)."""
    a = as_tensor(a)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return Tensor._result(xhat, (a,), bw, "layer_norm")


# -- shape and indexing --------------------------------------------------------


def reshape(a, shape):
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None
    return Tensor._result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None):
    a = as_tensor(a)
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return Tensor._result(out, (a,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(a, index):
    a = as_tensor(a)
    out = a.data[index]

    def bw(g):
        ga = np.zeros(a.shape)
        np.add.at(ga, index, g)
        return (ga,)

    return Tensor._result(np.array(out), (a,), bw, "getitem")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"concat: incompatible shapes {shapes}") from None
    cuts = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return Tensor._result(out, tensors, bw, "concat")


def gather(a, index):
    """Rows ``a[index]`` along axis 0 (repeats allowed)."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < -a.shape[0] or index.max() >= a.shape[0]):
        raise IndexError(f"gather: index out of range for {a.shape[0]} rows")

    def bw(g):
        ga = np.zeros(a.shape)
        np.add.at(ga, index, g)
        return (ga,)

    return Tensor._result(a.data[index], (a,), bw, "gather")


def scatter(a, index, rows):
    """Place row ``i`` of ``a`` at row ``index[i]`` of a zero tensor with ``rows`` rows."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    if len(index) != a.shape[0]:
        raise ShapeError(f"scatter: {len(index)} indices for {a.shape[0]} rows")
    if len(np.unique(index)) != len(index):
        raise ValueError("scatter: indices must be unique")
    out = np.zeros((rows,) + a.shape[1:])
    out[index] = a.data
    return Tensor._result(out, (a,), lambda g: (g[index],), "scatter")


# -- tape and backward ---------------------------------------------------------


@dataclass
class Tape:
    """Tracked nodes reachable from an output, in creation (topological) order."""

    nodes: list = field(default_factory=list)

    @classmethod
    def record(cls, output):
        seen = {}
        stack = [output]
        while stack:
            t = stack.pop()
            if not t.requires_grad or t.node_id in seen:
                continue
            seen[t.node_id] = t
            stack.extend(t._parents)
        return cls([seen[k] for k in sorted(seen)])

    def is_topological(self):
        pos = {t.node_id: i for i, t in enumerate(self.nodes)}
        return all(
            pos[p.node_id] < pos[t.node_id] for t in self.nodes for p in t._parents if p.requires_grad
        )


def backward(output, wrt=None):
    """Gradients of a scalar ``output`` with respect to every tracked leaf.

    Returns a dict keyed by leaf tensor; each leaf's ``.grad`` is also set.
    Tensors listed in ``wrt`` that the output does not depend on receive
    zeros. An untracked output yields an empty map.
    """
    if output.size != 1:
        raise ShapeError(f"backward needs a scalar output, got shape {output.shape}")
    grads = {}
    if output.requires_grad:
        tape = Tape.record(output)
        pending = {output.node_id: np.ones(output.shape)}
        for node in reversed(tape.nodes):
            g = pending.pop(node.node_id, None)
            if g is None:
                continue
            if not node._parents:
                grads[node] = g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = pending.get(parent.node_id)
                pending[parent.node_id] = pg if prev is None else prev + pg
    for t in wrt or ():
        grads.setdefault(t, np.zeros(t.shape))
    for t, g in grads.items():
        t.grad = g
    return grads


def evaluate(fn, *inputs, track=False):
    """Run ``fn`` on ``inputs`` wrapped as tensors (tracked when ``track``)."""
    args = [x if isinstance(x, Tensor) else Tensor(x, requires_grad=track) for x in inputs]
    out = fn(*args)
    if not isinstance(out, Tensor):
        raise TypeError(f"graph returned {type(out).__name__}, expected Tensor")
    return out


# -- finite differences ----------------------------------------------------------


@dataclass
class GradCheckReport:
    analytic: np.ndarray
    numeric: np.ndarray
    errors: np.ndarray
    indices: np.ndarray
    tolerance: float

    @property
    def worst(self):
        return float(self.errors.max()) if self.errors.size else 0.0

    @property
    def worst_index(self):
        return int(self.indices[np.argmax(self.errors)]) if self.errors.size else -1

    @property
    def passed(self):
        return self.worst <= self.tolerance

    def __str__(self):
        verdict = "PASS" if self.passed else "FAIL"
        return f"{verdict} worst relative error {self.worst:.3e} at coordinate {self.worst_index} (tolerance {self.tolerance:g}, {len(self.indices)} coordinates)"


def relative_error(analytic, numeric, floor=defaults.FD_FLOOR):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def _scalar(value):
    arr = value.data if isinstance(value, Tensor) else np.asarray(value, dtype=np.float64)
    if arr.size != 1:
        raise ShapeError(f"function must be scalar-valued, got shape {arr.shape}")
    return float(arr.reshape(-1)[0])


def finite_diff_check(fn, point, tolerance=defaults.FD_TOLERANCE, h=defaults.FD_STEP, indices=None):
    """Compare reverse-mode gradients of ``fn`` with central differences.

    ``fn`` maps a Tensor shaped like ``point`` to a scalar Tensor. ``indices``
    restricts the numeric sweep to those flat coordinates (all by default).
    """
    base = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    x = Tensor(base, requires_grad=True)
    out = fn(x)
    analytic = backward(out, wrt=[x])[x].reshape(-1)
    flat = base.reshape(-1)
    idx = np.arange(flat.size) if indices is None else np.asarray(indices, dtype=np.int64)
    numeric = np.empty(len(idx))
    for n, i in enumerate(idx):
        vals = []
        for sign in (1.0, -1.0):
            probe = flat.copy()
            probe[i] += sign * h
            try:
                vals.append(_scalar(fn(Tensor(probe.reshape(base.shape)))))
            except NonFiniteError as exc:
                raise NonFiniteError(f"non-finite function value at coordinate {int(i)} ({'+' if sign > 0 else '-'}h)") from exc
            if not np.isfinite(vals[-1]):
                raise NonFiniteError(f"non-finite function value at coordinate {int(i)}")
        numeric[n] = (vals[0] - vals[1]) / (2.0 * h)
    a = analytic[idx]
    return GradCheckReport(a, numeric, relative_error(a, numeric), idx, tolerance)
