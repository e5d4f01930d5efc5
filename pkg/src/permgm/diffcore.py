"""Dense float64 tensors with a tape-based reverse-mode gradient.

Every operation on a :class:`Tensor` that has a gradient-requiring input is
appended to the active :class:`ComputationRecord` (if one is open).  A record
is built eagerly for one forward pass, consumed by :func:`backward`, then
dropped.  Records are thread-local.

    >>> p = Parameter("p", [0.0, 0.0])
    >>> with ComputationRecord() as rec:
    ...     out = exp(p.tensor).sum()
    >>> backward(out, rec)[p]
    array([1., 1.])
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

EPS_LOG = 1e-12

_state = threading.local()


def _active_record():
    return getattr(_state, "record", None)


def _deterministic():
    return getattr(_state, "deterministic", False)


@contextlib.contextmanager
def deterministic_reductions(enabled=True):
    """Make every reduction independent of the order of its summands.

    Summands are sorted before being added, so relabeling the reduced axis
    cannot change a single bit of the result.  Much slower than BLAS; meant
    for equivariance checks on small instances.
    """
    prev = _deterministic()
    _state.deterministic = enabled
    try:
        yield
    finally:
        _state.deterministic = prev


class Tensor:
    """A float64 array plus a flag telling the tape to track it."""

    __slots__ = ("data", "requires_grad", "param")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.param = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def values(self):
        return self.data.ravel()

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ValueError(f"tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scalar_mul(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        if np.isscalar(other):
            return scalar_mul(self, other)
        return mul(other, self)

    def __truediv__(self, other):
        if np.isscalar(other):
            return scalar_mul(self, 1.0 / other)
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return sum_axis(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Parameter:
    """Named learnable tensor with a gradient accumulator of the same shape."""

    def __init__(self, name, value):
        self.name = name
        self.tensor = Tensor(value, requires_grad=True)
        self.tensor.param = self
        self.grad = np.zeros_like(self.tensor.data)

    @property
    def data(self):
        return self.tensor.data

    @property
    def shape(self):
        return self.tensor.shape

    def zero_grad(self):
        self.grad = np.zeros_like(self.tensor.data)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


@dataclass(eq=False)
class Node:
    tag: str
    inputs: tuple
    output: Tensor
    forward_fn: Callable
    vjp: Callable


@dataclass(eq=False)
class ComputationRecord:
    """Ordered list of recorded primitive applications (a tape)."""

    nodes: list = field(default_factory=list)

    def __enter__(self):
        self._prev = _active_record()
        _state.record = self
        return self

    def __exit__(self, *exc):
        _state.record = self._prev
        return False

    def append(self, node):
        self.nodes.append(node)

    def parameters(self):
        seen = {}
        for node in self.nodes:
            for t in node.inputs:
                if t.param is not None:
                    seen[id(t.param)] = t.param
        return list(seen.values())

    def replay(self):
        """Re-run every node on its recorded inputs; returns fresh outputs.

        Inputs produced by earlier nodes are taken from the replayed values,
        so the comparison checks the whole chain.
        """
        fresh = {}
        outs = []
        for node in self.nodes:
            args = [fresh.get(id(t), t.data) for t in node.inputs]
            val = node.forward_fn(*args)
            fresh[id(node.output)] = val
            outs.append(val)
        return outs


def no_record():
    """Context that suspends recording (evaluation mode)."""
    return _Suspend()


class _Suspend:
    def __enter__(self):
        self._prev = _active_record()
        _state.record = None

    def __exit__(self, *exc):
        _state.record = self._prev
        return False


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _apply(tag, fwd, vjp, *inputs):
    inputs = tuple(as_tensor(t) for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = fwd(*[t.data for t in inputs])
    out.param = None
    out.requires_grad = False
    rec = _active_record()
    if rec is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        rec.append(Node(tag, inputs, out, fwd, vjp))
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_check(tag, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{tag}: incompatible shapes {a.shape} and {b.shape}") from None


def _sorted_sum(x, axis):
    x = np.moveaxis(x, axis, -1)
    return np.ascontiguousarray(np.sort(x, axis=-1)).sum(axis=-1)


def _matmul_fwd(a, b):
    if not _deterministic():
        return a @ b
    if a.ndim == 1 or b.ndim == 1:
        raise ValueError("matmul: deterministic mode requires matrix operands")
    prod = a[..., :, :, None] * b[..., None, :, :]
    return _sorted_sum(prod, -2)


# -- primitives ---------------------------------------------------------------


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    need_a, need_b = a.requires_grad, b.requires_grad

    def vjp(g, out, x, y):
        gx = gy = None
        if need_a:
            if x.ndim == 2 and g.ndim > 2:
                # shared left operand: fold the batch into the contraction
                yb = np.broadcast_to(y, g.shape[:-2] + y.shape[-2:])
                gx = np.swapaxes(g, -1, -2).reshape(-1, x.shape[0]).T @ \
                    np.swapaxes(yb, -1, -2).reshape(-1, x.shape[1])
            else:
                gx = _unbroadcast(g @ np.swapaxes(y, -1, -2), x.shape)
        if need_b:
            if y.ndim == 2 and g.ndim > 2:
                xb = np.broadcast_to(x, g.shape[:-1] + x.shape[-1:])
                gy = xb.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gy = _unbroadcast(np.swapaxes(x, -1, -2) @ g, y.shape)
        return gx, gy

    return _apply("matmul", _matmul_fwd, vjp, a, b)


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("add", a, b)
    return _apply("add", np.add,
                  lambda g, out, x, y: (_unbroadcast(g, x.shape), _unbroadcast(g, y.shape)),
                  a, b)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("sub", a, b)
    return _apply("sub", np.subtract,
                  lambda g, out, x, y: (_unbroadcast(g, x.shape), _unbroadcast(-g, y.shape)),
                  a, b)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("mul", a, b)
    return _apply("mul", np.multiply,
                  lambda g, out, x, y: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)),
                  a, b)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("div", a, b)

    def vjp(g, out, x, y):
        return _unbroadcast(g / y, x.shape), _unbroadcast(-g * out / y, y.shape)

    return _apply("div", np.divide, vjp, a, b)


def scalar_mul(a, c):
    c = float(c)
    return _apply("scalar-mul", lambda x: x * c, lambda g, out, x: (g * c,), a)


def exp(a):
    return _apply("exp", np.exp, lambda g, out, x: (g * out,), a)


def log(a):
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise ValueError(f"log: non-positive input (min {a.data.min():.3g}); clamp first")
    return _apply("log", np.log, lambda g, out, x: (g / x,), a)


def sqrt(a):
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise ValueError("sqrt: non-positive input")
    return _apply("sqrt", np.sqrt, lambda g, out, x: (0.5 * g / out,), a)


def relu(a):
    return _apply("relu", lambda x: np.maximum(x, 0.0),
                  lambda g, out, x: (g * (x > 0),), a)


def clamp(a, lo=None, hi=None):
    """Clip into [lo, hi]; the gradient is zero where clipping is active."""

    def fwd(x):
        return np.clip(x, lo, hi)

    def vjp(g, out, x):
        keep = np.ones(x.shape, dtype=bool)
        if lo is not None:
            keep &= x >= lo
        if hi is not None:
            keep &= x <= hi
        return (g * keep,)

    return _apply("clamp", fwd, vjp, a)


def safe_log(a, eps=EPS_LOG):
    """log(max(a, eps)); the only log model code should call."""
    return log(clamp(a, lo=eps))


def sum_axis(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is not None and not -a.ndim <= axis < a.ndim:
        raise ValueError(f"sum-over-axis: axis {axis} out of range for shape {a.shape}")

    def fwd(x):
        if _deterministic():
            if axis is None:
                r = np.sort(x.ravel()).sum()
                return np.full((1,) * x.ndim, r) if keepdims else np.asarray(r)
            r = _sorted_sum(x, axis)
            return np.expand_dims(r, axis) if keepdims else r
        return np.asarray(x.sum(axis=axis, keepdims=keepdims))

    def vjp(g, out, x):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _apply("sum-over-axis", fwd, vjp, a)


def logsumexp(a, axis, keepdims=True):
    """Stable log(sum(exp(a))) along ``axis``; gradient is the softmax."""

    def fwd(x):
        m = np.max(x, axis=axis, keepdims=True)
        m = np.where(np.isfinite(m), m, 0.0)
        e = np.exp(x - m)
        s = _sorted_sum(e, axis) if _deterministic() else e.sum(axis=axis)
        r = np.log(np.expand_dims(s, axis)) + m
        return r if keepdims else np.squeeze(r, axis)

    def vjp(g, out, x):
        if not keepdims:
            g = np.expand_dims(g, axis)
            out = np.expand_dims(out, axis)
        return (g * np.exp(x - out),)

    return _apply("logsumexp", fwd, vjp, a)


def broadcast_to(a, shape):
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        np.broadcast_shapes(a.shape, shape)
    except ValueError:
        raise ValueError(f"broadcast: incompatible shapes {a.shape} and {shape}") from None
    return _apply("broadcast", lambda x: np.broadcast_to(x, shape).copy(),
                  lambda g, out, x: (_unbroadcast(g, x.shape),), a)


def concat(tensors: Sequence, axis=-1):
    """Concatenate along the last axis."""
    tensors = [as_tensor(t) for t in tensors]
    head = tensors[0].shape[:-1]
    for t in tensors[1:]:
        if t.shape[:-1] != head:
            raise ValueError(f"concat-last-axis: incompatible shapes {tensors[0].shape} and {t.shape}")
    sizes = np.cumsum([t.shape[-1] for t in tensors])[:-1]

    def fwd(*xs):
        return np.concatenate(xs, axis=-1)

    def vjp(g, out, *xs):
        return tuple(np.split(g, sizes, axis=-1))

    return _apply("concat-last-axis", fwd, vjp, *tensors)


def transpose(a):
    """Swap the last two axes."""
    return _apply("transpose", lambda x: np.swapaxes(x, -1, -2).copy(),
                  lambda g, out, x: (np.swapaxes(g, -1, -2),), a)


def reshape(a, shape):
    a = as_tensor(a)
    try:
        np.empty(a.shape).reshape(shape)
    except ValueError:
        raise ValueError(f"reshape: cannot reshape {a.shape} into {shape}") from None
    return _apply("reshape", lambda x: x.reshape(shape).copy(),
                  lambda g, out, x: (g.reshape(x.shape),), a)


def detach(a):
    return Tensor(as_tensor(a).data)


PRIMITIVES = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "elementwise-mul": mul,
    "elementwise-div": div,
    "exp": exp,
    "log": log,
    "relu": relu,
    "sum-over-axis": sum_axis,
    "broadcast": broadcast_to,
    "concat-last-axis": lambda *ts: concat(ts),
    "transpose": transpose,
    "scalar-mul": scalar_mul,
}


def primitive_forward(op_tag, *inputs, **kwargs):
    """Dispatch a primitive by its tag, e.g. ``primitive_forward("exp", x)``."""
    try:
        fn = PRIMITIVES[op_tag]
    except KeyError:
        raise ValueError(f"unknown primitive {op_tag!r}") from None
    return fn(*inputs, **kwargs)


# -- reverse pass -------------------------------------------------------------


def backward(output, record=None):
    """Gradients of the scalar ``output`` w.r.t. every Parameter on the tape.

    Returns ``{Parameter: ndarray}``.  Parameters that appear on the record but
    do not influence ``output`` get zero arrays.
    """
    record = record if record is not None else _active_record()
    if record is None:
        raise ValueError("backward: no computation record")
    if output.data.size != 1:
        raise ValueError(f"backward: output must be a scalar, got shape {output.shape}")

    producer = {id(n.output): k for k, n in enumerate(record.nodes)}
    for k, node in enumerate(record.nodes):
        for t in node.inputs:
            if producer.get(id(t), -1) >= k:
                raise ValueError(f"backward: record contains a cycle at node {k} ({node.tag})")

    grads = {id(output): np.ones_like(output.data)}
    param_grads = {p: np.zeros_like(p.data) for p in record.parameters()}
    for node in reversed(record.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.vjp(g, node.output.data, *[t.data for t in node.inputs])
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if t.param is not None:
                param_grads[t.param] = param_grads[t.param] + gi
            elif id(t) in grads:
                grads[id(t)] = grads[id(t)] + gi
            else:
                grads[id(t)] = gi
    return param_grads


def value_and_grad(fn, params):
    """Run ``fn()`` under a fresh record; return (value, {param: grad})."""
    with ComputationRecord() as rec:
        out = fn()
    grads = backward(out, rec)
    return out.item(), {p: grads.get(p, np.zeros_like(p.data)) for p in params}


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    worst_param: str | None
    n_checked: int

    @property
    def passed(self):
        return self.max_rel_error <= self.tolerance


def finite_diff_check(fn, params, step=1e-5, tolerance=1e-4, floor_ratio=1e-3):
    """Compare tape gradients to central differences, coordinate by coordinate.

    The relative error of a coordinate is ``|a - n| / max(|a|, |n|, floor)``
    where ``floor = floor_ratio * max|n|`` over the whole parameter set, so
    coordinates far below the gradient's scale are not judged on round-off.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    f0, analytic = value_and_grad(fn, params)
    if not np.isfinite(f0):
        raise ValueError(f"non-finite function value {f0}")

    numeric = {}
    with no_record():
        for p in params:
            flat = p.tensor.data.reshape(-1)
            num = np.zeros_like(flat)
            for k in range(flat.size):
                orig = flat[k]
                flat[k] = orig + step
                fp = fn().item()
                flat[k] = orig - step
                fm = fn().item()
                flat[k] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise ValueError(f"non-finite function value near {p.name}[{k}]")
                num[k] = (fp - fm) / (2 * step)
            numeric[p] = num.reshape(p.shape)

    scale = max((np.abs(n).max() for n in numeric.values() if n.size), default=0.0)
    floor = max(floor_ratio * scale, 1e-300)
    worst, worst_name, count = 0.0, None, 0
    for p in params:
        a, n = analytic[p], numeric[p]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        err = np.abs(a - n) / denom
        count += err.size
        if err.size and err.max() > worst:
            worst, worst_name = float(err.max()), p.name
    return GradCheckReport(worst, tolerance, worst_name, count)
