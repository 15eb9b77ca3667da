"""Reverse-mode automatic differentiation over numpy buffers.

A Tensor wraps a dense row-major numpy array.  Operations executed while a
Tape is active append a record (output, inputs, backward rule) in execution
order; backward() replays the records in reverse and accumulates vector-
Jacobian products into .grad of every tensor that asked for one.  Every op
materializes a fresh output buffer; no view aliasing between tensors.
"""

import threading

import numpy as np

from .errors import GraphError, NumericError, ShapeError

DEFAULT_DTYPE = np.float32

_state = threading.local()


def _tape_stack():
    if not hasattr(_state, "stack"):
        _state.stack = []
    return _state.stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # arithmetic sugar; all graph recording happens in the module-level ops
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)


class Tape:
    """Ordered record of operations; enter as a context manager to record."""

    def __init__(self):
        self.records = []          # (out_id, inputs, backward_fn)
        self._produced = {}        # id(tensor) -> tensor, outputs seen so far

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        popped = _tape_stack().pop()
        assert popped is self
        return False

    def tracks(self, t):
        return t.requires_grad or id(t) in self._produced

    def record(self, out, inputs, backward_fn):
        self._produced[id(out)] = out
        self.records.append((id(out), inputs, backward_fn))


def backward(loss, tape):
    """Accumulate d(loss)/d(tensor) into .grad of every requires_grad tensor.

    loss must be a scalar produced by an op recorded on the tape.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if id(loss) not in tape._produced:
        raise GraphError("loss tensor was not produced on this tape")
    adjoint = {id(loss): np.ones_like(loss.data)}
    touched = {id(loss): loss}
    for out_id, inputs, backward_fn in reversed(tape.records):
        g = adjoint.get(out_id)
        if g is None:
            continue
        grads = backward_fn(g)
        for inp, gi in zip(inputs, grads):
            if gi is None:
                continue
            key = id(inp)
            touched[key] = inp
            if key in adjoint:
                adjoint[key] = adjoint[key] + gi
            else:
                adjoint[key] = gi
    for key, t in touched.items():
        if t.requires_grad:
            g = adjoint[key]
            t.grad = g if t.grad is None else t.grad + g


def _lift(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype)


def _unbroadcast(grad, shape):
    """Sum grad down to `shape` after numpy broadcasting in the forward."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _finish(out_data, inputs, make_backward):
    """Wrap an op result; record on the active tape only if an input is live."""
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None:
        need = tuple(tape.tracks(t) for t in inputs)
        if any(need):
            tape.record(out, inputs, make_backward(need))
    return out


def check_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{what} contains non-finite values")


# ---------------------------------------------------------------- pointwise

def add(a, b):
    a = _lift(a)
    b = _lift(b, like=a)
    out = a.data + b.data

    def mk(need):
        def bwd(g):
            ga = _unbroadcast(g, a.data.shape) if need[0] else None
            gb = _unbroadcast(g, b.data.shape) if need[1] else None
            return ga, gb
        return bwd

    return _finish(out, (a, b), mk)


def sub(a, b):
    a = _lift(a)
    b = _lift(b, like=a)
    out = a.data - b.data

    def mk(need):
        def bwd(g):
            ga = _unbroadcast(g, a.data.shape) if need[0] else None
            gb = _unbroadcast(-g, b.data.shape) if need[1] else None
            return ga, gb
        return bwd

    return _finish(out, (a, b), mk)


def mul(a, b):
    a = _lift(a)
    b = _lift(b, like=a)
    out = a.data * b.data

    def mk(need):
        def bwd(g):
            ga = _unbroadcast(g * b.data, a.data.shape) if need[0] else None
            gb = _unbroadcast(g * a.data, b.data.shape) if need[1] else None
            return ga, gb
        return bwd

    return _finish(out, (a, b), mk)


def div(a, b):
    a = _lift(a)
    b = _lift(b, like=a)
    out = a.data / b.data

    def mk(need):
        def bwd(g):
            ga = _unbroadcast(g / b.data, a.data.shape) if need[0] else None
            gb = _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape) if need[1] else None
            return ga, gb
        return bwd

    return _finish(out, (a, b), mk)


def exp(a):
    a = _lift(a)
    out = np.exp(a.data)

    def mk(need):
        def bwd(g):
            return (g * out,)
        return bwd

    return _finish(out, (a,), mk)


def log(a):
    a = _lift(a)
    out = np.log(a.data)

    def mk(need):
        def bwd(g):
            return (g / a.data,)
        return bwd

    return _finish(out, (a,), mk)


def sqrt(a):
    a = _lift(a)
    out = np.sqrt(a.data)

    def mk(need):
        def bwd(g):
            return (g * (0.5 / out),)
        return bwd

    return _finish(out, (a,), mk)


def absolute(a):
    a = _lift(a)
    out = np.abs(a.data)

    def mk(need):
        sign = np.sign(a.data)

        def bwd(g):
            return (g * sign,)
        return bwd

    return _finish(out, (a,), mk)


def relu(a):
    a = _lift(a)
    out = np.maximum(a.data, 0)

    def mk(need):
        mask = a.data > 0

        def bwd(g):
            return (g * mask,)
        return bwd

    return _finish(out, (a,), mk)


def clamp_min(a, floor):
    """max(a, floor) elementwise; gradient is zero where the floor engages."""
    a = _lift(a)
    out = np.maximum(a.data, floor)

    def mk(need):
        mask = a.data > floor

        def bwd(g):
            return (g * mask,)
        return bwd

    return _finish(out, (a,), mk)


# ---------------------------------------------------------------- reductions

def tsum(a, axis=None, keepdims=False):
    a = _lift(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def mk(need):
        def bwd(g):
            g = np.asarray(g)
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.data.shape).copy(),)
        return bwd

    return _finish(out, (a,), mk)


def tmean(a, axis=None, keepdims=False):
    a = _lift(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= a.data.shape[ax]

    def mk(need):
        def bwd(g):
            g = np.asarray(g)
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.data.shape).copy() / count,)
        return bwd

    return _finish(out, (a,), mk)


def tmax(a, axis, keepdims=False):
    """Max along one axis; ties split the gradient evenly."""
    a = _lift(a)
    out = a.data.max(axis=axis, keepdims=keepdims)

    def mk(need):
        expanded = a.data.max(axis=axis, keepdims=True)
        mask = (a.data == expanded).astype(a.data.dtype)
        mask /= mask.sum(axis=axis, keepdims=True)

        def bwd(g):
            g = np.asarray(g)
            if not keepdims:
                g = np.expand_dims(g, axis)
            return (g * mask,)
        return bwd

    return _finish(out, (a,), mk)


# ---------------------------------------------------------------- structural

def reshape(a, shape):
    a = _lift(a)
    out = a.data.reshape(shape).copy()

    def mk(need):
        def bwd(g):
            return (g.reshape(a.data.shape),)
        return bwd

    return _finish(out, (a,), mk)


def matmul(a, b):
    """2-D matrix product (m,k) @ (k,n)."""
    a = _lift(a)
    b = _lift(b, like=a)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul expects (m,k)@(k,n), got {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def mk(need):
        def bwd(g):
            ga = g @ b.data.T if need[0] else None
            gb = a.data.T @ g if need[1] else None
            return ga, gb
        return bwd

    return _finish(out, (a, b), mk)


def constant(data, dtype=None):
    """Tensor that never takes gradients (noise, labels, reference maps)."""
    return Tensor(np.asarray(data), requires_grad=False, dtype=dtype)
