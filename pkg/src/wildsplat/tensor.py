"""Dense float32 tensors with reverse-mode automatic differentiation.

A single module-level tape records every differentiable operation in
execution order.  ``backward(loss)`` replays the tape in reverse and
accumulates gradients into every ``requires_grad`` leaf reachable from the
loss.  The tape is cleared after each optimizer step, so graphs never leak
across training iterations.

Everything is float32 and backed by numpy; broadcasting follows numpy's
trailing-dimension rule.
"""

from __future__ import annotations

import contextlib

import numpy as np

from .errors import ContractError, DomainError, ShapeError, StateError

F32 = np.float32


class Graph:
    """Ordered record of executed differentiable operations (the tape)."""

    def __init__(self):
        self.nodes = []
        self.epoch = 0
        self.enabled = True

    def record(self, node):
        self.nodes.append(node)

    def clear(self):
        """Drop all recorded nodes and invalidate tensors built on them."""
        self.nodes.clear()
        self.epoch += 1


_GRAPH = Graph()


def active_graph():
    return _GRAPH


def clear_graph():
    _GRAPH.clear()


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the context (inference / target building)."""
    prev = _GRAPH.enabled
    _GRAPH.enabled = False
    try:
        yield
    finally:
        _GRAPH.enabled = prev


class Node:
    """One executed op: output, inputs, and the local backward rule."""

    __slots__ = ("out", "inputs", "bwd", "name")

    def __init__(self, out, inputs, bwd, name):
        self.out = out
        self.inputs = inputs
        self.bwd = bwd
        self.name = name


class Tensor:
    """Dense float32 array with optional gradient tracking.

    Treat tensors as immutable values once constructed; only the optimizer
    writes to parameter buffers in place.
    """

    __slots__ = ("data", "requires_grad", "grad", "_node", "_epoch", "_backward_done")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=F32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._node = None
        self._epoch = _GRAPH.epoch
        self._backward_done = False

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of size {self.data.size}")
        return float(self.data.reshape(())[()])

    def is_leaf(self):
        return self._node is None

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        tag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={tuple(self.shape)}{tag})"

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return pow(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def abs(self):
        return absolute(self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad, shape):
    """Reduce a broadcasted gradient back to ``shape``."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def make_op(out_data, inputs, bwd, name):
    """Wrap raw output data in a Tensor and record the op on the tape.

    ``bwd(grad_out) -> list`` must return one gradient array (or None) per
    input, already shaped like that input.
    """
    record = _GRAPH.enabled and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=record)
    if record:
        node = Node(out, tuple(inputs), bwd, name)
        out._node = node
        _GRAPH.record(node)
    return out


# -- elementwise ops --------------------------------------------------------


def add(a, b):
    a, b = _wrap(a), _wrap(b)
    out = _broadcast_apply(np.add, a, b, "add")
    return make_op(
        out,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b):
    a, b = _wrap(a), _wrap(b)
    out = _broadcast_apply(np.subtract, a, b, "sub")
    return make_op(
        out,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    out = _broadcast_apply(np.multiply, a, b, "mul")
    return make_op(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def div(a, b):
    a, b = _wrap(a), _wrap(b)
    out = _broadcast_apply(np.divide, a, b, "div")
    return make_op(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
        "div",
    )


def _broadcast_apply(fn, a, b, opname):
    try:
        return fn(a.data, b.data)
    except ValueError as e:
        raise ShapeError(f"{opname}: shapes {a.shape} and {b.shape} do not broadcast") from e


def _check_domain(arr, ok_mask, opname):
    if not ok_mask.all():
        idx = int(np.argmin(ok_mask.ravel()))
        raise DomainError(f"{opname} of out-of-domain value {arr.ravel()[idx]!r}", index=idx)


def exp(a):
    a = _wrap(a)
    out = np.exp(a.data)
    return make_op(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    a = _wrap(a)
    _check_domain(a.data, a.data > 0, "log")
    out = np.log(a.data)
    return make_op(out, (a,), lambda g: (g / a.data,), "log")


def sqrt(a):
    a = _wrap(a)
    _check_domain(a.data, a.data >= 0, "sqrt")
    out = np.sqrt(a.data)
    return make_op(out, (a,), lambda g: (g * (F32(0.5) / np.maximum(out, F32(1e-12))),), "sqrt")


def pow(a, exponent):
    a = _wrap(a)
    p = float(exponent)
    if p != int(p):
        _check_domain(a.data, a.data >= 0, "pow")
    out = np.power(a.data, F32(p))
    grad_base = F32(p) * np.power(a.data, F32(p - 1.0)) if p != 0 else np.zeros_like(a.data)
    return make_op(out, (a,), lambda g: (g * grad_base,), "pow")


def relu(a):
    a = _wrap(a)
    out = np.maximum(a.data, F32(0))
    mask = (a.data > 0).astype(F32)
    return make_op(out, (a,), lambda g: (g * mask,), "relu")


def sigmoid(a):
    a = _wrap(a)
    out = sigmoid_np(a.data)
    return make_op(out, (a,), lambda g: (g * (out * (F32(1) - out)),), "sigmoid")


def sigmoid_np(x):
    """Numerically stable sigmoid on raw arrays (no tape)."""
    x = np.asarray(x, dtype=F32)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def absolute(a):
    a = _wrap(a)
    out = np.abs(a.data)
    return make_op(out, (a,), lambda g: (g * np.sign(a.data),), "abs")


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "exp": exp,
    "log": log,
    "sqrt": sqrt,
    "pow": pow,
    "relu": relu,
    "sigmoid": sigmoid,
}


def elementwise(op_tag, a, b=None):
    """Dispatch an elementwise op by tag; binary tags require ``b``."""
    if op_tag not in _ELEMENTWISE:
        raise ContractError(f"unknown elementwise op {op_tag!r}")
    fn = _ELEMENTWISE[op_tag]
    if op_tag in ("add", "sub", "mul", "div", "pow"):
        if b is None:
            raise ContractError(f"{op_tag} needs two operands")
        return fn(a, b)
    if b is not None:
        raise ContractError(f"{op_tag} is unary")
    return fn(a)


# -- linear algebra ---------------------------------------------------------


def matmul(a, b):
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul requires rank >= 2 operands")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return make_op(out, (a, b), bwd, "matmul")


def softmax(a, axis=-1):
    """Stable softmax along ``axis``; rows sum to one."""
    a = _wrap(a)
    if not (-a.ndim <= axis < a.ndim):
        raise ShapeError(f"softmax axis {axis} invalid for shape {a.shape}")
    out = softmax_np(a.data, axis)

    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return make_op(out, (a,), bwd, "softmax")


def softmax_np(x, axis=-1):
    x = np.asarray(x, dtype=F32)
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


# -- reductions and reshapes ------------------------------------------------


def sum_(a, axis=None, keepdims=False):
    a = _wrap(a)
    out = a.data.sum(axis=axis, keepdims=keepdims, dtype=F32)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(np.asarray(g, dtype=F32), a.shape).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, a.shape).copy(),)

    return make_op(out, (a,), bwd, "sum")


def mean(a, axis=None, keepdims=False):
    a = _wrap(a)
    if axis is None:
        count = a.size
    elif isinstance(axis, tuple):
        count = 1
        for ax in axis:
            count *= a.shape[ax]
    else:
        count = a.shape[axis]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a, shape):
    a = _wrap(a)
    out = a.data.reshape(shape)
    return make_op(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None):
    a = _wrap(a)
    out = np.transpose(a.data, axes)
    if axes is None:
        inv = None
    else:
        inv = np.argsort(axes)
    return make_op(out, (a,), lambda g: (np.transpose(g, inv),), "transpose")


def concat(tensors, axis=0):
    tensors = [_wrap(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_op(out, tuple(tensors), bwd, "concat")


# -- backward ---------------------------------------------------------------


def backward(loss):
    """Accumulate d(loss)/d(leaf) into every reachable requires_grad leaf."""
    if not isinstance(loss, Tensor):
        raise ContractError("backward expects a Tensor")
    if loss.size != 1:
        raise ContractError(f"loss must be scalar, got shape {tuple(loss.shape)}")
    if loss._epoch != _GRAPH.epoch:
        raise StateError("backward on a dead graph (tape was cleared)")
    if loss._backward_done:
        raise StateError("backward called twice without re-executing the graph")
    loss._backward_done = True

    grads = {id(loss): np.ones_like(loss.data)}
    if loss._node is None:
        if loss.requires_grad:
            _accumulate_leaf(loss, grads[id(loss)])
        return

    for node in reversed(_GRAPH.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        input_grads = node.bwd(g)
        for tensor, ig in zip(node.inputs, input_grads):
            if ig is None or not tensor.requires_grad:
                continue
            ig = np.asarray(ig, dtype=F32)
            if tensor._node is None:
                _accumulate_leaf(tensor, ig)
            else:
                key = id(tensor)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig


def _accumulate_leaf(tensor, g):
    if tensor.grad is None:
        tensor.grad = g.copy()
    else:
        tensor.grad = tensor.grad + g
