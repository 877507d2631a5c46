"""Minimal reverse-mode automatic differentiation over a fixed operator set.

Tensors are float64 numpy arrays. Operations executed while a :class:`Tape`
is active (``with Tape() as tape:``) and touching a tensor that requires a
gradient are recorded on that tape; ``tape.backward(loss, params)`` then
walks the recorded nodes in reverse.
"""
from __future__ import annotations

import threading

import numpy as np

__all__ = [
    "Tensor", "Tape", "ShapeError", "NonFiniteError", "forward_op", "OPS",
    "matmul", "add", "sub", "scale", "relu", "l2_normalize", "mse",
    "l2_distance", "softmax_xent", "mean",
]


class ShapeError(ValueError):
    pass


class NonFiniteError(ArithmeticError):
    pass


_state = threading.local()


def _active_tape():
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """Dense float64 array with an optional handle into the active tape."""

    __slots__ = ("data", "requires_grad", "grad_id", "__weakref__")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad_id = None

    @property
    def shape(self):
        return self.data.shape

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("kind", "inputs", "output", "vjp")

    def __init__(self, kind, inputs, output, vjp):
        self.kind = kind
        self.inputs = inputs
        self.output = output
        self.vjp = vjp


class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended in execution order, so the list is already a
    topological order of the computation.
    """

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        if not hasattr(_state, "stack"):
            _state.stack = []
        _state.stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.stack.pop()
        return False

    def record(self, kind, inputs, output, vjp):
        output.grad_id = (id(self), len(self.nodes))
        output.requires_grad = True
        self.nodes.append(_Node(kind, inputs, output, vjp))

    def backward(self, loss, params):
        """Gradients of scalar ``loss`` w.r.t. each tensor in ``params``.

        Parameters that the loss does not depend on receive zeros.
        """
        if loss.data.size != 1:
            raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
        if loss.grad_id is None or loss.grad_id[0] != id(self):
            raise ValueError("loss is detached from this tape")
        grads = {id(loss): np.ones_like(loss.data)}
        stop = loss.grad_id[1]
        for node in reversed(self.nodes[: stop + 1]):
            g_out = grads.pop(id(node.output), None)
            if g_out is None:
                continue
            for inp, g in zip(node.inputs, node.vjp(g_out)):
                if g is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
        out = []
        for p in params:
            g = grads.get(id(p))
            if g is None:
                g = np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise NonFiniteError("non-finite gradient")
            out.append(g)
        return out


def _finish(kind, inputs, value, vjp):
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"{kind} produced a non-finite result")
    out = Tensor(value)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(kind, inputs, out, vjp)
    return out


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    A, B = a.data, b.data
    return _finish("matmul", (a, b), A @ B, lambda g: (g @ B.T, A.T @ g))


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        value = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: {a.shape} + {b.shape}") from exc
    sa, sb = a.shape, b.shape
    return _finish("add", (a, b), value,
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        value = a.data - b.data
    except ValueError as exc:
        raise ShapeError(f"sub: {a.shape} - {b.shape}") from exc
    sa, sb = a.shape, b.shape
    return _finish("sub", (a, b), value,
                   lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def scale(a, c):
    a = as_tensor(a)
    c = float(c)
    return _finish("scale", (a,), a.data * c, lambda g: (g * c,))


def relu(a):
    a = as_tensor(a)
    on = a.data > 0
    return _finish("relu", (a,), np.where(on, a.data, 0.0), lambda g: (g * on,))


def l2_normalize(a):
    """Row-wise projection onto the unit sphere (last axis)."""
    a = as_tensor(a)
    norm = np.linalg.norm(a.data, axis=-1, keepdims=True)
    if np.any(norm == 0):
        raise ValueError("l2_normalize: zero vector")
    y = a.data / norm

    def vjp(g):
        return ((g - y * np.sum(y * g, axis=-1, keepdims=True)) / norm,)

    return _finish("l2_normalize", (a,), y, vjp)


def mse(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size

    def vjp(g):
        ga = (2.0 / n) * g * diff
        return ga, -ga

    return _finish("mse", (a, b), np.array(np.mean(diff * diff)), vjp)


def l2_distance(a, b):
    """Per-row Euclidean distance ``||a_i - b_i||``; shape ``[batch]``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape or a.data.ndim != 2:
        raise ShapeError(f"l2_distance: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    dist = np.sqrt(np.sum(diff * diff, axis=1))
    # subgradient 0 where the rows coincide
    safe = np.where(dist > 0, dist, 1.0)
    unit = np.where(dist[:, None] > 0, diff / safe[:, None], 0.0)

    def vjp(g):
        ga = g[:, None] * unit
        return ga, -ga

    return _finish("l2_distance", (a, b), dist, vjp)


def softmax_xent(logits, labels):
    """Mean cross-entropy of integer ``labels`` under softmax(``logits``)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    z = logits.data
    if z.ndim != 2 or labels.shape != (z.shape[0],):
        raise ShapeError(f"softmax_xent: logits {z.shape}, labels {labels.shape}")
    shifted = z - z.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(z.shape[0])
    value = -logp[rows, labels].mean()

    def vjp(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        return (g * d / z.shape[0],)

    return _finish("softmax_xent", (logits,), np.array(value), vjp)


def mean(a):
    a = as_tensor(a)
    n = a.data.size
    shape = a.shape
    return _finish("mean", (a,), np.array(a.data.mean()),
                   lambda g: (np.full(shape, g / n),))


OPS = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "scale": scale,
    "relu": relu,
    "l2_normalize": l2_normalize,
    "mse": mse,
    "l2_distance": l2_distance,
    "softmax_xent": softmax_xent,
    "mean": mean,
}


def forward_op(kind, *inputs):
    try:
        fn = OPS[kind]
    except KeyError:
        raise ValueError(f"unknown operator {kind!r}") from None
    return fn(*inputs)
