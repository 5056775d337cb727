"""A small reverse-mode autodiff engine over numpy arrays.

Backward rules are themselves written with :class:`Tensor` operations, so a
gradient computed with ``create_graph=True`` is a differentiable function of
the inputs.  That is all second-order MAML needs: differentiate the
inner-loop gradient steps when taking the meta-gradient.

Only the handful of operations the sequence model uses are provided.
"""

from __future__ import annotations

import contextlib

import numpy as np

_recording = True


@contextlib.contextmanager
def no_grad():
    global _recording
    previous, _recording = _recording, False
    try:
        yield
    finally:
        _recording = previous


def _unbroadcast(grad: "Tensor", shape: tuple) -> "Tensor":
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    axes = tuple(range(extra)) + tuple(
        i + extra for i, n in enumerate(shape) if n == 1 and grad.shape[i + extra] != 1)
    out = grad.sum(axis=axes, keepdims=True) if axes else grad
    if extra:
        out = out.reshape(shape)
    elif out.shape != shape:
        out = out.reshape(shape)
    return out


class Tensor:
    __slots__ = ("data", "parents", "backward_fn", "requires_grad")
    __array_ufunc__ = None  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, parents=(), backward_fn=None, requires_grad=False):
        self.data = np.asarray(data, dtype=float)
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # graph construction -------------------------------------------------

    @staticmethod
    def _make(data, parents, backward_fn):
        if _recording and any(p.requires_grad for p in parents):
            return Tensor(data, parents, backward_fn, True)
        return Tensor(data)

    # arithmetic ---------------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)
        return Tensor._make(self.data + other.data, (self, other),
                            lambda g: (_unbroadcast(g, self.shape), _unbroadcast(g, other.shape)))

    __radd__ = __add__

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other):
        other = as_tensor(other)
        return Tensor._make(self.data - other.data, (self, other),
                            lambda g: (_unbroadcast(g, self.shape), _unbroadcast(-g, other.shape)))

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __mul__(self, other):
        other = as_tensor(other)
        return Tensor._make(self.data * other.data, (self, other),
                            lambda g: (_unbroadcast(g * other, self.shape), _unbroadcast(g * self, other.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise NotImplementedError("division by a tensor is not supported")
        return self * (1.0 / other)

    def __matmul__(self, other):
        other = as_tensor(other)

        def backward(g):
            ga = g @ other.swapaxes(-1, -2)
            gb = self.swapaxes(-1, -2) @ g
            return _unbroadcast(ga, self.shape), _unbroadcast(gb, other.shape)

        return Tensor._make(self.data @ other.data, (self, other), backward)

    def __rmatmul__(self, other):
        return as_tensor(other) @ self

    def __getitem__(self, index):
        shape = self.shape

        def backward(g):
            return (_scatter(g, index, shape),)

        return Tensor._make(self.data[index], (self,), backward)

    # shape and reductions ----------------------------------------------

    def swapaxes(self, a, b):
        return Tensor._make(self.data.swapaxes(a, b), (self,), lambda g: (g.swapaxes(a, b),))

    def reshape(self, shape):
        old = self.shape
        return Tensor._make(self.data.reshape(shape), (self,), lambda g: (g.reshape(old),))

    def sum(self, axis=None, keepdims=False):
        shape = self.shape

        def backward(g):
            if axis is not None and not keepdims:
                axes = (axis,) if np.isscalar(axis) else tuple(axis)
                axes = tuple(a % len(shape) for a in axes)
                kept = tuple(1 if i in axes else n for i, n in enumerate(shape))
                g = g.reshape(kept)
            elif axis is None and not keepdims:
                g = g.reshape((1,) * len(shape))
            return (broadcast_to(g, shape),)

        return Tensor._make(self.data.sum(axis=axis, keepdims=keepdims), (self,), backward)

    def mean(self, axis=None, keepdims=False):
        count = self.data.size if axis is None else np.prod(
            [self.shape[a] for a in ((axis,) if np.isscalar(axis) else axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def leaf(x) -> Tensor:
    """A tensor that gradients are taken with respect to."""
    return Tensor(np.array(x, dtype=float), requires_grad=True)


def broadcast_to(x: Tensor, shape) -> Tensor:
    old = x.shape
    return Tensor._make(np.broadcast_to(x.data, shape).copy(), (x,),
                        lambda g: (_unbroadcast(g, old),))


def _scatter(g: Tensor, index, shape) -> Tensor:
    """Adjoint of ``x[index]``: place ``g`` into zeros of ``shape``."""

    def backward(gg):
        return (gg[index],)

    out = np.zeros(shape)
    out[index] = g.data
    return Tensor._make(out, (g,), backward)


def tanh(x):
    if not isinstance(x, Tensor):
        return np.tanh(x)
    y = np.tanh(x.data)
    out = Tensor._make(y, (x,), None)
    if out.requires_grad:
        out.backward_fn = lambda g: (g * (1.0 - out * out),)
    return out


def sigmoid(x):
    if not isinstance(x, Tensor):
        return 0.5 * (1.0 + np.tanh(0.5 * x))
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    out = Tensor._make(y, (x,), None)
    if out.requires_grad:
        out.backward_fn = lambda g: (g * out * (1.0 - out),)
    return out


def concat(parts, axis=-1):
    if not any(isinstance(p, Tensor) for p in parts):
        return np.concatenate(parts, axis=axis)
    parts = [as_tensor(p) for p in parts]

    def backward(g):
        pieces = []
        start = 0
        for p in parts:
            stop = start + p.shape[axis]
            index = [slice(None)] * g.ndim
            index[axis] = slice(start, stop)
            pieces.append(g[tuple(index)])
            start = stop
        return tuple(pieces)

    return Tensor._make(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), backward)


def grad(output: Tensor, inputs, create_graph: bool = False):
    """Gradients of scalar ``output`` with respect to each tensor in ``inputs``.

    With ``create_graph`` the returned tensors are part of the graph and can
    be differentiated again.  Inputs the output does not depend on get zeros.
    """
    if output.data.size != 1:
        raise ValueError("grad needs a scalar output")
    order = _topological(output)
    wanted = {id(x) for x in inputs}
    grads: dict[int, Tensor] = {id(output): Tensor(np.ones_like(output.data))}
    context = contextlib.nullcontext() if create_graph else no_grad()
    with context:
        for node in reversed(order):
            keep = node.backward_fn is None or id(node) in wanted
            g = grads.get(id(node)) if keep else grads.pop(id(node), None)
            if g is None or node.backward_fn is None:
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg
    return [grads.get(id(x), Tensor(np.zeros_like(x.data))) for x in inputs]


def _topological(root: Tensor) -> list[Tensor]:
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
        for parent in node.parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order
