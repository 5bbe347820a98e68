"""Reverse-mode automatic differentiation over a small fixed primitive set.

Values are float64 numpy arrays.  Every operation records its parents and a
vector-Jacobian-product closure; ``grad`` walks the graph in reverse
topological order.  The vjp closures are themselves written with Tensor
operations, so gradients can be differentiated again (``create_graph=True``),
which is what the gradient-penalty regularizer needs.

Primitives: add, sub, neg, mul, div, matmul, transpose, reshape,
broadcast_to, sum, exp, log, sqrt, tanh, sin, cos, relu, softplus, abs,
concat, slice.  Everything else (mean, square, sigmoid, logsumexp, norms)
is composed from these.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor", "constant", "leaf", "grad",
    "add", "sub", "neg", "mul", "div", "matmul", "transpose", "reshape",
    "broadcast_to", "tsum", "exp", "log", "sqrt", "tanh", "sin", "cos",
    "relu", "softplus", "tabs", "concat", "slice_axis",
    "mean", "square", "sigmoid", "logsumexp", "maximum_const", "sum_squares",
]


class Tensor:
    """One node of the computation graph."""

    __slots__ = ("value", "parents", "vjp", "requires_grad")

    def __init__(self, value, parents=(), vjp=None, requires_grad=False):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents
        self.vjp = vjp
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __pow__(self, p):
        return pow_const(self, p)


def constant(value) -> Tensor:
    return Tensor(value)


def leaf(value) -> Tensor:
    """A tensor gradients are requested with respect to."""
    return Tensor(value, requires_grad=True)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: Tensor, shape: tuple) -> Tensor:
    """Reduce a broadcast gradient back to ``shape`` by summing."""
    if g.value.shape == shape:
        return g
    extra = g.value.ndim - len(shape)
    if extra > 0:
        g = tsum(g, axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.value.shape[i] != 1)
    if axes:
        g = tsum(g, axis=axes, keepdims=True)
    if g.value.shape != shape:
        g = reshape(g, shape)
    return g


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    return Tensor(
        a.value + b.value, (a, b),
        lambda g: (_unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    return Tensor(
        a.value - b.value, (a, b),
        lambda g: (_unbroadcast(g, a.value.shape), _unbroadcast(neg(g), b.value.shape)),
    )


def neg(a: Tensor) -> Tensor:
    a = _wrap(a)
    return Tensor(-a.value, (a,), lambda g: (neg(g),))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    return Tensor(
        a.value * b.value, (a, b),
        lambda g: (_unbroadcast(mul(g, b), a.value.shape),
                   _unbroadcast(mul(g, a), b.value.shape)),
    )


def div(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = Tensor(a.value / b.value, (a, b))
    out.vjp = lambda g: (_unbroadcast(div(g, b), a.value.shape),
                         _unbroadcast(neg(mul(g, div(out, b))), b.value.shape))
    return out


def pow_const(a: Tensor, p: float) -> Tensor:
    a = _wrap(a)
    return Tensor(
        a.value ** p, (a,),
        lambda g: (mul(g, mul(constant(p), pow_const(a, p - 1.0))),),
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    return Tensor(
        a.value @ b.value, (a, b),
        lambda g: (matmul(g, transpose(b)), matmul(transpose(a), g)),
    )


def transpose(a: Tensor) -> Tensor:
    a = _wrap(a)
    return Tensor(a.value.T, (a,), lambda g: (transpose(g),))


def reshape(a: Tensor, shape) -> Tensor:
    a = _wrap(a)
    old = a.value.shape
    return Tensor(a.value.reshape(shape), (a,), lambda g: (reshape(g, old),))


def broadcast_to(a: Tensor, shape) -> Tensor:
    a = _wrap(a)
    old = a.value.shape
    return Tensor(np.broadcast_to(a.value, shape).copy(), (a,),
                  lambda g: (_unbroadcast(g, old),))


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    a = _wrap(a)
    in_shape = a.value.shape

    def vjp(g):
        if axis is None:
            return (broadcast_to(reshape(g, (1,) * len(in_shape)), in_shape),)
        axes = axis if isinstance(axis, tuple) else (axis,)
        axes = tuple(ax % len(in_shape) for ax in axes)
        if keepdims:
            gk = g
        else:
            kshape = tuple(1 if i in axes else n for i, n in enumerate(in_shape))
            gk = reshape(g, kshape)
        return (broadcast_to(gk, in_shape),)

    return Tensor(a.value.sum(axis=axis, keepdims=keepdims), (a,), vjp)


def exp(a: Tensor) -> Tensor:
    a = _wrap(a)
    out = Tensor(np.exp(a.value), (a,))
    out.vjp = lambda g: (mul(g, out),)
    return out


def log(a: Tensor) -> Tensor:
    a = _wrap(a)
    return Tensor(np.log(a.value), (a,), lambda g: (div(g, a),))


def sqrt(a: Tensor) -> Tensor:
    a = _wrap(a)
    out = Tensor(np.sqrt(a.value), (a,))
    out.vjp = lambda g: (div(g, mul(constant(2.0), out)),)
    return out


def tanh(a: Tensor) -> Tensor:
    a = _wrap(a)
    out = Tensor(np.tanh(a.value), (a,))
    out.vjp = lambda g: (mul(g, sub(constant(1.0), mul(out, out))),)
    return out


def sin(a: Tensor) -> Tensor:
    a = _wrap(a)
    return Tensor(np.sin(a.value), (a,), lambda g: (mul(g, cos(a)),))


def cos(a: Tensor) -> Tensor:
    a = _wrap(a)
    return Tensor(np.cos(a.value), (a,), lambda g: (neg(mul(g, sin(a))),))


def relu(a: Tensor) -> Tensor:
    a = _wrap(a)
    mask = constant((a.value > 0).astype(np.float64))
    return Tensor(a.value * mask.value, (a,), lambda g: (mul(g, mask),))


def softplus(a: Tensor) -> Tensor:
    # log(1 + e^x) evaluated as logaddexp for overflow safety
    a = _wrap(a)
    return Tensor(np.logaddexp(0.0, a.value), (a,), lambda g: (mul(g, sigmoid(a)),))


def tabs(a: Tensor) -> Tensor:
    a = _wrap(a)
    s = constant(np.sign(a.value))
    return Tensor(np.abs(a.value), (a,), lambda g: (mul(g, s),))


def concat(parts, axis=0) -> Tensor:
    parts = [_wrap(p) for p in parts]
    sizes = [p.value.shape[axis] for p in parts]
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    def vjp(g):
        return tuple(slice_axis(g, axis, int(offsets[i]), int(offsets[i + 1]))
                     for i in range(len(parts)))

    return Tensor(np.concatenate([p.value for p in parts], axis=axis), tuple(parts), vjp)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    a = _wrap(a)
    index = [slice(None)] * a.value.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    before, after = start, a.value.shape[axis] - stop
    return Tensor(a.value[index], (a,),
                  lambda g: (_pad_axis(g, axis, before, after),))


def _pad_axis(a: Tensor, axis: int, before: int, after: int) -> Tensor:
    a = _wrap(a)
    pad = [(0, 0)] * a.value.ndim
    pad[axis] = (before, after)
    start, stop = before, before + a.value.shape[axis]
    return Tensor(np.pad(a.value, pad), (a,),
                  lambda g: (slice_axis(g, axis, start, stop),))


# ---------------------------------------------------------------------------
# composites
# ---------------------------------------------------------------------------

def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    a = _wrap(a)
    n = a.value.size if axis is None else np.prod(
        [a.value.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))])
    return mul(tsum(a, axis=axis, keepdims=keepdims), constant(1.0 / float(n)))


def square(a: Tensor) -> Tensor:
    a = _wrap(a)
    return mul(a, a)


def sigmoid(a: Tensor) -> Tensor:
    # exp(x - softplus(x)) stays finite for any x
    a = _wrap(a)
    return exp(sub(a, softplus(a)))


def logsumexp(a: Tensor, axis: int, keepdims=False) -> Tensor:
    """Overflow-safe log-sum-exp along ``axis``.

    The shift is a detached constant; its contributions cancel exactly in the
    derivative, so gradients are exact.
    """
    a = _wrap(a)
    m = np.max(a.value, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    shifted = sub(a, constant(m))
    out = add(log(tsum(exp(shifted), axis=axis, keepdims=True)), constant(m))
    if not keepdims:
        shape = tuple(n for i, n in enumerate(a.value.shape) if i != axis % a.value.ndim)
        out = reshape(out, shape)
    return out


def maximum_const(a: Tensor, c: float) -> Tensor:
    """max(a, c), built from relu so higher-order derivatives stay defined a.e."""
    return add(relu(sub(a, constant(c))), constant(c))


def sum_squares(a: Tensor, axis=None, keepdims=False) -> Tensor:
    return tsum(square(a), axis=axis, keepdims=keepdims)


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

def grad(output: Tensor, wrt, grad_output=None, create_graph=False):
    """Gradients of ``output`` with respect to every tensor in ``wrt``.

    ``output`` may have any shape; ``grad_output`` defaults to ones (i.e. the
    gradient of output.sum()).  With ``create_graph=True`` the returned
    tensors carry their own graph and can be differentiated again.
    """
    wrt = list(wrt)
    topo: list[Tensor] = []
    seen = set()
    stack = [(output, False)]
    while stack:
        node, expanded = stack.pop()
        if id(node) in seen:
            continue
        if expanded:
            seen.add(id(node))
            topo.append(node)
        else:
            if not node.requires_grad:
                continue
            stack.append((node, True))
            for p in node.parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))

    grads: dict[int, Tensor] = {}
    if grad_output is None:
        grad_output = Tensor(np.ones_like(output.value))
    grads[id(output)] = _wrap(grad_output)

    for node in reversed(topo):
        g = grads.get(id(node))
        if g is None or node.vjp is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            if not create_graph:
                pg = Tensor(pg.value)
            acc = grads.get(id(parent))
            grads[id(parent)] = pg if acc is None else add(acc, pg)

    out = []
    for w in wrt:
        g = grads.get(id(w))
        if g is None:
            g = Tensor(np.zeros_like(w.value))
        out.append(g)
    return out
