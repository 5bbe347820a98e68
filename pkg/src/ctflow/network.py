"""Differentiable functions: a declared parameter signature plus a build rule.

A DifferentiableFunction maps a batch of inputs ``(N, input_dim)`` and a
ParamMap matching its signature to outputs ``(N, output_dim)``.  The build
rule composes tensor primitives, so exact reverse-mode gradients are
available with respect to both parameters and inputs.  Rows of a batch are
independent: the gradient of the summed output w.r.t. the input is the
per-row gradient stack.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from . import tensor as T
from .params import ParamMap
from .rng import RandomStream

__all__ = [
    "SignatureError", "ContractError", "NumericError",
    "DifferentiableFunction", "check_gradient",
    "mlp", "init_mlp_params", "identity_fn", "linear_fn", "quadratic_form_fn",
]


class SignatureError(ValueError):
    """Input or parameter shapes do not match the declared signature."""


class ContractError(ValueError):
    """An operation was called outside its contract."""


class NumericError(ArithmeticError):
    """A computation produced non-finite or otherwise unusable values."""


@dataclass
class DifferentiableFunction:
    """Evaluation rule plus its declared signature."""

    build: Callable[[Mapping[str, T.Tensor], T.Tensor], T.Tensor]
    param_shapes: dict[str, tuple]
    input_dim: int
    output_dim: int
    name: str = "fn"

    def _check(self, params: ParamMap, x: np.ndarray) -> np.ndarray:
        got = {k: tuple(v.shape) for k, v in params.items()}
        want = {k: tuple(s) for k, s in self.param_shapes.items()}
        if got != want:
            raise SignatureError(f"{self.name}: params {got} != signature {want}")
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise SignatureError(
                f"{self.name}: input shape {x.shape} incompatible with input_dim={self.input_dim}")
        return x

    def _forward(self, params: ParamMap, x: np.ndarray, *, params_grad: bool,
                 input_grad: bool):
        x = self._check(params, x)
        xt = T.Tensor(x, requires_grad=input_grad)
        pt = {k: T.Tensor(v, requires_grad=params_grad) for k, v in params.items()}
        out = self.build(pt, xt)
        if out.value.ndim == 1:
            out = T.reshape(out, (out.value.shape[0], 1))
        if out.value.shape != (x.shape[0], self.output_dim):
            raise SignatureError(
                f"{self.name}: build produced {out.value.shape}, "
                f"declared output_dim={self.output_dim}")
        return xt, pt, out

    def evaluate(self, params: ParamMap, x: np.ndarray) -> np.ndarray:
        """Deterministic forward pass; returns an (N, output_dim) array."""
        _, _, out = self._forward(params, x, params_grad=False, input_grad=False)
        return out.value

    def __call__(self, params: ParamMap, x: np.ndarray) -> np.ndarray:
        return self.evaluate(params, x)

    def gradient(self, params: ParamMap, x: np.ndarray):
        """Exact gradients of the summed scalar output.

        Requires output_dim == 1.  Returns ``(param_grads, input_grad)`` where
        param_grads is a ParamMap of the same shapes and input_grad has the
        per-row gradients, shape (N, input_dim).
        """
        if self.output_dim != 1:
            raise ContractError(f"{self.name}: gradient needs a scalar output, "
                                f"output_dim={self.output_dim}")
        xt, pt, out = self._forward(params, x, params_grad=True, input_grad=True)
        wrt = [xt] + list(pt.values())
        gs = T.grad(T.tsum(out), wrt)
        pgrads = ParamMap((k, g.value) for k, g in zip(pt.keys(), gs[1:]))
        return pgrads, gs[0].value

    def input_gradient(self, params: ParamMap, x: np.ndarray) -> np.ndarray:
        """Per-row input gradients only (cheaper path for samplers)."""
        if self.output_dim != 1:
            raise ContractError(f"{self.name}: gradient needs a scalar output")
        xt, _, out = self._forward(params, x, params_grad=False, input_grad=True)
        (gx,) = T.grad(T.tsum(out), [xt])
        return gx.value

    def param_gradient(self, params: ParamMap, x: np.ndarray,
                       weights: np.ndarray | None = None) -> ParamMap:
        """Gradient of sum_i w_i * out_i with respect to the parameters."""
        if self.output_dim != 1:
            raise ContractError(f"{self.name}: gradient needs a scalar output")
        _, pt, out = self._forward(params, x, params_grad=True, input_grad=False)
        scalar = T.tsum(out) if weights is None else T.tsum(
            T.mul(out, T.constant(np.asarray(weights, dtype=np.float64).reshape(-1, 1))))
        gs = T.grad(scalar, list(pt.values()))
        return ParamMap((k, g.value) for k, g in zip(pt.keys(), gs))


def check_gradient(fn: DifferentiableFunction, params: ParamMap, x: np.ndarray,
                   eps: float = 1e-5, floor: float = 1e-8) -> float:
    """Max relative error between reverse-mode and central finite differences.

    The error at a coordinate is |ad - fd| / (|fd| + floor).  Raises
    NumericError naming the offending coordinate if anything turns non-finite.
    """
    if eps <= 0:
        raise ContractError("eps must be > 0")
    pgrads, xgrad = fn.gradient(params, x)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]

    def scalar_at(p, xv):
        return float(fn.evaluate(p, xv).sum())

    worst = 0.0

    def update(ad, fd, label):
        nonlocal worst
        if not (np.isfinite(ad) and np.isfinite(fd)):
            raise NumericError(f"non-finite gradient check at {label}: ad={ad}, fd={fd}")
        worst = max(worst, abs(ad - fd) / (abs(fd) + floor))

    for name in params:
        base = params[name]
        flat = base.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            hi = scalar_at(params, x)
            flat[j] = orig - eps
            lo = scalar_at(params, x)
            flat[j] = orig
            update(float(pgrads[name].reshape(-1)[j]), (hi - lo) / (2 * eps),
                   f"param {name}[{j}]")

    xflat = x.reshape(-1)
    for j in range(xflat.size):
        orig = xflat[j]
        xflat[j] = orig + eps
        hi = scalar_at(params, x)
        xflat[j] = orig - eps
        lo = scalar_at(params, x)
        xflat[j] = orig
        update(float(xgrad.reshape(-1)[j]), (hi - lo) / (2 * eps), f"input[{j}]")

    return worst


# ---------------------------------------------------------------------------
# stock architectures
# ---------------------------------------------------------------------------

_ACTIVATIONS = {"tanh": T.tanh, "relu": T.relu, "softplus": T.softplus}


def mlp(sizes, activation: str = "tanh", prefix: str = "",
        name: str = "mlp") -> DifferentiableFunction:
    """Fully connected net: linear layers with ``activation`` between them.

    ``sizes`` is (input, hidden..., output); the last layer is linear.
    Parameter names are ``{prefix}w{i}`` / ``{prefix}b{i}``.
    """
    if activation not in _ACTIVATIONS:
        raise ContractError(f"unknown activation {activation!r}")
    act = _ACTIVATIONS[activation]
    shapes = {}
    for i in range(len(sizes) - 1):
        shapes[f"{prefix}w{i}"] = (sizes[i], sizes[i + 1])
        shapes[f"{prefix}b{i}"] = (sizes[i + 1],)

    def build(p, x):
        h = x
        last = len(sizes) - 2
        for i in range(len(sizes) - 1):
            h = T.add(T.matmul(h, p[f"{prefix}w{i}"]), p[f"{prefix}b{i}"])
            if i != last:
                h = act(h)
        return h

    return DifferentiableFunction(build, shapes, sizes[0], sizes[-1], name=name)


def init_mlp_params(fn: DifferentiableFunction, stream: RandomStream,
                    scale: float | None = None) -> ParamMap:
    """Deterministic fan-in-scaled normal init for an mlp()-style signature."""
    out = ParamMap()
    for name, shape in fn.param_shapes.items():
        if name.split("w")[-1].isdigit() and "w" in name and len(shape) == 2:
            s = scale if scale is not None else 1.0 / np.sqrt(shape[0])
            out[name] = s * stream.normal_matrix(*shape)
        else:
            out[name] = np.zeros(shape)
    return out


def identity_fn(dim: int) -> DifferentiableFunction:
    return DifferentiableFunction(lambda p, x: x, {}, dim, dim, name="identity")


def linear_fn(weight: np.ndarray, bias: np.ndarray) -> DifferentiableFunction:
    """Fixed affine map x @ W + b with W, b baked in as constants."""
    W = np.asarray(weight, dtype=np.float64)
    b = np.asarray(bias, dtype=np.float64)

    def build(p, x):
        return T.add(T.matmul(x, T.constant(W)), T.constant(b))

    return DifferentiableFunction(build, {}, W.shape[0], W.shape[1], name="linear")


def quadratic_form_fn(dim: int, scale: float = 0.5) -> DifferentiableFunction:
    """f(x) = scale * ||x||^2 per row; handy analytic test case."""

    def build(p, x):
        return T.mul(T.constant(scale), T.sum_squares(x, axis=1, keepdims=True))

    return DifferentiableFunction(build, {}, dim, 1, name="quadratic_form")
