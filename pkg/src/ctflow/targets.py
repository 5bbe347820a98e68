"""Target distributions: unnormalized log-densities with exact gradients.

Ships the two 2-D toy potentials, Gaussians and Gaussian mixtures, and the
closed-form moment solution for the 1-D Ornstein-Uhlenbeck relaxation, which
serves as the analytic ground truth for every flow-convergence check.

All log-density expressions route mixture terms through log-sum-exp; the raw
formulas underflow (e.g. e^-50) long before anything interesting happens.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .network import ContractError, DifferentiableFunction, NumericError
from .params import ParamMap
from .rng import RandomStream

__all__ = [
    "ConfigurationError", "EnergyModel", "GaussianMoments",
    "make_toy_potential", "make_gaussian", "make_gaussian_mixture",
    "ou_analytic_moments", "sample_gaussian", "sample_gaussian_mixture",
    "get_target", "TARGET_NAMES",
]

# keeps ||z|| differentiable at the origin without disturbing any point
# farther than ~1e-150 from it; central differences there are 0 by symmetry
_NORM_FLOOR = 1e-300


class ConfigurationError(ValueError):
    """Unknown name or malformed target configuration."""


@dataclass(frozen=True)
class GaussianMoments:
    """Mean vector and SPD covariance matrix."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", np.atleast_1d(np.asarray(self.mean, dtype=np.float64)))
        object.__setattr__(self, "cov", np.atleast_2d(np.asarray(self.cov, dtype=np.float64)))
        if self.cov.shape != (self.mean.size, self.mean.size):
            raise ContractError(f"covariance shape {self.cov.shape} does not match "
                                f"mean of size {self.mean.size}")
        if not np.allclose(self.cov, self.cov.T, atol=1e-12):
            raise NumericError("covariance must be symmetric")
        if np.any(np.linalg.eigvalsh(self.cov) <= 0):
            raise NumericError("covariance must be positive definite")

    @property
    def dim(self) -> int:
        return self.mean.size


@dataclass
class EnergyModel:
    """Unnormalized log-density with gradient access.

    ``fn`` maps a batch (N, dim) to per-row log p up to an additive constant;
    ``log_normalizer`` is log Z when known analytically, so that
    ``fn + (-log Z)`` is the exact normalized log-density.  ``moments``
    carries the analytic answer for oracle targets.
    """

    fn: DifferentiableFunction
    params: ParamMap
    dim: int
    name: str = "target"
    log_normalizer: float | None = None
    moments: GaussianMoments | None = None

    def log_density_unnorm(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        return self.fn.evaluate(self.params, x)[:, 0]

    def log_density(self, x: np.ndarray) -> np.ndarray:
        if self.log_normalizer is None:
            raise ContractError(f"{self.name}: no analytic normalizer")
        return self.log_density_unnorm(x) - self.log_normalizer

    def grad_log_density(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        return self.fn.input_gradient(self.params, x)

    def energy(self, x: np.ndarray) -> np.ndarray:
        """U(x) = -log p_unnorm(x)."""
        return -self.log_density_unnorm(x)


def _row_norm(x: T.Tensor) -> T.Tensor:
    return T.sqrt(T.add(T.sum_squares(x, axis=1, keepdims=True), T.constant(_NORM_FLOOR)))


def _coord(x: T.Tensor, j: int) -> T.Tensor:
    return T.slice_axis(x, 1, j, j + 1)


def make_toy_potential(name: str) -> EnergyModel:
    """The two shipped 2-D toys, as p(z) proportional to e^{-U(z)}.

    ``ring_bimodal``: a radius-2 ring of width 0.4 crossed with a two-well
    mixture in z2 (broad well near the top of the ring, narrow deep well at
    the bottom).

    ``sine_wells``: two sinusoidal ridges in z2 that follow
    w1(z) = sin(2*pi*z1/4), the second displaced by a Gaussian bump
    w2(z) = 3*exp(-((z1-1)/0.6)^2/2), both of width 0.35.
    """
    if name == "ring_bimodal":

        def build(p, z):
            ring = T.mul(T.constant(0.5),
                         T.square(T.mul(T.constant(1 / 0.4),
                                        T.sub(_row_norm(z), T.constant(2.0)))))
            z2 = _coord(z, 1)
            e1 = T.mul(T.constant(-0.5), T.square(T.mul(T.constant(1 / 2.0),
                                                        T.sub(z2, T.constant(4.0)))))
            e2 = T.mul(T.constant(-0.5), T.square(T.mul(T.constant(1 / 0.2),
                                                        T.add(z2, T.constant(2.0)))))
            wells = T.logsumexp(T.concat([e1, e2], axis=1), axis=1, keepdims=True)
            return T.sub(wells, ring)  # log p = -U

        fn = DifferentiableFunction(build, {}, 2, 1, name="ring_bimodal")
        return EnergyModel(fn, ParamMap(), 2, name="ring_bimodal")

    if name == "sine_wells":

        def build(p, z):
            z1, z2 = _coord(z, 0), _coord(z, 1)
            w1 = T.sin(T.mul(T.constant(2.0 * np.pi / 4.0), z1))
            w2 = T.mul(T.constant(3.0),
                       T.exp(T.mul(T.constant(-0.5),
                                   T.square(T.mul(T.constant(1 / 0.6),
                                                  T.sub(z1, T.constant(1.0)))))))
            d1 = T.sub(z2, w1)
            d2 = T.add(d1, w2)
            e1 = T.mul(T.constant(-0.5), T.square(T.mul(T.constant(1 / 0.35), d1)))
            e2 = T.mul(T.constant(-0.5), T.square(T.mul(T.constant(1 / 0.35), d2)))
            return T.logsumexp(T.concat([e1, e2], axis=1), axis=1, keepdims=True)

        fn = DifferentiableFunction(build, {}, 2, 1, name="sine_wells")
        return EnergyModel(fn, ParamMap(), 2, name="sine_wells")

    raise ConfigurationError(f"unknown toy potential {name!r}; "
                             f"valid names: ring_bimodal, sine_wells")


def make_gaussian(mean, cov) -> EnergyModel:
    """N(mean, cov) with analytic normalizer and stored moments."""
    m = GaussianMoments(mean, cov)
    precision = np.linalg.inv(m.cov)
    sign, logdet = np.linalg.slogdet(m.cov)
    if sign <= 0:
        raise NumericError("covariance must be positive definite")
    log_z = 0.5 * (m.dim * np.log(2.0 * np.pi) + logdet)
    mu_c, prec_c = m.mean.copy(), precision

    def build(p, z):
        dz = T.sub(z, T.constant(mu_c))
        quad = T.tsum(T.mul(dz, T.matmul(dz, T.constant(prec_c))), axis=1, keepdims=True)
        return T.mul(T.constant(-0.5), quad)

    fn = DifferentiableFunction(build, {}, m.dim, 1, name="gaussian")
    return EnergyModel(fn, ParamMap(), m.dim, name="gaussian",
                       log_normalizer=float(log_z), moments=m)


def make_gaussian_mixture(means, covs, weights=None) -> EnergyModel:
    """Equal-or-weighted mixture of Gaussians, normalized."""
    comps = [GaussianMoments(mu, cov) for mu, cov in zip(means, covs)]
    dim = comps[0].dim
    if any(c.dim != dim for c in comps):
        raise ContractError("mixture components must share a dimension")
    w = np.full(len(comps), 1.0 / len(comps)) if weights is None else \
        np.asarray(weights, dtype=np.float64)
    if w.shape != (len(comps),) or np.any(w <= 0) or not np.isclose(w.sum(), 1.0):
        raise ContractError("weights must be positive and sum to 1")

    consts = []
    for c, wk in zip(comps, w):
        sign, logdet = np.linalg.slogdet(c.cov)
        consts.append((c.mean.copy(), np.linalg.inv(c.cov),
                       np.log(wk) - 0.5 * (dim * np.log(2 * np.pi) + logdet)))

    def build(p, z):
        terms = []
        for mu, prec, logc in consts:
            dz = T.sub(z, T.constant(mu))
            quad = T.tsum(T.mul(dz, T.matmul(dz, T.constant(prec))), axis=1, keepdims=True)
            terms.append(T.add(T.mul(T.constant(-0.5), quad), T.constant(logc)))
        return T.logsumexp(T.concat(terms, axis=1), axis=1, keepdims=True)

    fn = DifferentiableFunction(build, {}, dim, 1, name="gaussian_mixture")
    model = EnergyModel(fn, ParamMap(), dim, name="gaussian_mixture", log_normalizer=0.0)
    model.mixture = (comps, w)  # used by the exact sampler
    return model


def ou_analytic_moments(mu0: float, var0: float, t: float) -> GaussianMoments:
    """Exact marginal of the standard-normal-target Langevin relaxation.

    The drift -z/2 with unit diffusion gives mean mu0*e^{-t/2} and variance
    1 + (var0 - 1)*e^{-t}; the density stays Gaussian for Gaussian starts.
    """
    if var0 <= 0:
        raise ContractError("var0 must be > 0")
    if t < 0:
        raise ContractError("t must be >= 0")
    mean = mu0 * np.exp(-t / 2.0)
    var = 1.0 + (var0 - 1.0) * np.exp(-t)
    return GaussianMoments(np.array([mean]), np.array([[var]]))


# ---------------------------------------------------------------------------
# exact samplers (for data generation and reference clouds)
# ---------------------------------------------------------------------------

def sample_gaussian(m: GaussianMoments, stream: RandomStream, n: int) -> np.ndarray:
    chol = np.linalg.cholesky(m.cov)
    return m.mean + stream.normal_matrix(n, m.dim) @ chol.T


def sample_gaussian_mixture(model: EnergyModel, stream: RandomStream, n: int) -> np.ndarray:
    comps, w = model.mixture
    ks = np.searchsorted(np.cumsum(w), stream.uniforms(n), side="right")
    ks = np.minimum(ks, len(comps) - 1)
    out = np.empty((n, comps[0].dim))
    draws = stream.normal_matrix(n, comps[0].dim)
    for j, c in enumerate(comps):
        rows = ks == j
        if rows.any():
            out[rows] = c.mean + draws[rows] @ np.linalg.cholesky(c.cov).T
    return out


# ---------------------------------------------------------------------------
# registry for config files
# ---------------------------------------------------------------------------

def _blobs2d() -> EnergyModel:
    m = make_gaussian_mixture([[-2.0, 0.0], [2.0, 0.0]],
                              [np.eye(2), np.eye(2)])
    m.name = "blobs2d"
    return m


_REGISTRY: dict[str, Callable[[], EnergyModel]] = {
    "ring_bimodal": lambda: make_toy_potential("ring_bimodal"),
    "sine_wells": lambda: make_toy_potential("sine_wells"),
    "std_normal_1d": lambda: make_gaussian([0.0], [[1.0]]),
    "std_normal_2d": lambda: make_gaussian([0.0, 0.0], np.eye(2)),
    "blobs2d": _blobs2d,
}

TARGET_NAMES = tuple(sorted(_REGISTRY))


def get_target(name: str) -> EnergyModel:
    try:
        factory = _REGISTRY[name]
    except KeyError:
        raise ConfigurationError(
            f"unknown target {name!r}; valid names: {', '.join(TARGET_NAMES)}") from None
    return factory()
