"""Distances and diagnostics: exact optimal transport on small clouds,
closed-form Gaussian transport distance, empirical moments, and the
mean-squared-error estimator for path averages against the analytic
relaxation oracle."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .flow import FlowConfig, ParticleCloud, per_particle_path_average, simulate_flow
from .network import ContractError, NumericError
from .rng import RandomStream
from .targets import EnergyModel, GaussianMoments

__all__ = [
    "SizeError", "TransportPlan", "MonteCarloEstimate", "transport_plan",
    "wasserstein_exact", "wasserstein_bruteforce", "wasserstein_minibatch",
    "w2_gaussian", "empirical_moments", "coordinate_projection", "clamped_norm",
    "mse_estimate",
]

EXACT_ASSIGNMENT_CAP = 512


class SizeError(ValueError):
    """Instance too large for the exact assignment solver."""


@dataclass(frozen=True)
class MonteCarloEstimate:
    """A sample mean with its standard error."""

    value: float
    stderr: float
    n: int

    @classmethod
    def from_values(cls, values: np.ndarray) -> "MonteCarloEstimate":
        values = np.asarray(values, dtype=np.float64).ravel()
        se = float(values.std(ddof=1) / np.sqrt(values.size)) if values.size > 1 else 0.0
        return cls(float(values.mean()), se, values.size)


@dataclass(frozen=True)
class TransportPlan:
    """Optimal pairing between two equal-size uniform empirical measures."""

    permutation: np.ndarray  # row i of A matches row permutation[i] of B
    cost: float
    order: int


def _pairwise_sq(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", d, d)


def _check_clouds(a, b):
    a = a.samples if isinstance(a, ParticleCloud) else np.atleast_2d(np.asarray(a, float))
    b = b.samples if isinstance(b, ParticleCloud) else np.atleast_2d(np.asarray(b, float))
    if a.shape[1] != b.shape[1]:
        raise ContractError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    if a.shape[0] != b.shape[0]:
        raise ContractError(f"particle counts must match: {a.shape[0]} vs {b.shape[0]}")
    return a, b


def _plan_cost(cost_matrix: np.ndarray, perm: np.ndarray, order: int) -> float:
    mean = cost_matrix[np.arange(len(perm)), perm].mean()
    return float(np.sqrt(mean)) if order == 2 else float(mean)


def transport_plan(a, b, order: int = 2) -> TransportPlan:
    """Exact optimal assignment between two same-size clouds.

    Order 1 optimizes mean distance, order 2 mean squared distance (the
    reported cost is its square root).  Capped at N=512; larger instances
    should use wasserstein_minibatch.
    """
    if order not in (1, 2):
        raise ContractError("order must be 1 or 2")
    a, b = _check_clouds(a, b)
    if a.shape[0] > EXACT_ASSIGNMENT_CAP:
        raise SizeError(f"N={a.shape[0]} exceeds the exact cap "
                        f"{EXACT_ASSIGNMENT_CAP}; use wasserstein_minibatch")
    sq = _pairwise_sq(a, b)
    cost_matrix = sq if order == 2 else np.sqrt(sq)
    _, cols = linear_sum_assignment(cost_matrix)
    return TransportPlan(cols, _plan_cost(cost_matrix, cols, order), order)


def wasserstein_exact(a, b, order: int = 2) -> float:
    """Optimal transport distance between equal-size uniform clouds."""
    return transport_plan(a, b, order).cost


def wasserstein_bruteforce(a, b, order: int = 2) -> float:
    """Independent oracle: exhaustive minimum over all N! assignments (N <= 8)."""
    a, b = _check_clouds(a, b)
    n = a.shape[0]
    if n > 8:
        raise SizeError("brute force is for N <= 8")
    sq = _pairwise_sq(a, b)
    cost_matrix = sq if order == 2 else np.sqrt(sq)
    rows = np.arange(n)
    best = min(cost_matrix[rows, perm].mean()
               for perm in itertools.permutations(range(n)))
    return float(np.sqrt(best)) if order == 2 else float(best)


def wasserstein_minibatch(a, b, order: int, batch: int, rounds: int,
                          stream: RandomStream) -> float:
    """Average exact distance over random equal-size subsamples.

    A biased-upward but stable surrogate for clouds above the exact cap.
    """
    a = a.samples if isinstance(a, ParticleCloud) else np.atleast_2d(np.asarray(a, float))
    b = b.samples if isinstance(b, ParticleCloud) else np.atleast_2d(np.asarray(b, float))
    if batch < 2 or batch > min(len(a), len(b)):
        raise ContractError("batch must be in [2, min(N_a, N_b)]")
    vals = []
    for _ in range(rounds):
        ia = stream.integers(batch, len(a))
        ib = stream.integers(batch, len(b))
        vals.append(wasserstein_exact(a[ia], b[ib], order))
    return float(np.mean(vals))


def _sym_sqrt(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(m)
    if np.any(vals < -1e-10):
        raise NumericError("matrix is not positive semi-definite")
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def w2_gaussian(a: GaussianMoments, b: GaussianMoments) -> float:
    """Closed-form second-order transport distance between Gaussians."""
    if a.dim != b.dim:
        raise ContractError("dimension mismatch")
    rb = _sym_sqrt(b.cov)
    cross = _sym_sqrt(rb @ a.cov @ rb)
    sq = float(np.sum((a.mean - b.mean) ** 2)
               + np.trace(a.cov + b.cov - 2.0 * cross))
    return float(np.sqrt(max(sq, 0.0)))


def empirical_moments(cloud) -> GaussianMoments:
    """Sample mean and unbiased covariance of a cloud (N >= 2)."""
    x = cloud.samples if isinstance(cloud, ParticleCloud) else np.atleast_2d(np.asarray(cloud, float))
    if x.shape[0] < 2:
        raise ContractError("need at least two samples for a covariance")
    cov = np.cov(x, rowvar=False, ddof=1).reshape(x.shape[1], x.shape[1])
    return GaussianMoments(x.mean(axis=0), cov)


# ---------------------------------------------------------------------------
# 1-Lipschitz test function catalog
# ---------------------------------------------------------------------------

class coordinate_projection:
    """psi(z) = z_j; 1-Lipschitz, Gaussian expectation is the mean entry."""

    def __init__(self, index: int = 0):
        self.index = index
        self.name = f"coord{index}"

    def __call__(self, samples: np.ndarray) -> np.ndarray:
        return np.atleast_2d(samples)[:, self.index]

    def gaussian_expectation(self, m: GaussianMoments) -> float:
        return float(m.mean[self.index])


class clamped_norm:
    """psi(z) = min(||z||, cap); 1-Lipschitz, no closed-form expectation."""

    def __init__(self, cap: float):
        if cap <= 0:
            raise ContractError("cap must be > 0")
        self.cap = cap
        self.name = f"clamped_norm{cap:g}"

    def __call__(self, samples: np.ndarray) -> np.ndarray:
        return np.minimum(np.linalg.norm(np.atleast_2d(samples), axis=1), self.cap)


def mse_estimate(target: EnergyModel, psi, config: FlowConfig,
                 initial: tuple[float, float], repetitions: int,
                 stream: RandomStream) -> float:
    """Monte-Carlo mean squared error of single-chain path averages.

    Runs ``repetitions`` independent single-particle chains from the initial
    Gaussian ``(mean0, var0)`` (var0 = 0 is a point mass), path-averages psi
    over steps 1..K per chain, and compares with the analytic expectation
    under the relaxation law at time T = h*K.  Only defined for targets
    carrying the analytic oracle (the 1-D standard normal) and psi with a
    Gaussian expectation rule.
    """
    if target.moments is None or target.dim != 1 or \
            not np.allclose(target.moments.mean, 0.0) or \
            not np.allclose(target.moments.cov, 1.0):
        raise ContractError("mse_estimate needs the 1-D standard-normal oracle target")
    if not hasattr(psi, "gaussian_expectation"):
        raise ContractError(f"psi {getattr(psi, 'name', psi)!r} has no Gaussian "
                            "expectation rule")
    if repetitions < 1:
        raise ContractError("repetitions must be >= 1")
    if config.num_steps < 1:
        raise ContractError("num_steps must be >= 1")
    mean0, var0 = float(initial[0]), float(initial[1])
    if var0 < 0:
        raise ContractError("var0 must be >= 0")

    t_total = config.total_time
    mean_t = mean0 * np.exp(-t_total / 2.0)
    var_t = 1.0 + (var0 - 1.0) * np.exp(-t_total)
    if var_t > 0:
        reference = psi.gaussian_expectation(GaussianMoments([mean_t], [[var_t]]))
    else:  # point mass: only at t=0 from a deterministic start
        reference = float(np.asarray(psi(np.array([[mean_t]]))).reshape(()))

    # One cloud of R particles = R independent chains: particles never
    # interact and own disjoint noise lanes.
    z0 = mean0 + np.sqrt(var0) * stream.child(0).normal_matrix(repetitions, 1)
    traj = simulate_flow(ParticleCloud(z0), target, config, stream.child(1))
    averages = per_particle_path_average(traj, psi)
    return float(np.mean((averages - reference) ** 2))
