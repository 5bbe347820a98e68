"""Discretized continuous-time flow: the stochastic Langevin kernel.

One step moves every particle by half the target's log-density gradient times
the step size, plus centered Gaussian noise of variance h per coordinate:

    z' = z + (h/2) * grad log p(z) + N(0, h*I)

Iterating the kernel transports an initial particle cloud toward the target;
the path-averaged empirical measure over steps 1..K is the estimator whose
convergence the metrics module quantifies.  Particles never interact, so a
step is embarrassingly parallel; noise comes from per-particle counter lanes
of one stream, which keeps results independent of any execution schedule.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .network import ContractError
from .rng import RandomStream
from .targets import EnergyModel, GaussianMoments

__all__ = [
    "DivergenceError", "FlowConfig", "ParticleCloud", "FlowTrajectory",
    "langevin_step", "simulate_flow", "flow_final_cloud", "flow_moment_trace",
    "path_average", "per_particle_path_average",
]


class DivergenceError(ArithmeticError):
    """A particle or gradient went non-finite during the flow."""


@dataclass(frozen=True)
class FlowConfig:
    """Step size, step count, and the optional decreasing-step schedule.

    The diffusion coefficient is pinned to the identity; ``schedule`` may be
    "constant" or "decreasing", the latter using h_k = h * k^(-1/3), which
    removes the long-run discretization bias at the cost of slower transport.
    """

    step_size: float
    num_steps: int
    schedule: str = "constant"

    def __post_init__(self):
        if self.step_size < 0:
            raise ContractError("step_size must be >= 0")
        if self.num_steps < 0:
            raise ContractError("num_steps must be >= 0")
        if self.schedule not in ("constant", "decreasing"):
            raise ContractError(f"unknown schedule {self.schedule!r}")

    def step_at(self, k: int) -> float:
        """Step size used for transition k (1-indexed)."""
        if self.schedule == "constant":
            return self.step_size
        return self.step_size * float(k) ** (-1.0 / 3.0)

    @property
    def total_time(self) -> float:
        return sum(self.step_at(k) for k in range(1, self.num_steps + 1))


class ParticleCloud:
    """An (N, d) set of equally weighted samples; all entries finite."""

    def __init__(self, samples: np.ndarray):
        samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
        if samples.ndim != 2 or samples.shape[0] < 1:
            raise ContractError(f"cloud needs an (N>=1, d) array, got {samples.shape}")
        if not np.all(np.isfinite(samples)):
            bad = int(np.argwhere(~np.isfinite(samples).all(axis=1))[0][0])
            raise DivergenceError(f"non-finite particle at index {bad}")
        self.samples = samples

    @property
    def n(self) -> int:
        return self.samples.shape[0]

    @property
    def dim(self) -> int:
        return self.samples.shape[1]

    def copy(self) -> "ParticleCloud":
        return ParticleCloud(self.samples.copy())

    @classmethod
    def gaussian(cls, moments: GaussianMoments, n: int, stream: RandomStream) -> "ParticleCloud":
        chol = np.linalg.cholesky(moments.cov)
        return cls(moments.mean + stream.normal_matrix(n, moments.dim) @ chol.T)


@dataclass
class FlowTrajectory:
    """The chain of clouds z_0 ... z_K produced by simulate_flow."""

    clouds: list[ParticleCloud] = field(default_factory=list)

    def __post_init__(self):
        if not self.clouds:
            raise ContractError("trajectory needs at least the initial cloud")
        n, d = self.clouds[0].n, self.clouds[0].dim
        if any(c.n != n or c.dim != d for c in self.clouds):
            raise ContractError("all clouds of a trajectory must share (N, d)")

    @property
    def num_steps(self) -> int:
        return len(self.clouds) - 1

    @property
    def initial(self) -> ParticleCloud:
        return self.clouds[0]

    @property
    def final(self) -> ParticleCloud:
        return self.clouds[-1]


def _step_array(samples: np.ndarray, target: EnergyModel, h: float,
                noise: np.ndarray | None, step_index: int) -> np.ndarray:
    drift = target.grad_log_density(samples)
    if not np.all(np.isfinite(drift)):
        bad = int(np.argwhere(~np.isfinite(drift).all(axis=1))[0][0])
        raise DivergenceError(
            f"non-finite gradient for particle {bad} at step {step_index}")
    out = samples + (0.5 * h) * drift
    if noise is not None:
        out = out + noise
    if not np.all(np.isfinite(out)):
        bad = int(np.argwhere(~np.isfinite(out).all(axis=1))[0][0])
        raise DivergenceError(f"particle {bad} diverged at step {step_index}")
    return out


def langevin_step(cloud: ParticleCloud, target: EnergyModel, h: float,
                  stream: RandomStream | None, step_index: int = 1) -> ParticleCloud:
    """One stochastic kernel application; ``stream=None`` suppresses noise.

    With h=0 the map is the identity.  Noise for particle i occupies counter
    lane [i*d, (i+1)*d) of this step's block, so any particle's update is a
    pure function of (seed, stream_id, counter, i).
    """
    if h < 0:
        raise ContractError("h must be >= 0")
    if target.dim != cloud.dim:
        raise ContractError(f"target dim {target.dim} != cloud dim {cloud.dim}")
    if h == 0:
        return cloud.copy()
    noise = None
    if stream is not None:
        noise = np.sqrt(h) * stream.normal_matrix(cloud.n, cloud.dim)
    return ParticleCloud(_step_array(cloud.samples, target, h, noise, step_index))


def simulate_flow(initial: ParticleCloud, target: EnergyModel, config: FlowConfig,
                  stream: RandomStream | None) -> FlowTrajectory:
    """Run K kernel steps and keep every intermediate cloud.

    Deterministic given the stream identity: rerunning with an equal stream
    reproduces the trajectory bit for bit.
    """
    clouds = [initial.copy()]
    for k in range(1, config.num_steps + 1):
        clouds.append(langevin_step(clouds[-1], target, config.step_at(k), stream, k))
    return FlowTrajectory(clouds)


def flow_final_cloud(initial: ParticleCloud, target: EnergyModel, config: FlowConfig,
                     stream: RandomStream | None) -> ParticleCloud:
    """Memory-lean variant of simulate_flow; identical final cloud."""
    cur = initial.copy()
    for k in range(1, config.num_steps + 1):
        cur = langevin_step(cur, target, config.step_at(k), stream, k)
    return cur


def flow_moment_trace(initial: ParticleCloud, target: EnergyModel, config: FlowConfig,
                      stream: RandomStream | None, record_steps) -> dict[int, tuple]:
    """Empirical (mean, cov) at selected step indices, without storing clouds."""
    record = sorted(set(int(k) for k in record_steps))
    if any(k < 0 or k > config.num_steps for k in record):
        raise ContractError("record_steps must lie in [0, num_steps]")
    out = {}
    cur = initial.copy()

    def snap(k):
        s = cur.samples
        out[k] = (s.mean(axis=0), np.cov(s, rowvar=False, ddof=1).reshape(cur.dim, cur.dim))

    if record and record[0] == 0:
        snap(0)
    for k in range(1, config.num_steps + 1):
        cur = langevin_step(cur, target, config.step_at(k), stream, k)
        if k in record:
            snap(k)
    return out


def _psi_values(psi, samples: np.ndarray) -> np.ndarray:
    values = psi(samples)
    return np.asarray(values, dtype=np.float64).reshape(samples.shape[0])


def path_average(traj: FlowTrajectory, psi: Callable[[np.ndarray], np.ndarray]) -> float:
    """Mean of psi over all particles of clouds 1..K (the initial cloud is
    exactly the burn-in and is excluded)."""
    if traj.num_steps < 1:
        raise ContractError("path_average needs at least one transition")
    total = 0.0
    for cloud in traj.clouds[1:]:
        total += _psi_values(psi, cloud.samples).mean()
    return total / traj.num_steps


def per_particle_path_average(traj: FlowTrajectory, psi) -> np.ndarray:
    """Path average per particle: each particle is its own chain."""
    if traj.num_steps < 1:
        raise ContractError("path_average needs at least one transition")
    acc = np.zeros(traj.initial.n)
    for cloud in traj.clouds[1:]:
        acc += _psi_values(psi, cloud.samples)
    return acc / traj.num_steps
