"""Amortized distillation: train an implicit generator so its one-shot
samples match the output of flow transformations.

Each round draws a teacher batch (generator samples pushed through one or
more Langevin steps toward the target), then updates the generator so a
student batch moves toward the teacher under a chosen sample distance:

* ``euclidean`` — mean squared pairwise distance with shared noise draws
  (student and teacher base share omega).  Minimizing it drives samples to
  local modes of the target, which is exactly the failure mode the collapse
  experiment demonstrates.
* ``exact_ot`` — optimal-assignment squared distance between the batches.
  The assignment is re-solved per update and held fixed inside the gradient
  (it is piecewise constant in the parameters).
* ``critic`` — adversarial dual form: a scalar critic trained to separate
  teacher from student batches; the generator ascends its own critic score.

Teacher batches are always detached: no gradient flows into them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .flow import ParticleCloud, langevin_step
from .metrics import transport_plan, wasserstein_exact
from .network import ContractError, DifferentiableFunction, NumericError, mlp, init_mlp_params
from .optim import Sgd
from .params import ParamMap
from .rng import RandomStream
from .targets import EnergyModel

__all__ = [
    "ImplicitGenerator", "GeneratorBatch", "Critic", "DistillConfig",
    "DistillResult", "sample_generator", "draw_batch", "make_teacher_batch",
    "distill_step", "critic_update", "gradient_penalty_value",
    "make_mlp_generator", "make_invertible_generator", "make_mlp_critic",
    "generator_jacobians", "generator_log_density",
]

_DET_FLOOR = 1e-12


@dataclass
class ImplicitGenerator:
    """Stochastic sampler: (condition, noise) -> sample through a network.

    ``invertible_mode`` asserts noise_dim equals the output dimension and the
    noise->output map keeps a nonsingular Jacobian at evaluated points, which
    is what makes the sample density computable by change of variables.
    """

    network: DifferentiableFunction
    params: ParamMap
    noise_dim: int
    cond_dim: int = 0
    invertible_mode: bool = False

    def __post_init__(self):
        if self.network.input_dim != self.cond_dim + self.noise_dim:
            raise ContractError("network input_dim must equal cond_dim + noise_dim")
        if self.invertible_mode and self.noise_dim != self.out_dim:
            raise ContractError("invertible_mode needs noise_dim == output_dim")

    @property
    def out_dim(self) -> int:
        return self.network.output_dim

    def _inputs(self, condition, noise: np.ndarray) -> np.ndarray:
        s = noise.shape[0]
        if self.cond_dim == 0:
            cond = np.zeros((s, 0))
        else:
            cond = np.atleast_2d(np.asarray(condition, dtype=np.float64))
            if cond.shape == (1, self.cond_dim):
                cond = np.broadcast_to(cond, (s, self.cond_dim))
            if cond.shape != (s, self.cond_dim):
                raise ContractError(f"condition shape {cond.shape} incompatible "
                                    f"with cond_dim={self.cond_dim}, S={s}")
        return np.concatenate([cond, noise], axis=1)

    def graph(self, condition, noise: np.ndarray, *, params_grad: bool = True,
              noise_grad: bool = False):
        """Forward graph for training; returns (param tensors, noise leaf, output)."""
        inputs = self._inputs(condition, noise)
        if noise_grad:
            nt = T.Tensor(noise, requires_grad=True)
            cond = T.constant(inputs[:, :self.cond_dim])
            xt = T.concat([cond, nt], axis=1)
        else:
            nt = None
            xt = T.constant(inputs)
        pt = {k: T.Tensor(v, requires_grad=params_grad) for k, v in self.params.items()}
        out = self.network.build(pt, xt)
        if out.value.ndim == 1:
            out = T.reshape(out, (out.value.shape[0], 1))
        return pt, nt, out


@dataclass
class GeneratorBatch:
    """Samples plus the noise (and condition) that produced them."""

    cloud: ParticleCloud
    noise: np.ndarray
    condition: Optional[np.ndarray] = None


@dataclass
class Critic:
    """Scalar network for the dual-form distance, with its regularizer."""

    network: DifferentiableFunction
    params: ParamMap
    regularization: Optional[tuple] = None  # ("weight_clip", c) | ("gradient_penalty", lam)

    def __post_init__(self):
        if self.network.output_dim != 1:
            raise ContractError("critic must have scalar output")
        if self.regularization is not None:
            kind = self.regularization[0]
            if kind not in ("weight_clip", "gradient_penalty"):
                raise ContractError(f"unknown critic regularization {kind!r}")

    def score(self, x: np.ndarray) -> np.ndarray:
        return self.network.evaluate(self.params, x)[:, 0]


@dataclass
class DistillConfig:
    """How one distillation round is performed."""

    distance_kind: str = "exact_ot"  # euclidean | exact_ot | critic
    inner_steps: int = 1
    step_size: float = 1e-3
    batch_size: int = 64
    flow_substeps: int = 1
    critic_steps: int = 5  # dual-form inner loop; not pinned by any reference
    critic_step_size: float = 1e-3

    def __post_init__(self):
        if self.distance_kind not in ("euclidean", "exact_ot", "critic"):
            raise ContractError(f"unknown distance kind {self.distance_kind!r}")
        if self.step_size <= 0:
            raise ContractError("step_size must be > 0")
        if self.distance_kind == "exact_ot" and self.batch_size < 2:
            raise ContractError("exact_ot needs batch_size >= 2")
        if self.inner_steps < 1:
            raise ContractError("inner_steps must be >= 1")


@dataclass
class DistillResult:
    params: ParamMap
    critic: Optional[Critic]
    distance: float


def sample_generator(gen: ImplicitGenerator, condition, stream: RandomStream,
                     s: int) -> ParticleCloud:
    """S one-shot samples; deterministic given the stream identity."""
    if s < 1:
        raise ContractError("sample count must be >= 1")
    return draw_batch(gen, condition, stream, s).cloud


def draw_batch(gen: ImplicitGenerator, condition, stream: RandomStream,
               s: int) -> GeneratorBatch:
    noise = stream.normal_matrix(s, gen.noise_dim)
    cloud = ParticleCloud(gen.network.evaluate(gen.params, gen._inputs(condition, noise)))
    return GeneratorBatch(cloud, noise,
                          None if condition is None else np.asarray(condition, float))


def make_teacher_batch(gen: ImplicitGenerator, condition, target: EnergyModel,
                       h: float, substeps: int, stream: RandomStream,
                       s: int) -> ParticleCloud:
    """Generator samples pushed ``substeps`` Langevin steps toward the target.

    Stream children: child(0) draws the base noise, child(1) drives the flow,
    so ``substeps=1`` reproduces langevin_step(sample_generator(...)) exactly.
    """
    if substeps < 1:
        raise ContractError("substeps must be >= 1")
    base = draw_batch(gen, condition, stream.child(0), s)
    cloud, flow_stream = base.cloud, stream.child(1)
    for k in range(1, substeps + 1):
        cloud = langevin_step(cloud, target, h, flow_stream, k)
    return cloud


def _paired_sq_loss(out: T.Tensor, teacher: np.ndarray) -> T.Tensor:
    return T.mean(T.sum_squares(T.sub(out, T.constant(teacher)), axis=1))


def distill_step(gen: ImplicitGenerator, teacher_batch: ParticleCloud,
                 student: GeneratorBatch, config: DistillConfig,
                 critic: Optional[Critic] = None, optimizer=None,
                 critic_optimizer=None) -> DistillResult:
    """One distillation round: ``inner_steps`` updates of the generator
    parameters decreasing the configured distance to the (detached) teacher.

    ``student`` carries the noise that produced it; for euclidean pairing the
    caller passes the same noise that seeded the teacher batch.  Returns the
    distance measured on the incoming batches, before any update.
    """
    teacher = teacher_batch.samples
    if teacher.shape != student.cloud.samples.shape:
        raise ContractError("teacher and student batches must share (S, d)")
    if (critic is None) == (config.distance_kind == "critic"):
        raise ContractError("critic must be supplied iff distance_kind == 'critic'")
    opt = optimizer if optimizer is not None else Sgd(config.step_size)

    if config.distance_kind == "euclidean":
        reported = float(np.mean(np.sum((student.cloud.samples - teacher) ** 2, axis=1)))
    elif config.distance_kind == "exact_ot":
        reported = wasserstein_exact(student.cloud, teacher_batch, order=2)
    else:
        reported = float(critic.score(teacher).mean() - critic.score(student.cloud.samples).mean())

    for _ in range(config.inner_steps):
        if config.distance_kind == "critic":
            for _ in range(config.critic_steps):
                cur = ParticleCloud(gen.network.evaluate(
                    gen.params, gen._inputs(student.condition, student.noise)))
                critic, _ = critic_update(critic, teacher, cur.samples,
                                          config.critic_step_size, critic_optimizer)

        pt, _, out = gen.graph(student.condition, student.noise)
        if config.distance_kind == "euclidean":
            loss = _paired_sq_loss(out, teacher)
        elif config.distance_kind == "exact_ot":
            plan = transport_plan(out.value, teacher, order=2)
            loss = _paired_sq_loss(out, teacher[plan.permutation])
        else:
            cpt = {k: T.constant(v) for k, v in critic.params.items()}
            loss = T.neg(T.mean(critic.network.build(cpt, out)))
        gs = T.grad(loss, list(pt.values()))
        grads = ParamMap((k, g.value) for k, g in zip(pt.keys(), gs))
        opt.step(gen.params, grads)

    return DistillResult(gen.params, critic, reported)


def _critic_objective_graph(critic: Critic, real: np.ndarray, fake: np.ndarray):
    pt = {k: T.Tensor(v, requires_grad=True) for k, v in critic.params.items()}
    obj = T.sub(T.mean(critic.network.build(pt, T.constant(real))),
                T.mean(critic.network.build(pt, T.constant(fake))))
    return pt, obj


def _gradient_penalty_graph(critic_params_t: dict, network: DifferentiableFunction,
                            points: np.ndarray) -> T.Tensor:
    xt = T.Tensor(points, requires_grad=True)
    out = network.build(critic_params_t, xt)
    (gx,) = T.grad(T.tsum(out), [xt], create_graph=True)
    norms = T.sqrt(T.add(T.sum_squares(gx, axis=1), T.constant(1e-12)))
    return T.mean(T.square(T.sub(norms, T.constant(1.0))))


def gradient_penalty_value(critic: Critic, points: np.ndarray) -> float:
    """Mean squared excess of the critic's input-gradient norm over 1."""
    pt = {k: T.constant(v) for k, v in critic.params.items()}
    return float(_gradient_penalty_graph(pt, critic.network, points).value)


def critic_update(critic: Critic, real_batch, fake_batch, step_size: float,
                  optimizer=None, stream: RandomStream | None = None):
    """One ascent step on mean f(real) - mean f(fake), regularizer applied.

    Weight clipping clamps every parameter to [-c, c] after the step; the
    gradient penalty subtracts lam * penalty at interpolates (midpoints when
    no stream is given) from the ascent objective.  Returns (critic, objective).
    """
    real = real_batch.samples if isinstance(real_batch, ParticleCloud) else np.atleast_2d(real_batch)
    fake = fake_batch.samples if isinstance(fake_batch, ParticleCloud) else np.atleast_2d(fake_batch)
    if real.shape != fake.shape:
        raise ContractError("real and fake batches must share (S, d)")
    pt, obj = _critic_objective_graph(critic, real, fake)
    ascent = obj
    if critic.regularization and critic.regularization[0] == "gradient_penalty":
        lam = float(critic.regularization[1])
        eps = 0.5 if stream is None else stream.uniforms(real.shape[0])[:, None]
        mid = eps * real + (1.0 - eps) * fake
        ascent = T.sub(obj, T.mul(T.constant(lam),
                                  _gradient_penalty_graph(pt, critic.network, mid)))
    gs = T.grad(ascent, list(pt.values()))
    grads = ParamMap((k, g.value) for k, g in zip(pt.keys(), gs))
    opt = optimizer if optimizer is not None else Sgd(step_size, maximize=True)
    opt.step(critic.params, grads)
    if critic.regularization and critic.regularization[0] == "weight_clip":
        critic.params.clip_(float(critic.regularization[1]))
    return critic, float(obj.value)


# ---------------------------------------------------------------------------
# stock generator / critic architectures
# ---------------------------------------------------------------------------

def make_mlp_generator(out_dim: int, noise_dim: int, hidden, stream: RandomStream,
                       cond_dim: int = 0, activation: str = "tanh") -> ImplicitGenerator:
    sizes = [cond_dim + noise_dim, *hidden, out_dim]
    net = mlp(sizes, activation=activation, name="generator")
    return ImplicitGenerator(net, init_mlp_params(net, stream), noise_dim, cond_dim)


def make_mlp_critic(dim: int, hidden, stream: RandomStream,
                    regularization=("weight_clip", 0.1)) -> Critic:
    net = mlp([dim, *hidden, 1], activation="tanh", name="critic")
    return Critic(net, init_mlp_params(net, stream), regularization)


def make_invertible_generator(dim: int, hidden: int, stream: RandomStream,
                              cond_dim: int = 0, residual_scale: float = 0.1,
                              blocks: int = 1) -> ImplicitGenerator:
    """Stack of affine-plus-smooth-residual blocks on the noise path.

    Each block starts near the identity, so the composite Jacobian stays
    well-conditioned at init; the condition (if any) enters the first block
    both linearly and through its residual net.
    """
    shapes = {}
    for k in range(blocks):
        in_extra = cond_dim if k == 0 else 0
        shapes[f"A{k}"] = (dim, dim)
        shapes[f"b{k}"] = (dim,)
        shapes[f"rw1_{k}"] = (in_extra + dim, hidden)
        shapes[f"rb1_{k}"] = (hidden,)
        shapes[f"rw2_{k}"] = (hidden, dim)
    if cond_dim:
        shapes["C"] = (cond_dim, dim)

    def build(p, x):
        z = T.slice_axis(x, 1, cond_dim, cond_dim + dim)
        cond = T.slice_axis(x, 1, 0, cond_dim) if cond_dim else None
        for k in range(blocks):
            out = T.add(T.matmul(z, p[f"A{k}"]), p[f"b{k}"])
            if k == 0 and cond_dim:
                out = T.add(out, T.matmul(cond, p["C"]))
                res_in = T.concat([cond, z], axis=1)
            else:
                res_in = z
            h = T.tanh(T.add(T.matmul(res_in, p[f"rw1_{k}"]), p[f"rb1_{k}"]))
            z = T.add(out, T.mul(T.constant(residual_scale), T.matmul(h, p[f"rw2_{k}"])))
        return z

    net = DifferentiableFunction(build, shapes, cond_dim + dim, dim, name="inv_generator")
    params = ParamMap()
    for k in range(blocks):
        in_extra = cond_dim if k == 0 else 0
        params[f"A{k}"] = np.eye(dim) + 0.02 * stream.normal_matrix(dim, dim)
        params[f"b{k}"] = np.zeros(dim)
        params[f"rw1_{k}"] = stream.normal_matrix(in_extra + dim, hidden) / np.sqrt(in_extra + dim)
        params[f"rb1_{k}"] = np.zeros(hidden)
        params[f"rw2_{k}"] = stream.normal_matrix(hidden, dim) / np.sqrt(hidden)
    if cond_dim:
        params["C"] = np.zeros((cond_dim, dim))
    return ImplicitGenerator(net, params, dim, cond_dim, invertible_mode=True)


def generator_jacobians(gen: ImplicitGenerator, condition,
                        noise: np.ndarray) -> np.ndarray:
    """Per-sample Jacobians of the noise->output map, shape (S, d, d).

    One reverse pass per output coordinate; rows of the batch are independent
    so the passes batch across samples.
    """
    if not gen.invertible_mode:
        raise ContractError("jacobians need an invertible_mode generator")
    d = gen.out_dim
    s = noise.shape[0]
    jac = np.empty((s, d, d))
    _, nt, out = gen.graph(condition, noise, params_grad=False, noise_grad=True)
    for j in range(d):
        onehot = np.zeros((1, d))
        onehot[0, j] = 1.0
        (gn,) = T.grad(T.tsum(T.mul(out, T.constant(onehot))), [nt])
        jac[:, j, :] = gn.value
    return jac


def generator_log_density(gen: ImplicitGenerator, condition, noise: np.ndarray):
    """log q(x) at x = G(noise) by the change-of-variables formula.

    Returns (samples, log_density).  Raises NumericError (with the sample
    index) if any Jacobian determinant falls below the floor.
    """
    samples = gen.network.evaluate(gen.params, gen._inputs(condition, noise))
    jac = generator_jacobians(gen, condition, noise)
    sign, logabs = np.linalg.slogdet(jac)
    ok = (sign != 0) & (logabs >= np.log(_DET_FLOOR))
    if not np.all(ok):
        raise NumericError(f"near-singular Jacobian at sample {int(np.argmin(ok))}")
    d = gen.noise_dim
    log_q0 = -0.5 * np.sum(noise ** 2, axis=1) - 0.5 * d * np.log(2 * np.pi)
    return samples, log_q0 - logabs
