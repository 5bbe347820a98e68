"""Flow-guided variational autoencoder.

The latent-variable model pairs a prior with a decoder into one of three
likelihood families.  Inference is an implicit conditional generator trained
by distillation: per data point, generator codes are pushed through Langevin
steps toward the current joint density and the generator chases the
transported batch.  The decoder parameters ascend the path-averaged joint
log-density.  Evidence-bound estimates come from the change-of-variables
density of invertible inference networks; a planar-flow stack is included as
the discrete-transformation baseline.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .amortize import (DistillConfig, GeneratorBatch, ImplicitGenerator, distill_step,
                       generator_log_density)
from .flow import FlowConfig, ParticleCloud, simulate_flow
from .metrics import MonteCarloEstimate
from .network import ContractError, DifferentiableFunction, NumericError, mlp, init_mlp_params
from .optim import Adam
from .params import ParamMap
from .rng import RandomStream
from .targets import EnergyModel, GaussianMoments, make_gaussian

__all__ = [
    "LatentVariableModel", "joint_log_density", "posterior_target",
    "train_vae", "elbo_estimate", "latent_code_variance",
    "PlanarFlowStack", "make_planar_stack", "planar_nf_elbo", "train_planar_nf",
    "linear_gaussian_model", "linear_gaussian_posterior", "linear_gaussian_evidence",
    "one_hot_dataset", "optimal_gaussian_inference",
]

_LIKELIHOODS = ("bernoulli", "categorical_onehot", "gaussian")


@dataclass
class LatentVariableModel:
    """Joint density p(x, z) = prior(z) * likelihood(x | decoder(z))."""

    prior: EnergyModel
    decoder: DifferentiableFunction
    likelihood: str
    params: ParamMap
    gaussian_std: float = 1.0

    def __post_init__(self):
        if self.likelihood not in _LIKELIHOODS:
            raise ContractError(f"unknown likelihood {self.likelihood!r}")
        if self.prior.log_normalizer is None:
            raise ContractError("prior must carry an analytic normalizer")
        if self.likelihood == "gaussian" and self.gaussian_std <= 0:
            raise ContractError("gaussian_std must be > 0")

    @property
    def latent_dim(self) -> int:
        return self.prior.dim

    @property
    def data_dim(self) -> int:
        return self.decoder.output_dim


def _loglik_graph(model: LatentVariableModel, dec: T.Tensor, x_row: np.ndarray) -> T.Tensor:
    """Per-sample log-likelihood (N, 1) of one observation under decoder output."""
    x = T.constant(np.asarray(x_row, dtype=np.float64).reshape(1, -1))
    if model.likelihood == "gaussian":
        var = model.gaussian_std ** 2
        quad = T.tsum(T.square(T.sub(x, dec)), axis=1, keepdims=True)
        const = -0.5 * model.data_dim * np.log(2 * np.pi * var)
        return T.add(T.mul(T.constant(-0.5 / var), quad), T.constant(const))
    if model.likelihood == "bernoulli":
        on = T.mul(x, T.neg(T.softplus(T.neg(dec))))
        off = T.mul(T.sub(T.constant(1.0), x), T.neg(T.softplus(dec)))
        return T.tsum(T.add(on, off), axis=1, keepdims=True)
    # categorical over one-hot rows
    logp = T.sub(dec, T.logsumexp(dec, axis=1, keepdims=True))
    return T.tsum(T.mul(x, logp), axis=1, keepdims=True)


def _joint_build(model: LatentVariableModel, x_row: np.ndarray):
    prior_const = -model.prior.log_normalizer

    def build(p, z):
        prior_term = T.add(model.prior.fn.build({}, z), T.constant(prior_const))
        dec = model.decoder.build(p, z)
        if dec.value.ndim == 1:
            dec = T.reshape(dec, (dec.value.shape[0], 1))
        return T.add(prior_term, _loglik_graph(model, dec, x_row))

    return build


def posterior_target(model: LatentVariableModel, x_row: np.ndarray) -> EnergyModel:
    """The joint log-density at fixed x as an energy over z (live parameters)."""
    fn = DifferentiableFunction(_joint_build(model, x_row),
                                dict(model.decoder.param_shapes),
                                model.latent_dim, 1, name="joint")
    return EnergyModel(fn, model.params, model.latent_dim, name="posterior_target",
                       log_normalizer=None)


def joint_log_density(model: LatentVariableModel, x_row: np.ndarray,
                      z: np.ndarray) -> np.ndarray:
    """Exact log p(x, z) for a batch of latents, one observation."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    values = posterior_target(model, x_row).log_density_unnorm(z)
    if not np.all(np.isfinite(values)):
        raise NumericError("non-finite joint log density")
    return values


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def train_vae(model: LatentVariableModel, inference: ImplicitGenerator,
              data: np.ndarray, flow_cfg: FlowConfig, distill_cfg: DistillConfig,
              epochs: int, stream: RandomStream, theta_lr: float = 1e-2,
              update_theta: bool = True, phi_optimizer=None) -> list[dict]:
    """Alternating training of decoder and amortized inference.

    Per epoch and data point: (1) draw inference codes and run the flow
    toward the current joint; (2) distill the transported batch into the
    inference network; (3) ascend the decoder on the path-averaged joint
    log-density.  With num_steps == 0 the flow is disabled and the decoder
    trains against raw inference samples (no distillation signal).
    """
    data = np.atleast_2d(np.asarray(data, dtype=np.float64))
    if data.shape[0] < 1:
        raise ContractError("data must be nonempty")
    if inference.cond_dim != data.shape[1]:
        raise ContractError("inference cond_dim must match the data dimension")
    substeps = min(distill_cfg.flow_substeps, max(flow_cfg.num_steps, 1))
    targets = [posterior_target(model, x) for x in data]
    phi_opt = phi_optimizer if phi_optimizer is not None else Adam(distill_cfg.step_size)
    theta_opt = Adam(theta_lr, maximize=True)
    s = distill_cfg.batch_size
    history = []

    for epoch in range(epochs):
        estream = stream.child(epoch)
        distances, theta_losses = [], []
        for i, x in enumerate(data):
            dstream = estream.child(i)
            noise = dstream.child(0).normal_matrix(s, inference.noise_dim)
            base = ParticleCloud(inference.network.evaluate(
                inference.params, inference._inputs(x, noise)))

            if flow_cfg.num_steps > 0:
                traj = simulate_flow(base, targets[i], flow_cfg, dstream.child(1))
                teacher = traj.clouds[substeps]
                if distill_cfg.distance_kind == "euclidean":
                    student = GeneratorBatch(base, noise, x)
                else:
                    fresh = dstream.child(2).normal_matrix(s, inference.noise_dim)
                    student = GeneratorBatch(ParticleCloud(inference.network.evaluate(
                        inference.params, inference._inputs(x, fresh))), fresh, x)
                res = distill_step(inference, teacher, student, distill_cfg,
                                   optimizer=phi_opt)
                distances.append(res.distance)
                path = np.concatenate([c.samples for c in traj.clouds[1:]], axis=0)
            else:
                path = base.samples

            if update_theta:
                fn = targets[i].fn
                weights = np.full(path.shape[0], 1.0 / path.shape[0])
                grads = fn.param_gradient(model.params, path, weights)
                theta_opt.step(model.params, grads)
                theta_losses.append(-float(
                    joint_log_density(model, x, path).mean()))

        history.append({
            "epoch": epoch,
            "distill_distance": float(np.mean(distances)) if distances else float("nan"),
            "theta_loss": float(np.mean(theta_losses)) if theta_losses else float("nan"),
        })
    return history


def latent_code_variance(inference: ImplicitGenerator, x_row: np.ndarray,
                         m: int, stream: RandomStream) -> float:
    """Total variance (trace of the sample covariance) of codes for one x."""
    noise = stream.normal_matrix(m, inference.noise_dim)
    codes = inference.network.evaluate(inference.params,
                                       inference._inputs(x_row, noise))
    return float(np.trace(np.cov(codes, rowvar=False, ddof=1).reshape(
        codes.shape[1], codes.shape[1])))


# ---------------------------------------------------------------------------
# evidence-bound estimation
# ---------------------------------------------------------------------------

def elbo_estimate(model: LatentVariableModel, inference: ImplicitGenerator,
                  x_row: np.ndarray, m: int, stream: RandomStream) -> MonteCarloEstimate:
    """Monte-Carlo evidence bound with exact per-sample code densities.

    Needs an invertible-mode inference network (noise dim == latent dim); the
    code density follows from the noise density and the Jacobian determinant
    of the noise->code map at fixed x.
    """
    if not inference.invertible_mode:
        raise ContractError("elbo_estimate needs an invertible_mode inference network")
    if m < 1:
        raise ContractError("m must be >= 1")
    zeta = stream.normal_matrix(m, inference.noise_dim)
    codes, log_q = generator_log_density(inference, x_row, zeta)
    joint = joint_log_density(model, x_row, codes)
    return MonteCarloEstimate.from_values(joint - log_q)


# ---------------------------------------------------------------------------
# planar-flow baseline
# ---------------------------------------------------------------------------

# shift that makes the invertibility reparameterization exact at u.w = 0,
# i.e. a zero layer stays the identity: softplus(ln(e-1)) == 1
_PLANAR_SHIFT = float(np.log(np.e - 1.0))


@dataclass
class PlanarFlowStack:
    """Diagonal-Gaussian base from an encoder, then planar layers.

    Each layer maps z -> z + u * tanh(w.z + b) with u reparameterized so that
    u.w >= -1, which keeps every layer invertible; the log-det of a layer is
    log|1 + (1 - tanh^2) * w.u|.
    """

    encoder: DifferentiableFunction
    params: ParamMap
    n_layers: int
    latent_dim: int


def make_planar_stack(data_dim: int, latent_dim: int, n_layers: int,
                      stream: RandomStream, hidden=(16,)) -> PlanarFlowStack:
    enc = mlp([data_dim, *hidden, 2 * latent_dim], activation="tanh", name="encoder")
    params = init_mlp_params(enc, stream.child(0))
    layer_stream = stream.child(1)
    for k in range(n_layers):
        params[f"u{k}"] = 0.1 * layer_stream.normals(latent_dim)
        params[f"w{k}"] = 0.1 * layer_stream.normals(latent_dim)
        params[f"bias{k}"] = np.zeros(1)
    return PlanarFlowStack(enc, params, n_layers, latent_dim)


def _planar_graph(stack: PlanarFlowStack, pt: dict, x_row: np.ndarray,
                  zeta: np.ndarray):
    """Returns (z_K, log q0(z0), sum of layer log-dets), each (M, 1) or (M, L)."""
    m, ldim = zeta.shape
    x_tiled = np.broadcast_to(np.asarray(x_row, float).reshape(1, -1),
                              (m, np.size(x_row))).copy()
    enc = stack.encoder.build(pt, T.constant(x_tiled))
    mu = T.slice_axis(enc, 1, 0, ldim)
    log_sig = T.slice_axis(enc, 1, ldim, 2 * ldim)
    zt = T.constant(zeta)
    z = T.add(mu, T.mul(T.exp(log_sig), zt))
    base = T.constant(-0.5 * np.sum(zeta ** 2, axis=1, keepdims=True)
                      - 0.5 * ldim * np.log(2 * np.pi))
    log_q0 = T.sub(base, T.tsum(log_sig, axis=1, keepdims=True))

    logdet = T.constant(np.zeros((m, 1)))
    for k in range(stack.n_layers):
        u, w, b = pt[f"u{k}"], pt[f"w{k}"], pt[f"bias{k}"]
        uw = T.tsum(T.mul(u, w))
        mval = T.add(T.constant(-1.0),
                     T.softplus(T.add(uw, T.constant(_PLANAR_SHIFT))))
        wnorm2 = T.add(T.tsum(T.square(w)), T.constant(1e-12))
        u_hat = T.add(u, T.mul(T.div(T.sub(mval, uw), wnorm2), w))
        lin = T.add(T.matmul(z, T.reshape(w, (ldim, 1))), b)
        t = T.tanh(lin)
        z = T.add(z, T.mul(t, T.reshape(u_hat, (1, ldim))))
        wu = T.tsum(T.mul(w, u_hat))
        inner = T.add(T.constant(1.0),
                      T.mul(T.sub(T.constant(1.0), T.square(t)), wu))
        logdet = T.add(logdet, T.log(T.maximum_const(T.tabs(inner), 1e-30)))
    return z, log_q0, logdet


def planar_nf_elbo(stack: PlanarFlowStack, model: LatentVariableModel,
                   x_row: np.ndarray, m: int, stream: RandomStream) -> MonteCarloEstimate:
    """Monte-Carlo evidence bound of the planar stack on one observation."""
    zeta = stream.normal_matrix(m, stack.latent_dim)
    pt = {k: T.constant(v) for k, v in stack.params.items()}
    z, log_q0, logdet = _planar_graph(stack, pt, x_row, zeta)
    joint = joint_log_density(model, x_row, z.value)
    vals = joint - log_q0.value[:, 0] + logdet.value[:, 0]
    return MonteCarloEstimate.from_values(vals)


def train_planar_nf(stack: PlanarFlowStack, model: LatentVariableModel,
                    data: np.ndarray, epochs: int, m: int, lr: float,
                    stream: RandomStream) -> list[float]:
    """Maximize the planar evidence bound over encoder and layer parameters;
    decoder parameters stay fixed.  Returns the per-epoch mean bound."""
    data = np.atleast_2d(np.asarray(data, dtype=np.float64))
    opt = Adam(lr, maximize=True)
    history = []
    jb = {tuple(x): _joint_build(model, x) for x in data}
    for epoch in range(epochs):
        estream = stream.child(epoch)
        vals = []
        for i, x in enumerate(data):
            zeta = estream.child(i).normal_matrix(m, stack.latent_dim)
            pt = {k: T.Tensor(v, requires_grad=True) for k, v in stack.params.items()}
            z, log_q0, logdet = _planar_graph(stack, pt, x, zeta)
            theta_t = {k: T.constant(v) for k, v in model.params.items()}
            joint = jb[tuple(x)](theta_t, z)
            elbo = T.mean(T.add(T.sub(joint, log_q0), logdet))
            gs = T.grad(elbo, list(pt.values()))
            opt.step(stack.params, ParamMap(
                (k, g.value) for k, g in zip(pt.keys(), gs)))
            vals.append(float(elbo.value))
        history.append(float(np.mean(vals)))
    return history


# ---------------------------------------------------------------------------
# conjugate linear-Gaussian oracle model
# ---------------------------------------------------------------------------

def linear_gaussian_model(weight: np.ndarray, bias: np.ndarray,
                          noise_std: float) -> LatentVariableModel:
    """x = z @ W + b + eps with standard-normal prior: closed-form posterior."""
    W = np.asarray(weight, dtype=np.float64)
    b = np.asarray(bias, dtype=np.float64)
    ldim, ddim = W.shape
    shapes = {"W": (ldim, ddim), "b": (ddim,)}

    def build(p, z):
        return T.add(T.matmul(z, p["W"]), p["b"])

    decoder = DifferentiableFunction(build, shapes, ldim, ddim, name="linear_decoder")
    params = ParamMap([("W", W), ("b", b)])
    prior = make_gaussian(np.zeros(ldim), np.eye(ldim))
    return LatentVariableModel(prior, decoder, "gaussian", params,
                               gaussian_std=float(noise_std))


def linear_gaussian_posterior(model: LatentVariableModel,
                              x_row: np.ndarray) -> GaussianMoments:
    W = model.params["W"]
    b = model.params["b"]
    var = model.gaussian_std ** 2
    prec = np.eye(W.shape[0]) + W @ W.T / var
    cov = np.linalg.inv(prec)
    mean = cov @ W @ (np.asarray(x_row, float) - b) / var
    return GaussianMoments(mean, cov)


def linear_gaussian_evidence(model: LatentVariableModel, x_row: np.ndarray) -> float:
    """Exact log p(x) of the conjugate model."""
    W = model.params["W"]
    b = model.params["b"]
    d = W.shape[1]
    cov = W.T @ W + model.gaussian_std ** 2 * np.eye(d)
    diff = np.asarray(x_row, float) - b
    _, logdet = np.linalg.slogdet(cov)
    return float(-0.5 * (d * np.log(2 * np.pi) + logdet
                         + diff @ np.linalg.solve(cov, diff)))


def optimal_gaussian_inference(model: LatentVariableModel) -> ImplicitGenerator:
    """The exact posterior sampler of a conjugate model as an invertible
    affine inference network: z = mean(x) + L . noise."""
    W = model.params["W"]
    b = model.params["b"]
    ldim, ddim = W.shape
    var = model.gaussian_std ** 2
    cov = np.linalg.inv(np.eye(ldim) + W @ W.T / var)
    chol = np.linalg.cholesky(cov)
    condmap = (cov @ W / var).T          # x @ condmap: (N, ddim) -> (N, ldim)
    offset = -(np.asarray(b, float) @ condmap)

    def build(p, inp):
        x = T.slice_axis(inp, 1, 0, ddim)
        zeta = T.slice_axis(inp, 1, ddim, ddim + ldim)
        post_mean = T.add(T.matmul(x, T.constant(condmap)), T.constant(offset))
        return T.add(post_mean, T.matmul(zeta, T.constant(chol.T)))

    net = DifferentiableFunction(build, {}, ddim + ldim, ldim, name="exact_posterior")
    return ImplicitGenerator(net, ParamMap(), ldim, ddim, invertible_mode=True)


def one_hot_dataset(n: int = 4) -> np.ndarray:
    """The n-point synthetic dataset: each row a distinct one-hot vector."""
    return np.eye(n)
