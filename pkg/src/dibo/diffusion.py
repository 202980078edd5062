"""DDPM machinery: schedules, noise-prediction models, reweighted training,
ancestral sampling, forward noising, and exact trajectory log-densities.

All model coordinates live in the normalized cube [-1, 1]^D. Trajectories
store states x_0..x_T; per-transition log-densities are Gaussian under the
reverse kernels of whichever model is queried.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import PchipInterpolator

from . import autodiff as ad
from . import nn

LOG_2PI = float(np.log(2.0 * np.pi))

# standard 1000-step linear endpoints, rescaled so total injected noise is
# comparable at any step count
BETA_START_1000 = 1e-4
BETA_END_1000 = 0.02


@dataclass(frozen=True)
class NoiseSchedule:
    """Discrete variance schedule plus its continuous interpolation.

    ``phi(t) = -log(alpha_bar(t))`` is interpolated over t in [0, 1] with a
    monotone cubic through the discrete knots, giving smooth drift/diffusion
    coefficients for the probability-flow ODE.
    """

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma2: np.ndarray
    _phi: PchipInterpolator = field(repr=False, compare=False)
    _dphi: PchipInterpolator = field(repr=False, compare=False)

    def alpha_bar_cont(self, t):
        return np.exp(-self._phi(t))

    def beta_cont(self, t):
        return float(self._dphi(t))


def make_schedule(T: int, beta_start: float | None = None, beta_end: float | None = None,
                  variance: str = "beta") -> NoiseSchedule:
    if T < 1:
        raise ValueError("T must be >= 1")
    if beta_start is None:
        beta_start = BETA_START_1000 * 1000.0 / T
    if beta_end is None:
        beta_end = BETA_END_1000 * 1000.0 / T
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    beta = np.linspace(beta_start, beta_end, T)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    if variance == "beta":
        sigma2 = beta.copy()
    elif variance == "posterior":
        prev = np.concatenate([[1.0], alpha_bar[:-1]])
        sigma2 = beta * (1.0 - prev) / (1.0 - alpha_bar)
        sigma2[0] = beta[0]  # q-posterior variance degenerates to 0 at t=1
    else:
        raise ValueError(f"unknown variance rule {variance!r}")
    knots_t = np.arange(T + 1) / T
    knots_phi = np.concatenate([[0.0], -np.cumsum(np.log(alpha))])
    phi = PchipInterpolator(knots_t, knots_phi)
    return NoiseSchedule(T, beta, alpha, alpha_bar, sigma2, phi, phi.derivative())


# ---------------------------------------------------------------------------
# noise-prediction models
# ---------------------------------------------------------------------------


class DiffusionModel:
    """A noise predictor eps(x_t, t) bound to a schedule.

    ``params`` is a flat list of arrays; ``eps`` must be written with traced
    primitives so that training and trajectory densities differentiate.
    """

    schedule: NoiseSchedule
    params: list

    @property
    def dim(self) -> int:
        raise NotImplementedError

    def eps(self, x, t, params=None):
        raise NotImplementedError

    def clone(self) -> "DiffusionModel":
        dup = copy.copy(self)
        dup.params = [p.copy() for p in self.params]
        return dup

    def param_names(self) -> list[str]:
        return [f"param[{i}]" for i in range(len(self.params))]

    def score(self, x, t_cont, params=None):
        """Score estimate at continuous time, snapped to the nearest trained
        step; the denominator uses the matching discrete noise level."""
        k = int(np.clip(round(float(t_cont) * self.schedule.T), 1, self.schedule.T))
        denom = np.sqrt(1.0 - self.schedule.alpha_bar[k - 1])
        return ad.mul(-1.0 / denom, self.eps(x, k, params=params))


class MlpDiffusionModel(DiffusionModel):
    """MLP noise predictor conditioned on a sinusoidal time embedding."""

    def __init__(self, schedule: NoiseSchedule, net: nn.NoiseNet, params: list):
        self.schedule = schedule
        self.net = net
        self.params = params

    @property
    def dim(self):
        return self.net.data_dim

    def eps(self, x, t, params=None):
        return nn.noise_net_forward(self.net, self.params if params is None else params, x, t)

    def param_names(self):
        return nn.param_names(self.net.spec)


class LinearEpsModel(DiffusionModel):
    """Per-step affine noise predictor eps(x, t) = a_t * x + b_t.

    Exact for Gaussian data; used as a trainable sampler in closed-form
    posterior checks.
    """

    def __init__(self, schedule: NoiseSchedule, a: np.ndarray, b: np.ndarray):
        self.schedule = schedule
        self.params = [np.asarray(a, float), np.asarray(b, float)]

    @property
    def dim(self):
        return self.params[1].shape[1]

    def eps(self, x, t, params=None):
        a, b = self.params if params is None else params
        t_idx = np.broadcast_to(np.asarray(t) - 1, (ad.shape_of(x)[0],))
        a_t = ad.reshape(ad.take_rows(a, t_idx), (-1, 1))
        b_t = ad.take_rows(b, t_idx)
        return ad.add(ad.mul(a_t, x), b_t)

    def param_names(self):
        return ["a", "b"]


class AnalyticGaussianModel(DiffusionModel):
    """Frozen optimal noise predictor for data N(0, data_std^2 I)."""

    def __init__(self, schedule: NoiseSchedule, data_std: float, dim: int):
        self.schedule = schedule
        self.data_std = float(data_std)
        self._dim = dim
        self.params = []

    @property
    def dim(self):
        return self._dim

    def optimal_linear_coeffs(self, dim: int):
        ab = self.schedule.alpha_bar
        a = np.sqrt(1.0 - ab) / (ab * self.data_std ** 2 + 1.0 - ab)
        return a, np.zeros((self.schedule.T, dim))

    def eps(self, x, t, params=None):
        ab = self.schedule.alpha_bar[np.asarray(t) - 1]
        coef = np.sqrt(1.0 - ab) / (ab * self.data_std ** 2 + 1.0 - ab)
        coef = np.reshape(np.broadcast_to(coef, (ad.shape_of(x)[0],)), (-1, 1))
        return ad.mul(coef, x)

    def score(self, x, t_cont, params=None):
        # exact score of the diffused Gaussian at continuous time
        ab = float(self.schedule.alpha_bar_cont(t_cont))
        var = ab * self.data_std ** 2 + 1.0 - ab
        return ad.mul(-1.0 / var, x)


def make_mlp_prior(schedule: NoiseSchedule, dim: int, hidden_units: int, num_layers: int,
                   rng: np.random.Generator, embed_dim: int = 64) -> MlpDiffusionModel:
    net = nn.make_noise_net(dim, hidden_units, num_layers, schedule.T, embed_dim)
    return MlpDiffusionModel(schedule, net, nn.init_noise_net(net, rng))


# ---------------------------------------------------------------------------
# trajectories
# ---------------------------------------------------------------------------


@dataclass
class Trajectory:
    """A batch of denoising chains. ``states[t]`` is x_t, shape (n, d)."""

    states: np.ndarray  # (T+1, n, d)
    logp_prior_T: np.ndarray  # (n,)
    step_logps: np.ndarray  # (T, n); step t-1 holds log p(x_{t-1} | x_t)

    @property
    def n(self) -> int:
        return self.states.shape[1]

    @property
    def x0(self) -> np.ndarray:
        return self.states[0]

    def total_logp(self) -> np.ndarray:
        return self.logp_prior_T + self.step_logps.sum(axis=0)


def _std_normal_logpdf(x):
    return -0.5 * np.sum(x * x, axis=-1) - 0.5 * x.shape[-1] * LOG_2PI


def _reverse_mean_np(model: DiffusionModel, x, t: int):
    sch = model.schedule
    eps = ad.raw_value(model.eps(x, t))
    coef = sch.beta[t - 1] / np.sqrt(1.0 - sch.alpha_bar[t - 1])
    return (x - coef * eps) / np.sqrt(sch.alpha[t - 1])


def sample(model: DiffusionModel, n: int, rng: np.random.Generator):
    """Ancestral sampling; returns (x0, Trajectory) with densities under
    the generating model."""
    sch = model.schedule
    d = model.dim
    states = np.empty((sch.T + 1, n, d))
    step_logps = np.empty((sch.T, n))
    x = rng.standard_normal((n, d))
    states[sch.T] = x
    logp_T = _std_normal_logpdf(x)
    for t in range(sch.T, 0, -1):
        mu = _reverse_mean_np(model, x, t)
        s2 = sch.sigma2[t - 1]
        x = mu + np.sqrt(s2) * rng.standard_normal((n, d))
        states[t - 1] = x
        step_logps[t - 1] = (
            -0.5 * np.sum((x - mu) ** 2, axis=-1) / s2 - 0.5 * d * (LOG_2PI + np.log(s2))
        )
    return states[0].copy(), Trajectory(states, logp_T, step_logps)


def noise_trajectory(model: DiffusionModel, x0: np.ndarray, rng: np.random.Generator):
    """Forward-noise x0 through q and score the chain under the model's
    reverse kernels (off-policy trajectories)."""
    sch = model.schedule
    x0 = np.atleast_2d(np.asarray(x0, float))
    n, d = x0.shape
    states = np.empty((sch.T + 1, n, d))
    states[0] = x0
    x = x0
    for t in range(1, sch.T + 1):
        x = np.sqrt(1.0 - sch.beta[t - 1]) * x + np.sqrt(sch.beta[t - 1]) * rng.standard_normal((n, d))
        states[t] = x
    traj = Trajectory(states, _std_normal_logpdf(states[sch.T]), None)
    traj.step_logps = ad.raw_value(_step_logps_matrix(model, traj))
    return traj


def _stacked_inputs(traj: Trajectory):
    T = traj.states.shape[0] - 1
    n = traj.states.shape[1]
    x_in = traj.states[1:].reshape(T * n, -1)
    x_out = traj.states[:-1].reshape(T * n, -1)
    t_idx = np.repeat(np.arange(1, T + 1), n)
    return x_in, x_out, t_idx


def _step_logps_matrix(model: DiffusionModel, traj: Trajectory, params=None):
    """(T, n) per-transition log-densities under the model, differentiable
    w.r.t. params. All timesteps are scored in a single batched forward."""
    sch = model.schedule
    T = sch.T
    if traj.states.shape[0] != T + 1:
        raise ValueError(f"trajectory has {traj.states.shape[0] - 1} steps, model expects {T}")
    x_in, x_out, t_idx = _stacked_inputs(traj)
    n = traj.states.shape[1]
    d = traj.states.shape[2]
    eps = model.eps(x_in, t_idx, params=params)
    coef = (sch.beta / np.sqrt(1.0 - sch.alpha_bar))[t_idx - 1][:, None]
    inv_sqrt_alpha = (1.0 / np.sqrt(sch.alpha))[t_idx - 1][:, None]
    mu = ad.mul(inv_sqrt_alpha, ad.sub(x_in, ad.mul(coef, eps)))
    s2 = sch.sigma2[t_idx - 1]
    sq = ad.asum(ad.square(ad.sub(x_out, mu)), axis=1)
    rows = ad.sub(ad.mul(-0.5, ad.div(sq, s2)), 0.5 * d * (LOG_2PI + np.log(s2)))
    return ad.reshape(rows, (T, n))


def traj_logprob(model: DiffusionModel, traj: Trajectory, params=None):
    """log p(x_{0:T}) under the model: standard-normal prior at T plus the
    reverse-kernel transitions. Differentiable w.r.t. params."""
    per_step = _step_logps_matrix(model, traj, params=params)
    return ad.add(ad.asum(per_step, axis=0), traj.logp_prior_T)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def train_prior(model: DiffusionModel, X: np.ndarray, weights: np.ndarray, *,
                epochs: int, lr: float, batch_size: int, rng: np.random.Generator):
    """Weighted noise-prediction training (per-example multiplier w_i * n).

    Returns the trained model (new params) and the per-epoch mean loss.
    """
    X = np.asarray(X, float)
    n, d = X.shape
    sch = model.schedule
    wn = np.ones(n) if weights is None else np.asarray(weights, float) * n
    params = [p.copy() for p in model.params]
    state = ad.adam_init(params, lr=lr)
    names = model.param_names()
    epoch_losses = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        running, seen = 0.0, 0
        for lo in range(0, n, batch_size):
            idx = order[lo:lo + batch_size]
            xb, wb = X[idx], wn[idx][:, None]
            t = rng.integers(1, sch.T + 1, size=idx.size)
            eps_true = rng.standard_normal(xb.shape)
            ab = sch.alpha_bar[t - 1][:, None]
            x_t = np.sqrt(ab) * xb + np.sqrt(1.0 - ab) * eps_true

            def loss_fn(ps):
                resid = ad.sub(eps_true, model.eps(x_t, t, params=ps))
                per_ex = ad.asum(ad.square(resid), axis=1, keepdims=True)
                return ad.mean(ad.mul(wb, per_ex))

            loss, grads = ad.value_and_grad(loss_fn, params)
            loss = float(ad.raw_value(loss))
            if not np.isfinite(loss):
                raise ad.NonFiniteError(f"diffusion loss became non-finite at epoch {epoch}")
            params, state = ad.adam_step(params, grads, state, names=names)
            running += loss * idx.size
            seen += idx.size
        epoch_losses.append(running / seen)
    trained = model.clone()
    trained.params = params
    return trained, epoch_losses
