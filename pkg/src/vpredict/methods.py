"""Trainers for the six predictive methods and the shared Adam optimizer.

MAP and BayesDark have two parameters and a cheap lattice search, so they are
fitted by lattice initialization plus Newton ascent.  MFVI, VP and uncondVP
use Adam on autodiff gradients.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import ndimage

from . import diff as ad
from .exact import DEFAULT_GRID, GridSpec, PosteriorGrid, newton_ascent, sample_posterior
from .model import (HALF_LOG_2PI, Dataset, PriorSpec, SinusoidParams, log_joint, log_likelihood,
                    log_likelihood_point, log_prior, mean_function)
from .variational import (DEFAULT_GH_ORDER, AugmentedPosteriorConfig, MeanFieldGaussian,
                          gaussian_kl_to_prior, gh_expectation, log_q_density, maml_update,
                          reparam_sample)

logger = logging.getLogger(__name__)

# independent noise streams per trainer, keyed off the same seed
_VP_STREAM = 1
_BAYESDARK_STREAM = 2
_EVAL_STREAM = 3


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class PredictiveParams:
    """Unit-variance sinusoid predictive q(y|x,D) = N(y; sin(2 pi exp(log_f_hat) x + phi_hat), 1)."""

    log_f_hat: float
    phi_hat: float

    def __post_init__(self):
        if not (np.isfinite(ad.value(self.log_f_hat)) and np.isfinite(ad.value(self.phi_hat))):
            raise ValueError("predictive parameters must be finite")

    def as_params(self) -> SinusoidParams:
        return SinusoidParams(self.log_f_hat, self.phi_hat)

    def log_density(self, x, y):
        return log_likelihood_point(y, x, self.as_params())


@dataclass(frozen=True)
class VpState:
    predictive: PredictiveParams
    eta: MeanFieldGaussian
    aug_cfg: AugmentedPosteriorConfig

    def as_vector(self) -> list:
        p = self.predictive
        return [p.log_f_hat, p.phi_hat, *self.eta.as_vector(), self.aug_cfg.log_lambda, self.aug_cfg.log_beta]

    @classmethod
    def from_vector(cls, v) -> VpState:
        return cls(PredictiveParams(v[0], v[1]), MeanFieldGaussian.from_vector(v[2:6]),
                   AugmentedPosteriorConfig(v[6], v[7]))

    def values(self) -> np.ndarray:
        return np.array([float(ad.value(v)) for v in self.as_vector()])


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 5000
    learning_rate: float = 0.01
    mc_draws_per_step: int = 8
    seed: int = 0
    gh_order: int = DEFAULT_GH_ORDER
    b1: float = 0.9
    b2: float = 0.999
    epsilon: float = 1e-8
    log_every: int = 10
    average_fraction: float = 0.2  # stochastic trainers return the mean iterate over this tail of steps

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.mc_draws_per_step < 1:
            raise ValueError("mc_draws_per_step must be >= 1")
        if self.gh_order < 3:
            raise ValueError("gh_order must be >= 3")
        if not 0.0 <= self.average_fraction < 1.0:
            raise ValueError("average_fraction must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class OptimizerState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, n: int) -> OptimizerState:
        return cls(np.zeros(n), np.zeros(n), 0)


@dataclass
class FitResult:
    """Trained parameters plus the record of how they were reached."""

    method: str
    params: object
    train_curve: list = field(default_factory=list)  # (step, loss)
    config: TrainConfig | None = None
    extra: dict = field(default_factory=dict)


def optimizer_step(state: OptimizerState, params, grads, cfg: TrainConfig):
    """Bias-corrected Adam update. Returns the new state and parameters."""
    params = np.asarray(params, dtype=float)
    grads = np.asarray(grads, dtype=float)
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ValueError("parameter, gradient and optimizer sizes disagree")
    bad = np.flatnonzero(~np.isfinite(grads))
    if bad.size:
        raise ad.NonFiniteError(f"non-finite gradient for parameter {bad[0]}", index=int(bad[0]))
    t = state.step + 1
    m = cfg.b1 * state.m + (1.0 - cfg.b1) * grads
    v = cfg.b2 * state.v + (1.0 - cfg.b2) * grads * grads
    m_hat = m / (1.0 - cfg.b1 ** t)
    v_hat = v / (1.0 - cfg.b2 ** t)
    new = params - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.epsilon)
    return OptimizerState(m, v, t), new


# lattice search ---------------------------------------------------------


def _support(prior: PriorSpec) -> GridSpec:
    if prior.bounds is None:
        return DEFAULT_GRID
    return replace(DEFAULT_GRID, log_f_range=tuple(prior.bounds[0]), phi_range=tuple(prior.bounds[1]))


def _local_maxima(values: np.ndarray, k: int, size: int = 9) -> list[tuple[int, int]]:
    peaks = (ndimage.maximum_filter(values, size=size, mode="nearest") == values) & np.isfinite(values)
    idx = np.argwhere(peaks)
    order = np.argsort(-values[peaks])
    return [tuple(idx[i]) for i in order[:k]]


def _lattice_starts(score: np.ndarray, spec: GridSpec, k: int) -> list[np.ndarray]:
    lf, ph = spec.centers
    return [np.array([lf[i], ph[j]]) for i, j in _local_maxima(score, k)]


# MAP ----------------------------------------------------------------------


def train_map(dataset: Dataset, prior: PriorSpec = PriorSpec(), cfg: TrainConfig = TrainConfig(),
              restarts: int = 8) -> FitResult:
    """Posterior mode from ``restarts`` Newton ascents started at the best lattice maxima."""
    spec = _support(prior)
    lf, ph = spec.centers
    lattice = log_joint(dataset, SinusoidParams(lf[:, None], ph[None, :]), prior)
    starts = _lattice_starts(lattice, spec, restarts)

    def objective(v):
        return log_joint(dataset, SinusoidParams(v[0], v[1]), prior)

    best, best_val, curve = None, -np.inf, []
    for k, start in enumerate(starts):
        theta = newton_ascent(objective, start, steps=min(cfg.steps, 100))
        val = float(objective(list(theta)))
        gnorm = float(np.linalg.norm(ad.gradient(objective, list(theta))))
        curve.append((k, -val))
        if np.isfinite(val) and gnorm < 1e-5 and val > best_val:
            best, best_val = theta, val
    if best is None:
        raise TrainingError("no MAP restart converged")
    result = PredictiveParams(float(best[0]), float(best[1]))
    return FitResult("map", result, curve, cfg, {"log_joint": best_val,
                                                "restart_starts": [s.tolist() for s in starts]})


# MFVI ---------------------------------------------------------------------


def elbo(eta: MeanFieldGaussian, dataset: Dataset, prior: PriorSpec = PriorSpec(), order: int = DEFAULT_GH_ORDER):
    """E_q[log p(D|theta)] + E_q[log p(theta)] + H[q], the expectation by Gauss-Hermite."""
    expected = gh_expectation(eta, lambda th: log_likelihood(dataset, th), order)
    return expected - gaussian_kl_to_prior(eta, prior) - prior.log_normalizer


def default_mfvi_init(dataset: Dataset, prior: PriorSpec, cfg: TrainConfig) -> MeanFieldGaussian:
    start = train_map(dataset, prior, cfg).params
    return MeanFieldGaussian((start.log_f_hat, start.phi_hat), (np.log(0.1), np.log(0.1)))


def train_mfvi(dataset: Dataset, prior: PriorSpec = PriorSpec(), cfg: TrainConfig = TrainConfig(),
               init: MeanFieldGaussian | None = None) -> FitResult:
    """Maximize the ELBO with Adam."""
    eta = init if init is not None else default_mfvi_init(dataset, prior, cfg)
    params = eta.values()
    state = OptimizerState.zeros(4)

    def loss(v):
        return -elbo(MeanFieldGaussian.from_vector(v), dataset, prior, cfg.gh_order)

    curve = []
    for step in range(cfg.steps):
        val, grad = ad.value_and_gradient(loss, list(params))
        val = float(val)
        if not np.isfinite(val):
            raise TrainingError(f"non-finite ELBO at step {step}")
        if step % cfg.log_every == 0:
            curve.append((step, val))
        state, params = optimizer_step(state, params, grad, cfg)
    final = float(loss(list(params)))
    curve.append((cfg.steps, final))
    return FitResult("mfvi", MeanFieldGaussian.from_vector(params.tolist()), curve, cfg, {"elbo": -final})


def mfvi_predictive_density(eta: MeanFieldGaussian, x, y, gh_order: int = DEFAULT_GH_ORDER):
    """E_q[N(y; mu(x; theta), 1)] by Gauss-Hermite; y may be an array."""
    xc = np.asarray(x, dtype=float)[..., None]
    yc = np.asarray(y, dtype=float)[..., None]
    return gh_expectation(eta, lambda th: np.exp(log_likelihood_point(yc, xc, th)), gh_order)


# BayesDark ---------------------------------------------------------------


def teacher_samples(grid: PosteriorGrid, n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """(x, y) pairs drawn from the grid posterior predictive with x ~ U(0, 1)."""
    rng = np.random.default_rng([seed, _BAYESDARK_STREAM])
    xs = rng.random(n)
    theta = sample_posterior(grid, rng, size=n)
    ys = mean_function(xs, SinusoidParams(theta[:, 0], theta[:, 1])) + rng.standard_normal(n)
    return xs, ys


def _sinusoid_fit_lattice(xs, ys, spec: GridSpec) -> np.ndarray:
    """Mean log-likelihood of every lattice node, via per-frequency trigonometric sums."""
    lf, ph = spec.centers
    omega = 2.0 * np.pi * np.exp(lf)
    out = np.empty((lf.size, ph.size))
    c1, s1 = np.cos(ph), np.sin(ph)
    c2, s2 = np.cos(2 * ph), np.sin(2 * ph)
    n = len(xs)
    yy = np.dot(ys, ys)
    for i, w in enumerate(omega):
        a = w * xs
        sa, ca = np.sin(a), np.cos(a)
        ys_s, ys_c = ys @ sa, ys @ ca
        cos2, sin2 = np.cos(2 * a).sum(), np.sin(2 * a).sum()
        cross = c1 * ys_s + s1 * ys_c                     # sum y sin(a + phi)
        sq = 0.5 * n - 0.5 * (c2 * cos2 - s2 * sin2)       # sum sin^2(a + phi)
        out[i] = -0.5 * (yy - 2.0 * cross + sq) / n - HALF_LOG_2PI
    return out


def train_bayesdark(grid: PosteriorGrid, cfg: TrainConfig = TrainConfig(), n_teacher: int = 20000) -> FitResult:
    """Fit the parametric predictive to samples from the exact posterior predictive (forward KL)."""
    xs, ys = teacher_samples(grid, n_teacher, cfg.seed)
    lattice = _sinusoid_fit_lattice(xs, ys, grid.spec)
    start = _lattice_starts(lattice, grid.spec, 1)[0]

    def objective(v):
        return log_likelihood_point(ys, xs, SinusoidParams(v[0], v[1])).mean()

    initial = float(objective(list(start)))
    theta = newton_ascent(objective, start, steps=min(cfg.steps, 100))
    final = float(objective(list(theta)))
    curve = [(0, -initial), (1, -final)]
    # the predictive is 2*pi periodic in phase; report the representative in (-pi, pi]
    phi = float(np.pi - np.mod(np.pi - theta[1], 2.0 * np.pi))
    return FitResult("bayesdark", PredictiveParams(float(theta[0]), phi), curve, cfg,
                     {"mean_log_q": final, "initial_mean_log_q": initial, "n_teacher": n_teacher})


# Variational prediction --------------------------------------------------


@dataclass(frozen=True)
class VpNoise:
    """Exogenous randomness of one (or a batch of) loss draws."""

    x: np.ndarray
    eps_y: np.ndarray
    eps_theta: np.ndarray  # shape (2, ...)

    @classmethod
    def draw(cls, rng: np.random.Generator, n: int) -> VpNoise:
        return cls(rng.random(n), rng.standard_normal(n), rng.standard_normal((2, n)))

    def __getitem__(self, i) -> VpNoise:
        return VpNoise(self.x[i], self.eps_y[i], self.eps_theta[:, i])

    def __len__(self) -> int:
        return np.size(self.x)


def step_noise(seed: int, step: int, n: int, stream: int = _VP_STREAM) -> VpNoise:
    return VpNoise.draw(np.random.default_rng([seed, stream, step]), n)


def vp_terms(state: VpState, dataset: Dataset, noise: VpNoise, gh_order: int = DEFAULT_GH_ORDER,
             prior: PriorSpec = PriorSpec()) -> dict:
    """Each log term of one loss draw, keyed by name; see :func:`vp_loss`."""
    pred = state.predictive.as_params()
    x = noise.x
    y = mean_function(x, pred) + noise.eps_y
    eta_aug = maml_update(state.eta, x, y, state.aug_cfg, gh_order, prior)
    theta = reparam_sample(eta_aug, noise.eps_theta)
    zero = 0.0 * np.asarray(x, dtype=float)
    return {
        "log_q_y": log_likelihood_point(y, x, pred),
        "log_q_x": zero,
        "log_q_theta": log_q_density(eta_aug, theta),
        "log_p_y": log_likelihood_point(y, x, theta),
        "log_p_x": zero,
        "log_p_data": log_likelihood(dataset, theta),
        "log_p_theta": log_prior(theta, prior),
    }


def vp_loss(state: VpState, dataset: Dataset, noise: VpNoise, gh_order: int = DEFAULT_GH_ORDER,
            prior: PriorSpec = PriorSpec()):
    """Single-draw estimate of the variational prediction loss (without the + log p(D) constant).

    log q(y|x) + log q(x) + log q(theta|y,x) - log p(y|x,theta) - log p(x) - log p(D|theta) - log p(theta),
    with y drawn from the predictive, the augmented posterior from one inner
    step, and theta drawn from it.  Batched noise gives one value per draw.
    """
    t = vp_terms(state, dataset, noise, gh_order, prior)
    for name, v in t.items():
        if not np.all(np.isfinite(ad.value(v))):
            raise ad.NonFiniteError(f"non-finite loss term {name}")
    return (t["log_q_y"] + t["log_q_x"] + t["log_q_theta"]
            - t["log_p_y"] - t["log_p_x"] - t["log_p_data"] - t["log_p_theta"])


def initial_vp_state(dataset: Dataset, prior: PriorSpec, cfg: TrainConfig,
                     aug_cfg: AugmentedPosteriorConfig = AugmentedPosteriorConfig()) -> VpState:
    """Warm start: predictive at the MAP point, base posterior from a full MFVI run."""
    map_fit = train_map(dataset, prior, cfg)
    mfvi_fit = train_mfvi(dataset, prior, cfg)
    return VpState(map_fit.params, mfvi_fit.params, aug_cfg)


def train_vp(dataset: Dataset, prior: PriorSpec = PriorSpec(), cfg: TrainConfig = TrainConfig(),
             init: VpState | None = None, freeze_augmentation: bool = False) -> FitResult:
    """Minimize the mean of ``mc_draws_per_step`` loss draws per Adam step over every VpState scalar.

    With ``freeze_augmentation`` the inner step size and temperature are held
    at their initial values.
    """
    state0 = init if init is not None else initial_vp_state(dataset, prior, cfg)
    params = state0.values()
    n = params.size
    trainable = np.ones(n, dtype=bool)
    if freeze_augmentation:
        trainable[6:] = False
    opt = OptimizerState.zeros(int(trainable.sum()))

    def loss(v, noise):
        return vp_loss(VpState.from_vector(v), dataset, noise, cfg.gh_order, prior).mean()

    curve = []
    avg_from = cfg.steps - int(cfg.average_fraction * cfg.steps)
    total = np.zeros_like(params)
    for step in range(cfg.steps):
        noise = step_noise(cfg.seed, step, cfg.mc_draws_per_step)
        try:
            val, grad = ad.value_and_gradient(lambda v: loss(v, noise), list(params))
        except (ValueError, FloatingPointError) as exc:
            raise TrainingError(f"loss diverged at step {step}: {exc}") from exc
        val = float(val)
        if not np.isfinite(val):
            raise TrainingError(f"loss diverged at step {step}")
        if step % cfg.log_every == 0:
            curve.append((step, val))
        try:
            opt, new = optimizer_step(opt, params[trainable], np.asarray(grad)[trainable], cfg)
        except ad.NonFiniteError as exc:
            raise TrainingError(f"non-finite gradient at step {step}: {exc}") from exc
        params = params.copy()
        params[trainable] = new
        if step >= avg_from:
            total += params
    if avg_from < cfg.steps:
        params = total / (cfg.steps - avg_from)
        params[~trainable] = state0.values()[~trainable]
    state = VpState.from_vector(params.tolist())
    method = "uncondvp" if state.aug_cfg.is_zero_step else "vp"
    return FitResult(method, state, curve, cfg, {"initial_state": state0.values().tolist()})


def train_uncond_vp(dataset: Dataset, prior: PriorSpec = PriorSpec(), cfg: TrainConfig = TrainConfig(),
                    init: VpState | None = None) -> FitResult:
    """VP with the inner step switched off: the augmented posterior is the base posterior."""
    if init is None:
        init = initial_vp_state(dataset, prior, cfg, AugmentedPosteriorConfig.zero_step())
    else:
        init = replace(init, aug_cfg=AugmentedPosteriorConfig.zero_step())
    fit = train_vp(dataset, prior, cfg, init, freeze_augmentation=True)
    fit.method = "uncondvp"
    return fit
