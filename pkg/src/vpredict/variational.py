"""Mean-field Gaussian posteriors and the one-step augmented posterior."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import diff as ad
from .model import HALF_LOG_2PI, PriorSpec, SinusoidParams, log_likelihood_point

LAMBDA_CAP = -20.0  # log_lambda at or below this means a zero step
DEFAULT_GH_ORDER = 7


@dataclass(frozen=True, eq=False)
class MeanFieldGaussian:
    """Factorized Gaussian over (log_f, phi), parameterized by means and log std devs.

    Components may be floats, arrays (a batch of Gaussians) or Duals.
    """

    mu: tuple
    log_sigma: tuple

    def __post_init__(self):
        object.__setattr__(self, "mu", tuple(self.mu))
        object.__setattr__(self, "log_sigma", tuple(self.log_sigma))
        if len(self.mu) != 2 or len(self.log_sigma) != 2:
            raise ValueError("mean-field Gaussian needs two means and two log scales")
        for v in self.mu + self.log_sigma:
            if not np.all(np.isfinite(ad.value(v))):
                raise ValueError("mean-field Gaussian parameters must be finite")

    @property
    def sigma(self) -> tuple:
        return tuple(ad.exp(s) for s in self.log_sigma)

    def as_vector(self) -> list:
        return [*self.mu, *self.log_sigma]

    @classmethod
    def from_vector(cls, v) -> MeanFieldGaussian:
        return cls((v[0], v[1]), (v[2], v[3]))

    def values(self) -> np.ndarray:
        return np.array([ad.value(v) for v in self.as_vector()], dtype=float)

    def mean_params(self) -> SinusoidParams:
        return SinusoidParams(*self.mu)

    @classmethod
    def from_prior(cls, prior: PriorSpec = PriorSpec()) -> MeanFieldGaussian:
        return cls(tuple(float(m) for m in prior.mean), tuple(float(s) for s in np.log(prior.std)))


@dataclass(frozen=True)
class AugmentedPosteriorConfig:
    """Inner step size and inverse temperature, both stored as logs."""

    log_lambda: float = float(np.log(0.01))
    log_beta: float = 0.0

    def __post_init__(self):
        if not (np.isfinite(ad.value(self.log_lambda)) and np.isfinite(ad.value(self.log_beta))):
            raise ValueError("augmented-posterior config must be finite")

    @property
    def step_size(self):
        return 0.0 if self.is_zero_step else float(np.exp(ad.value(self.log_lambda)))

    @property
    def inverse_temperature(self):
        return float(np.exp(ad.value(self.log_beta)))

    @property
    def is_zero_step(self) -> bool:
        return bool(ad.value(self.log_lambda) <= LAMBDA_CAP)

    @classmethod
    def zero_step(cls) -> AugmentedPosteriorConfig:
        return cls(log_lambda=LAMBDA_CAP, log_beta=0.0)


def _col(v):
    if isinstance(v, ad.Dual):
        return v.reshape(v.shape + (1,))
    return np.asarray(v, dtype=float)[..., None]


def reparam_sample(eta: MeanFieldGaussian, eps) -> SinusoidParams:
    """theta_i = mu_i + sigma_i * eps_i."""
    s0, s1 = eta.sigma
    return SinusoidParams(eta.mu[0] + s0 * eps[0], eta.mu[1] + s1 * eps[1])


def log_q_density(eta: MeanFieldGaussian, theta: SinusoidParams):
    out = 0.0
    for m, ls, t in zip(eta.mu, eta.log_sigma, (theta.log_f, theta.phi)):
        z = (t - m) * ad.exp(-ls)
        out = out - 0.5 * z * z - ls - HALF_LOG_2PI
    return out


def gaussian_kl_to_prior(eta: MeanFieldGaussian, prior: PriorSpec = PriorSpec()):
    """KL(q || prior) for the untruncated Gaussian prior, summed over both dimensions.

    Prior bounds only shift log p(theta) by a constant, so they are ignored here.
    """
    out = 0.0
    for m, ls, pm, pv in zip(eta.mu, eta.log_sigma, prior.mean, prior.variance):
        d = m - pm
        out = out + 0.5 * np.log(pv) - ls + (ad.exp(2.0 * ls) + d * d) / (2.0 * pv) - 0.5
    return out


@lru_cache(maxsize=None)
def gh_rule(order: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Tensor-product Gauss-Hermite nodes (standard-normal scale) and weights for 2-D."""
    if order < 3:
        raise ValueError("Gauss-Hermite order must be at least 3")
    t, w = np.polynomial.hermite.hermgauss(order)
    z = np.sqrt(2.0) * t
    z0, z1 = np.meshgrid(z, z, indexing="ij")
    ww = np.outer(w, w) / np.pi
    return z0.ravel(), z1.ravel(), ww.ravel()


def gh_expectation(eta: MeanFieldGaussian, fn, order: int = DEFAULT_GH_ORDER):
    """E_q[fn(theta)] by tensor-product Gauss-Hermite.

    ``fn`` sees a SinusoidParams whose fields have a trailing node axis.
    """
    z0, z1, w = gh_rule(order)
    s0, s1 = eta.sigma
    theta = SinusoidParams(_col(eta.mu[0]) + _col(s0) * z0, _col(eta.mu[1]) + _col(s1) * z1)
    return (fn(theta) * w).sum(axis=-1)


def expected_loglik_gh(eta: MeanFieldGaussian, x, y, order: int = DEFAULT_GH_ORDER):
    xc, yc = _col(x), _col(y)
    return gh_expectation(eta, lambda th: log_likelihood_point(yc, xc, th), order)


def _batch_shape(*vals) -> tuple:
    return np.broadcast_shapes(*(ad.value(v).shape for v in vals))


def _broadcast(v, shape):
    if shape == ():
        return v
    if isinstance(v, ad.Dual):
        return v if v.shape == shape else v.broadcast_to(shape)
    return np.broadcast_to(np.asarray(v, dtype=float), shape)


def inner_objective(eta: MeanFieldGaussian, x, y, cfg: AugmentedPosteriorConfig,
                    order: int = DEFAULT_GH_ORDER, prior: PriorSpec = PriorSpec()):
    """-beta * E_q[log p(y|x,theta)] + KL(q || prior), the quantity the inner step descends."""
    beta = ad.exp(cfg.log_beta)
    return -beta * expected_loglik_gh(eta, x, y, order) + gaussian_kl_to_prior(eta, prior)


def maml_update(eta: MeanFieldGaussian, x, y, cfg: AugmentedPosteriorConfig,
                order: int = DEFAULT_GH_ORDER, prior: PriorSpec = PriorSpec()) -> MeanFieldGaussian:
    """One gradient step on the base posterior towards explaining the extra point (x, y).

    x and y may be arrays; each element then gets its own updated posterior.
    The step stays differentiable in every input, including through the inner
    gradient.
    """
    if cfg.is_zero_step:
        return eta
    shape = _batch_shape(x, y, *eta.as_vector())
    start = [_broadcast(v, shape) for v in eta.as_vector()]

    def objective(v):
        return inner_objective(MeanFieldGaussian.from_vector(v), x, y, cfg, order, prior)

    try:
        g = ad.nested_gradient(objective, start)
    except ad.NonFiniteError as exc:
        raise ad.NonFiniteError(f"inner gradient: {exc}", exc.index) from exc
    lam = ad.exp(cfg.log_lambda)
    return MeanFieldGaussian.from_vector([start[i] - lam * g[i] for i in range(4)])
