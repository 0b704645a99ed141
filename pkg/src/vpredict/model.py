"""Sinusoid regression model: prior, likelihood and seeded data synthesis."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.special import ndtr

from . import diff as ad

HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)
TWO_PI = 2.0 * np.pi


@dataclass(frozen=True, eq=False)
class SinusoidParams:
    """A point in parameter space: log-frequency and phase.

    Fields are usually floats; arrays (a batch of points) and Duals are
    accepted so the same container flows through differentiated code.
    """

    log_f: float
    phi: float

    def __post_init__(self):
        if not (np.all(np.isfinite(ad.value(self.log_f))) and np.all(np.isfinite(ad.value(self.phi)))):
            raise ValueError(f"parameters must be finite, got ({self.log_f}, {self.phi})")

    def __eq__(self, other):
        if not isinstance(other, SinusoidParams):
            return NotImplemented
        return (np.array_equal(ad.value(self.log_f), ad.value(other.log_f))
                and np.array_equal(ad.value(self.phi), ad.value(other.phi)))

    def __iter__(self):
        yield self.log_f
        yield self.phi

    @property
    def f(self):
        return np.exp(ad.value(self.log_f))

    def as_array(self) -> np.ndarray:
        return np.array([ad.value(self.log_f), ad.value(self.phi)], dtype=float)


@dataclass(frozen=True)
class PriorSpec:
    """Independent Gaussian prior on (log_f, phi).

    With ``bounds`` set the prior is restricted to that box and renormalized;
    ``log_prior`` then returns the Gaussian log density minus the log box mass
    (the Gaussian expression is kept outside the box so it stays smooth).
    """

    mean: tuple[float, float] = (0.0, 0.0)
    variance: tuple[float, float] = (16.0, 16.0)
    bounds: tuple[tuple[float, float], tuple[float, float]] | None = None

    def __post_init__(self):
        if min(self.variance) <= 0:
            raise ValueError("prior variance must be positive")

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(np.asarray(self.variance, dtype=float))

    @cached_property
    def log_normalizer(self) -> float:
        """log of the Gaussian mass inside ``bounds`` (0 when unbounded)."""
        if self.bounds is None:
            return 0.0
        total = 0.0
        for (lo, hi), m, s in zip(self.bounds, self.mean, self.std):
            total += np.log(ndtr((hi - m) / s) - ndtr((lo - m) / s))
        return float(total)


@dataclass(frozen=True, eq=False)
class Dataset:
    """Observed (x, y) pairs together with the triple that generated them."""

    xs: np.ndarray
    ys: np.ndarray
    seed: int | None = None
    true_params: SinusoidParams | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        xs = np.array(self.xs, dtype=float).reshape(-1)
        ys = np.array(self.ys, dtype=float).reshape(-1)
        if xs.shape != ys.shape:
            raise ValueError("xs and ys differ in length")
        if np.any((xs < 0) | (xs > 1)):
            raise ValueError("x values must lie in [0, 1]")
        xs.setflags(write=False)
        ys.setflags(write=False)
        object.__setattr__(self, "xs", xs)
        object.__setattr__(self, "ys", ys)

    @property
    def n(self) -> int:
        return len(self.xs)

    @property
    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.xs.tolist(), self.ys.tolist()))

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (np.array_equal(self.xs, other.xs) and np.array_equal(self.ys, other.ys)
                and self.seed == other.seed and self.true_params == other.true_params)

    @classmethod
    def empty(cls) -> Dataset:
        return cls(np.empty(0), np.empty(0))


def mean_function(x, params: SinusoidParams):
    """sin(2*pi*exp(log_f)*x + phi); accepts floats, arrays or Duals."""
    return ad.sin(TWO_PI * ad.exp(params.log_f) * x + params.phi)


def log_likelihood_point(y, x, params: SinusoidParams):
    r = y - mean_function(x, params)
    return -0.5 * r * r - HALF_LOG_2PI


def log_likelihood(dataset: Dataset, params: SinusoidParams):
    """log p(D | theta).

    Parameters may carry a batch shape; the data axis is appended last and
    summed out, so the result has the parameters' shape.
    """
    if dataset.n == 0:
        return 0.0 * params.log_f + 0.0 * params.phi
    expanded = SinusoidParams(_expand(params.log_f), _expand(params.phi))
    return log_likelihood_point(dataset.ys, dataset.xs, expanded).sum(axis=-1)


def _expand(v):
    if isinstance(v, ad.Dual):
        return v.reshape(v.shape + (1,))
    return np.asarray(v, dtype=float)[..., None]


def log_prior(params: SinusoidParams, prior: PriorSpec = PriorSpec()):
    m0, m1 = prior.mean
    v0, v1 = prior.variance
    d0 = params.log_f - m0
    d1 = params.phi - m1
    return (-0.5 * d0 * d0 / v0 - 0.5 * d1 * d1 / v1
            - 0.5 * np.log(TWO_PI * v0) - 0.5 * np.log(TWO_PI * v1) - prior.log_normalizer)


def log_joint(dataset: Dataset, params: SinusoidParams, prior: PriorSpec = PriorSpec()):
    return log_likelihood(dataset, params) + log_prior(params, prior)


def generate_dataset(seed: int, n: int = 8, true_params: SinusoidParams = SinusoidParams(0.0, 1.0)) -> Dataset:
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    xs = rng.uniform(0.0, 1.0, size=n)
    ys = mean_function(xs, true_params) + rng.standard_normal(n)
    return Dataset(xs, ys, seed=int(seed), true_params=true_params)
