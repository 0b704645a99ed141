"""Dense 2-D quadrature oracle for the sinusoid posterior.

Everything here is exact for the prior restricted to the grid box: the
Gaussian prior density is divided by its mass inside the box, so an empty
dataset gives unit evidence and the posterior of no data is the (truncated)
prior.  Log densities are stored per cell centre; midpoint weights are
``exp(log_joint) * cell_area``.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from functools import cached_property

import numpy as np
from scipy.special import ive, logsumexp

from . import diff as ad
from .model import (HALF_LOG_2PI, TWO_PI, Dataset, PriorSpec, SinusoidParams,
                    log_joint as model_log_joint)


class GridError(ValueError):
    pass


@dataclass(frozen=True)
class GridSpec:
    log_f_range: tuple[float, float] = (-3.0, 4.0)
    phi_range: tuple[float, float] = (-12.0, 12.0)
    resolution: tuple[int, int] = (512, 768)

    def __post_init__(self):
        for lo, hi in (self.log_f_range, self.phi_range):
            if not lo < hi:
                raise GridError(f"invalid range ({lo}, {hi})")
        if min(self.resolution) < 16:
            raise GridError("grid resolution must be at least 16 per axis")

    @property
    def steps(self) -> tuple[float, float]:
        (a, b), (c, d) = self.log_f_range, self.phi_range
        return (b - a) / self.resolution[0], (d - c) / self.resolution[1]

    @property
    def cell_area(self) -> float:
        h0, h1 = self.steps
        return h0 * h1

    @property
    def centers(self) -> tuple[np.ndarray, np.ndarray]:
        h0, h1 = self.steps
        lf = self.log_f_range[0] + h0 * (np.arange(self.resolution[0]) + 0.5)
        ph = self.phi_range[0] + h1 * (np.arange(self.resolution[1]) + 0.5)
        return lf, ph

    def doubled(self) -> GridSpec:
        n0, n1 = self.resolution
        return replace(self, resolution=(2 * n0, 2 * n1))

    def contains(self, log_f, phi):
        (a, b), (c, d) = self.log_f_range, self.phi_range
        return (log_f >= a) & (log_f <= b) & (phi >= c) & (phi <= d)


DEFAULT_GRID = GridSpec()


def bounded_prior(prior: PriorSpec = PriorSpec(), spec: GridSpec = DEFAULT_GRID) -> PriorSpec:
    """The prior restricted to the grid box; what the oracle conditions on."""
    return replace(prior, bounds=(tuple(spec.log_f_range), tuple(spec.phi_range)))


def box_log_mass(prior: PriorSpec, spec: GridSpec) -> float:
    """log of the (unrestricted) prior probability of the grid box."""
    return bounded_prior(prior, spec).log_normalizer


def _check_support(prior: PriorSpec, spec: GridSpec):
    if prior.bounds is not None and bounded_prior(prior, spec).bounds != tuple(map(tuple, prior.bounds)):
        raise GridError("prior bounds differ from the grid box")


def _threads() -> int:
    raw = os.environ.get("VPREDICT_THREADS")
    if raw:
        return max(1, int(raw))
    return os.cpu_count() or 1


class _Trig:
    """Per-axis sines and cosines so that cell means need no transcendental calls."""

    def __init__(self, spec: GridSpec):
        lf, ph = spec.centers
        self.omega = TWO_PI * np.exp(lf)
        self.sin_phi = np.sin(ph)
        self.cos_phi = np.cos(ph)

    def means(self, x: float) -> np.ndarray:
        a = self.omega * x
        return np.sin(a)[:, None] * self.cos_phi[None, :] + np.cos(a)[:, None] * self.sin_phi[None, :]


@dataclass(frozen=True, eq=False)
class PosteriorGrid:
    spec: GridSpec
    dataset: Dataset
    prior: PriorSpec
    log_joint: np.ndarray
    log_evidence: float

    @property
    def cell_area(self) -> float:
        return self.spec.cell_area

    @cached_property
    def _trig(self) -> _Trig:
        return _Trig(self.spec)

    def cell_means(self, x: float) -> np.ndarray:
        return self._trig.means(x)

    def cell_log_likelihood(self, x: float, y: float) -> np.ndarray:
        r = y - self.cell_means(x)
        return -0.5 * r * r - HALF_LOG_2PI

    @cached_property
    def log_masses(self) -> np.ndarray:
        return self.log_joint + np.log(self.cell_area) - self.log_evidence

    @cached_property
    def masses(self) -> np.ndarray:
        return np.exp(self.log_masses)

    @cached_property
    def _cumulative(self) -> np.ndarray:
        c = np.cumsum(self.masses.ravel())
        return c / c[-1]

    def log_density(self) -> np.ndarray:
        """Normalized log posterior density at every cell centre."""
        return self.log_joint - self.log_evidence

    def node(self, i: int, j: int) -> SinusoidParams:
        lf, ph = self.spec.centers
        return SinusoidParams(float(lf[i]), float(ph[j]))

    def index_of(self, theta: SinusoidParams) -> tuple[int, int]:
        """Cell containing ``theta``."""
        (a, _), (c, _) = self.spec.log_f_range, self.spec.phi_range
        h0, h1 = self.spec.steps
        i = int(np.floor((theta.log_f - a) / h0))
        j = int(np.floor((theta.phi - c) / h1))
        n0, n1 = self.spec.resolution
        if not (0 <= i < n0 and 0 <= j < n1):
            raise GridError(f"{theta} lies outside the grid")
        return i, j

    def moments(self, x: float) -> tuple[float, float]:
        """Predictive mean and standard deviation at x."""
        mu = self.cell_means(x)
        w = self.masses
        m1 = float(np.sum(w * mu))
        m2 = float(np.sum(w * mu * mu)) + 1.0
        return m1, float(np.sqrt(max(m2 - m1 * m1, 0.0)))


def _evidence(log_joint: np.ndarray, spec: GridSpec) -> float:
    if not np.any(np.isfinite(log_joint)):
        raise GridError("grid misses posterior mass")
    return float(logsumexp(log_joint) + np.log(spec.cell_area))


def from_log_joint(spec: GridSpec, log_joint: np.ndarray, dataset: Dataset = None,
                   prior: PriorSpec = PriorSpec()) -> PosteriorGrid:
    log_joint = np.asarray(log_joint, dtype=float)
    if log_joint.shape != tuple(spec.resolution):
        raise GridError("log_joint shape does not match the grid resolution")
    return PosteriorGrid(spec, dataset if dataset is not None else Dataset.empty(), prior,
                         log_joint, _evidence(log_joint, spec))


def build_grid(dataset: Dataset, prior: PriorSpec = PriorSpec(), spec: GridSpec = DEFAULT_GRID) -> PosteriorGrid:
    """Evaluate log p(D|theta) + log p(theta) at every cell centre.

    The prior is conditioned on the grid box whether or not ``prior.bounds``
    is set; if it is set it must equal the box.
    """
    _check_support(prior, spec)
    lf, ph = spec.centers
    trig = _Trig(spec)
    sd = prior.std
    lp_f = -0.5 * ((lf - prior.mean[0]) / sd[0]) ** 2 - np.log(sd[0]) - HALF_LOG_2PI
    lp_p = -0.5 * ((ph - prior.mean[1]) / sd[1]) ** 2 - np.log(sd[1]) - HALF_LOG_2PI
    log_prior = lp_f[:, None] + lp_p[None, :] - box_log_mass(prior, spec)

    rows = np.array_split(np.arange(spec.resolution[0]), max(1, min(_threads(), 16)))

    def loglik(idx):
        out = np.zeros((len(idx), spec.resolution[1]))
        for x, y in zip(dataset.xs, dataset.ys):
            a = trig.omega[idx] * x
            mu = np.sin(a)[:, None] * trig.cos_phi[None, :] + np.cos(a)[:, None] * trig.sin_phi[None, :]
            r = y - mu
            out += -0.5 * r * r - HALF_LOG_2PI
        return out

    if len(rows) == 1:
        ll = loglik(rows[0])
    else:
        with ThreadPoolExecutor(len(rows)) as pool:
            ll = np.concatenate(list(pool.map(loglik, rows)), axis=0)
    lj = log_prior + ll
    return PosteriorGrid(spec, dataset, prior, lj, _evidence(lj, spec))


def build_converged_grid(dataset: Dataset, prior: PriorSpec = PriorSpec(), spec: GridSpec = DEFAULT_GRID,
                         tol: float = 1e-3, max_doublings: int = 2) -> tuple[PosteriorGrid, float]:
    """Build a grid whose log evidence moves by less than ``tol`` when the resolution doubles.

    Returns the accepted grid and the evidence change that accepted it.
    Raises GridError when ``max_doublings`` refinements do not converge.
    """
    grid = build_grid(dataset, prior, spec)
    for _ in range(max_doublings + 1):
        finer = build_grid(dataset, prior, grid.spec.doubled())
        delta = abs(finer.log_evidence - grid.log_evidence)
        if delta < tol:
            return grid, delta
        grid = finer
    raise GridError(f"log evidence not converged after {max_doublings} doublings (last change {delta:.3g})")


def posterior_predictive_density(grid: PosteriorGrid, x: float, y):
    """Mixture of unit-variance Gaussians weighted by posterior cell masses."""
    mu = grid.cell_means(x).ravel()
    w = grid.masses.ravel()
    ys = np.atleast_1d(np.asarray(y, dtype=float))
    out = np.array([np.dot(w, np.exp(-0.5 * (v - mu) ** 2)) for v in ys]) * np.exp(-HALF_LOG_2PI)
    return out if np.ndim(y) else float(out[0])


def log_predictive_via_evidence(grid: PosteriorGrid, x: float, y: float) -> float:
    return augmented_grid(grid, x, y).log_evidence - grid.log_evidence


_CHEB_ORDER = 48


def predictive_density_on(grid: PosteriorGrid, x: float, ys: np.ndarray) -> np.ndarray:
    """Posterior predictive at many y for one x.

    Uses exp(y*mu) = I0(y) + 2 sum_k Ik(y) Tk(mu) for |mu| <= 1, so the cell sum
    reduces to Chebyshev moments of the cell means; agrees with the direct
    mixture to rounding for |y| up to about 12.
    """
    mu = grid.cell_means(x).ravel()
    v = grid.masses.ravel() * np.exp(-0.5 * mu * mu)
    moments = np.empty(_CHEB_ORDER + 1)
    t_prev = np.ones_like(mu)
    t_cur = mu.copy()
    moments[0] = v.sum()
    moments[1] = np.dot(v, t_cur)
    for k in range(2, _CHEB_ORDER + 1):
        t_prev, t_cur = t_cur, 2.0 * mu * t_cur - t_prev
        moments[k] = np.dot(v, t_cur)
    ys = np.asarray(ys, dtype=float)
    k = np.arange(_CHEB_ORDER + 1)
    bessel = ive(k[:, None], ys[None, :])  # exp(-|y|) * I_k(y)
    coef = np.where(k == 0, 1.0, 2.0)[:, None]
    series = np.sum(coef * bessel * moments[:, None], axis=0)
    return series * np.exp(np.abs(ys) - 0.5 * ys * ys - HALF_LOG_2PI)


def augmented_grid(grid: PosteriorGrid, x: float, y: float) -> PosteriorGrid:
    """Posterior grid for the data plus one extra observation (x, y)."""
    lj = grid.log_joint + grid.cell_log_likelihood(x, y)
    data = Dataset(np.append(grid.dataset.xs, x), np.append(grid.dataset.ys, y))
    out = PosteriorGrid(grid.spec, data, grid.prior, lj, _evidence(lj, grid.spec))
    out.__dict__["_trig"] = grid._trig
    return out


def candidates_formula_residual(grid: PosteriorGrid, x: float, y: float, theta: SinusoidParams | tuple[int, int],
                                aug: PosteriorGrid | None = None) -> float:
    """log p(y|x,D) - [log p(y|x,theta) + log p(theta|D) - log p(theta|y,x,D)] at a grid node.

    ``theta`` is either a node or its (i, j) index.  The predictive on the left
    is the mixture over posterior cells.
    """
    i, j = theta if isinstance(theta, tuple) else grid.index_of(theta)
    if aug is None:
        aug = augmented_grid(grid, x, y)
    log_post = grid.log_joint[i, j] - grid.log_evidence
    log_aug = aug.log_joint[i, j] - aug.log_evidence
    if not (np.isfinite(log_post) and np.isfinite(log_aug)):
        raise GridError("theta has zero posterior mass")
    loglik = aug.log_joint[i, j] - grid.log_joint[i, j]
    log_pred = np.log(posterior_predictive_density(grid, x, y))
    return float(log_pred - (loglik + log_post - log_aug))


def sample_posterior(grid: PosteriorGrid, rng: np.random.Generator, size: int | None = None):
    """Draw from the grid posterior: categorical over cells, then uniform jitter inside the cell.

    Returns a SinusoidParams when ``size`` is None, else an array of shape (size, 2).
    """
    n = 1 if size is None else int(size)
    u = rng.random(n)
    flat = np.searchsorted(grid._cumulative, u, side="right")
    flat = np.minimum(flat, grid._cumulative.size - 1)
    i, j = np.unravel_index(flat, grid.spec.resolution)
    jitter = rng.random((n, 2))
    h0, h1 = grid.spec.steps
    lf = grid.spec.log_f_range[0] + h0 * (i + jitter[:, 0])
    ph = grid.spec.phi_range[0] + h1 * (j + jitter[:, 1])
    out = np.column_stack([lf, ph])
    if size is None:
        return SinusoidParams(float(out[0, 0]), float(out[0, 1]))
    return out


def _objective(grid: PosteriorGrid):
    prior = bounded_prior(grid.prior, grid.spec)

    def f(v):
        return model_log_joint(grid.dataset, SinusoidParams(v[0], v[1]), prior)
    return f


def exact_map(grid: PosteriorGrid, steps: int = 50) -> SinusoidParams:
    """Best cell centre, refined by damped Newton ascent on the log joint."""
    i, j = np.unravel_index(np.argmax(grid.log_joint), grid.log_joint.shape)
    lf, ph = grid.spec.centers
    theta = np.array([lf[i], ph[j]])
    f = _objective(grid)
    theta = newton_ascent(f, theta, steps)
    return SinusoidParams(float(theta[0]), float(theta[1]))


def newton_ascent(f, theta: np.ndarray, steps: int, tol: float = 1e-13) -> np.ndarray:
    """Maximize ``f`` from ``theta`` with Newton steps, falling back to gradient steps.

    Every accepted step increases the objective.
    """
    theta = np.asarray(theta, dtype=float)
    current = float(f(list(theta)))
    for _ in range(steps):
        g = np.asarray(ad.gradient(f, list(theta)), dtype=float)
        if np.linalg.norm(g) < tol:
            break
        h = np.asarray(ad.hessian(f, list(theta)), dtype=float)
        direction = g / max(np.abs(g).max(), 1.0)
        if np.all(np.linalg.eigvalsh(h) < 0):
            direction = -np.linalg.solve(h, g)
        t = 1.0
        while t > 1e-12:
            cand = theta + t * direction
            val = float(f(list(cand)))
            if val >= current:
                theta, current = cand, val
                break
            t *= 0.5
        else:
            break
    return theta
