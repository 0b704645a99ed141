"""Invariant suites behind ``vpredict verify``: Candidate's formula, bounds and gradients."""

from __future__ import annotations

import numpy as np

from . import diff as ad
from .evaluate import BoundCheck, bound_decomposition_check, evidence_bound_check, grid_prior
from .exact import PosteriorGrid, augmented_grid, candidates_formula_residual
from .methods import (FitResult, TrainConfig, VpState, elbo, initial_vp_state, step_noise, train_vp,
                      vp_loss)
from .model import Dataset, PriorSpec, SinusoidParams
from .variational import AugmentedPosteriorConfig, MeanFieldGaussian, inner_objective, log_q_density, maml_update

SUITES = ("candidates", "bounds", "gradients")
CANDIDATE_TOL = 1e-9
GRADIENT_RTOL = 1e-4


def candidates_suite(grid: PosteriorGrid, n: int = 64, seed: int = 0, tol: float = CANDIDATE_TOL) -> list[BoundCheck]:
    """Residual of the Candidate's formula at ``n`` random (x, y, node) triples.

    Nodes are drawn from the posterior so every one has non-negligible mass.
    """
    rng = np.random.default_rng([seed, 64])
    flat = rng.choice(grid.masses.size, size=n, p=grid.masses.ravel() / grid.masses.sum())
    rows, cols = np.unravel_index(flat, grid.spec.resolution)
    worst = 0.0
    for i, j in zip(rows, cols):
        x = float(rng.random())
        y = float(rng.normal(0.0, 1.5))
        r = candidates_formula_residual(grid, x, y, (int(i), int(j)), augmented_grid(grid, x, y))
        worst = max(worst, abs(r))
    return [BoundCheck(f"candidate's formula, max |residual| over {n} triples", worst, tol, 0.0, bool(worst < tol))]


def _grad_row(name: str, f, at, rtol: float = GRADIENT_RTOL) -> BoundCheck:
    rep = ad.check_gradient(f, at, rtol=rtol)
    return BoundCheck(f"gradient: {name}", rep.max_rel_error, rtol, 0.0, rep.passed)


def gradients_suite(dataset: Dataset, prior: PriorSpec, state: VpState | None = None, seed: int = 0,
                    rtol: float = GRADIENT_RTOL) -> list[BoundCheck]:
    """Finite-difference checks across diff, variational and methods."""
    if state is None:
        state = initial_vp_state(dataset, prior, TrainConfig(seed=seed))
    rng = np.random.default_rng([seed, 4])
    rows = []

    def elementary(v):
        a, b, c = v
        return ad.tanh(a * b) + ad.softplus(c) * ad.cos(a) + ad.sqrt(ad.exp(b) + c * c) - ad.log(1.0 + a * a) * ad.sin(c)
    rows.append(_grad_row("elementary composition", elementary, rng.normal(size=3).tolist(), rtol))

    def mixed(v):
        x = v[0]
        return ad.gradient(lambda w: x * x * w[0] ** 3, [1.0])[0]
    rows.append(_grad_row("nested mixed partial", mixed, [2.0], rtol))

    x, y = 0.37, 0.8
    theta = SinusoidParams(float(ad.value(state.eta.mu[0])) + 0.05, float(ad.value(state.eta.mu[1])) - 0.1)
    eta_cfg = [*state.eta.values(), float(np.log(0.05)), float(np.log(3.0))]

    def through_update(v):
        cfg = AugmentedPosteriorConfig(v[4], v[5])
        return log_q_density(maml_update(MeanFieldGaussian.from_vector(v[:4]), x, y, cfg, prior=prior), theta)
    rows.append(_grad_row("log q(theta) through the inner update (second order)", through_update, eta_cfg, rtol))

    def inner(v):
        return inner_objective(MeanFieldGaussian.from_vector(v[:4]), x, y, AugmentedPosteriorConfig(v[4], v[5]),
                               prior=prior)
    rows.append(_grad_row("inner objective", inner, eta_cfg, rtol))

    # a trained eta is stationary for the ELBO, where relative finite-difference error is meaningless
    off_optimum = state.eta.values() + np.array([0.05, -0.1, 0.2, 0.1])
    rows.append(_grad_row("MFVI ELBO", lambda v: elbo(MeanFieldGaussian.from_vector(v), dataset, prior),
                          off_optimum.tolist(), rtol))

    noise = step_noise(seed, 0, 8)
    rows.append(_grad_row("VP loss over every state scalar",
                          lambda v: vp_loss(VpState.from_vector(v), dataset, noise, prior=prior).mean(),
                          state.values().tolist(), rtol))
    return rows


def bounds_suite(dataset: Dataset, grid: PosteriorGrid, trained: VpState | None = None,
                 initial: VpState | None = None, n_bound: int = 10000, n_mc: int = 2000,
                 seed: int = 0, cfg: TrainConfig | None = None) -> list[BoundCheck]:
    """Evidence bound at initialization and after training, then the KL decomposition."""
    prior = grid_prior(grid)
    cfg = cfg or TrainConfig(seed=seed)
    if initial is None:
        initial = initial_vp_state(dataset, prior, cfg)
    if trained is None:
        trained = train_vp(dataset, prior, cfg, initial).params
    checks = [evidence_bound_check(initial, dataset, grid, n_bound, seed, name="evidence bound at initialization"),
              evidence_bound_check(trained, dataset, grid, n_bound, seed, name="evidence bound after training")]
    checks.extend(bound_decomposition_check(trained, dataset, grid, n_mc, seed))
    return checks


def vp_state_of(fit: FitResult | VpState) -> VpState:
    return fit.params if isinstance(fit, FitResult) else fit
