"""scikit-learn style wrappers around the trainers.

Each estimator takes X of shape (n_samples, 1) with values in [0, 1] and a
target vector y.  ``predict`` returns the predictive mean, ``predict_std`` the
predictive standard deviation, and ``predictive_density(X, y)`` the density
of each target under the fitted predictive.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .evaluate import EVAL_GH_ORDER, mfvi_predictive, point_predictive
from .exact import DEFAULT_GRID, GridSpec, bounded_prior, build_converged_grid, posterior_predictive_density
from .methods import TrainConfig, train_bayesdark, train_map, train_mfvi, train_uncond_vp, train_vp
from .model import Dataset, PriorSpec, mean_function
from .variational import gh_expectation


def _inputs(X) -> np.ndarray:
    X = check_array(X, ensure_min_samples=1)
    if X.shape[1] != 1:
        raise ValueError(f"expected a single input feature, got {X.shape[1]}")
    x = X[:, 0]
    if np.any((x < 0) | (x > 1)):
        raise ValueError("inputs must lie in [0, 1]")
    return x


class _SinusoidEstimator(RegressorMixin, BaseEstimator):
    def __init__(self, steps=5000, learning_rate=0.01, mc_draws_per_step=8, gh_order=7, random_state=0,
                 grid_spec=None):
        self.steps = steps
        self.learning_rate = learning_rate
        self.mc_draws_per_step = mc_draws_per_step
        self.gh_order = gh_order
        self.random_state = random_state
        self.grid_spec = grid_spec

    def _setup(self, X, y):
        X, y = check_X_y(X, y, y_numeric=True)
        self.n_features_in_ = X.shape[1]
        self.dataset_ = Dataset(_inputs(X), y)
        spec = self.grid_spec if self.grid_spec is not None else DEFAULT_GRID
        self.prior_ = bounded_prior(PriorSpec(), spec)
        self.config_ = TrainConfig(steps=self.steps, learning_rate=self.learning_rate,
                                   mc_draws_per_step=self.mc_draws_per_step, gh_order=self.gh_order,
                                   seed=int(self.random_state or 0))
        return spec

    def fit(self, X, y):
        spec = self._setup(X, y)
        self.fit_ = self._train(spec)
        return self

    def _point(self):
        p = self.fit_.params
        return getattr(p, "predictive", p).as_params()

    def predict(self, X):
        check_is_fitted(self, "fit_")
        return mean_function(_inputs(X), self._point())

    def predict_std(self, X):
        check_is_fitted(self, "fit_")
        return np.ones(len(_inputs(X)))

    def predictive_density(self, X, y):
        check_is_fitted(self, "fit_")
        x = _inputs(X)
        density = point_predictive(self._point())
        return np.array([density(a, np.asarray([b]))[0] for a, b in zip(x, np.asarray(y, dtype=float))])


class MAPRegressor(_SinusoidEstimator):
    """Plug-in predictive at the posterior mode."""

    def _train(self, spec):
        return train_map(self.dataset_, self.prior_, self.config_)


class MFVIRegressor(_SinusoidEstimator):
    """Predictive from marginalizing a mean-field Gaussian posterior."""

    def _train(self, spec):
        return train_mfvi(self.dataset_, self.prior_, self.config_)

    def predict(self, X):
        check_is_fitted(self, "fit_")
        x = _inputs(X)[:, None]
        return gh_expectation(self.fit_.params, lambda th: mean_function(x, th), EVAL_GH_ORDER)

    def predict_std(self, X):
        check_is_fitted(self, "fit_")
        x = _inputs(X)[:, None]
        m1 = gh_expectation(self.fit_.params, lambda th: mean_function(x, th), EVAL_GH_ORDER)
        m2 = gh_expectation(self.fit_.params, lambda th: mean_function(x, th) ** 2, EVAL_GH_ORDER)
        return np.sqrt(1.0 + np.maximum(m2 - m1 * m1, 0.0))

    def predictive_density(self, X, y):
        check_is_fitted(self, "fit_")
        density = mfvi_predictive(self.fit_.params)
        return np.array([density(a, np.asarray([b]))[0] for a, b in zip(_inputs(X), np.asarray(y, dtype=float))])


class ExactBayesRegressor(_SinusoidEstimator):
    """The grid-quadrature posterior predictive."""

    def _train(self, spec: GridSpec):
        self.grid_, self.grid_delta_ = build_converged_grid(self.dataset_, self.prior_, spec)
        return self.grid_

    def predict(self, X):
        check_is_fitted(self, "fit_")
        return np.array([self.grid_.moments(x)[0] for x in _inputs(X)])

    def predict_std(self, X):
        check_is_fitted(self, "fit_")
        return np.array([self.grid_.moments(x)[1] for x in _inputs(X)])

    def predictive_density(self, X, y):
        check_is_fitted(self, "fit_")
        return np.array([posterior_predictive_density(self.grid_, a, b)
                         for a, b in zip(_inputs(X), np.asarray(y, dtype=float))])


class BayesDarkRegressor(_SinusoidEstimator):
    """Point predictive distilled from exact posterior-predictive samples."""

    def _train(self, spec):
        self.grid_, _ = build_converged_grid(self.dataset_, self.prior_, spec)
        return train_bayesdark(self.grid_, self.config_)


class VPRegressor(_SinusoidEstimator):
    """Variational prediction with the one-step conditioned augmented posterior."""

    def _train(self, spec):
        return train_vp(self.dataset_, self.prior_, self.config_)


class UncondVPRegressor(_SinusoidEstimator):
    """Variational prediction with the inner step switched off."""

    def _train(self, spec):
        return train_uncond_vp(self.dataset_, self.prior_, self.config_)
