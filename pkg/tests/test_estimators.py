import numpy as np
import pytest
from sklearn.base import clone

from vpredict.estimators import (BayesDarkRegressor, ExactBayesRegressor, MAPRegressor, MFVIRegressor,
                                 UncondVPRegressor, VPRegressor)

ESTIMATORS = [MAPRegressor, MFVIRegressor, ExactBayesRegressor, BayesDarkRegressor, VPRegressor, UncondVPRegressor]


@pytest.fixture(scope="module")
def xy(fixture_data):
    return fixture_data.xs[:, None], fixture_data.ys


@pytest.fixture(scope="module", params=ESTIMATORS, ids=lambda c: c.__name__)
def fitted(request, xy):
    return request.param(steps=40).fit(*xy)


class TestContract:
    def test_shapes(self, fitted):
        X = np.linspace(0, 1, 7)[:, None]
        assert fitted.predict(X).shape == (7,)
        assert np.all(fitted.predict_std(X) >= 1.0)

    def test_density_is_positive(self, fitted, xy):
        assert np.all(fitted.predictive_density(*xy) > 0)

    def test_score_is_r2(self, fitted, xy):
        assert fitted.score(*xy) <= 1.0

    def test_clone_keeps_params(self, fitted):
        assert clone(fitted).get_params() == fitted.get_params()


class TestValidation:
    def test_inputs_outside_unit_interval(self, xy):
        with pytest.raises(ValueError):
            MAPRegressor().fit(np.array([[0.5], [1.5]]), [0.0, 1.0])

    def test_two_features(self):
        with pytest.raises(ValueError):
            MAPRegressor().fit(np.zeros((3, 2)), np.zeros(3))

    def test_unfitted(self):
        from sklearn.exceptions import NotFittedError
        with pytest.raises(NotFittedError):
            MAPRegressor().predict(np.zeros((1, 1)))


class TestAgreement:
    def test_map_matches_trainer(self, xy, map_fit):
        est = MAPRegressor().fit(*xy)
        assert est.fit_.params == map_fit.params

    def test_exact_density_integrates_to_one(self, xy):
        est = ExactBayesRegressor().fit(*xy)
        ys = np.linspace(-9, 9, 2001)
        dens = est.predictive_density(np.full((ys.size, 1), 0.4), ys)
        assert np.trapezoid(dens, ys) == pytest.approx(1.0, abs=1e-6)
