from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vpredict import diff as ad
from vpredict.evaluate import loss_draws
from vpredict.exact import exact_map
from vpredict.methods import (FitResult, OptimizerState, optimizer_step, PredictiveParams, TrainConfig, TrainingError, VpNoise,
                              VpState, elbo, mfvi_predictive_density, step_noise, teacher_samples, train_bayesdark,
                              train_map, train_mfvi, train_uncond_vp, train_vp, vp_loss, vp_terms)
from vpredict.model import Dataset, SinusoidParams, log_likelihood_point
from vpredict.variational import AugmentedPosteriorConfig, MeanFieldGaussian, gaussian_kl_to_prior

SHORT = TrainConfig(steps=60, seed=3)


class TestTrainConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.steps, cfg.learning_rate, cfg.mc_draws_per_step, cfg.gh_order) == (5000, 0.01, 8, 7)
        assert (cfg.b1, cfg.b2, cfg.epsilon) == (0.9, 0.999, 1e-8)

    @pytest.mark.parametrize("field,value", [("steps", 0), ("learning_rate", 0.0), ("mc_draws_per_step", 0),
                                             ("gh_order", 2), ("average_fraction", 1.0)])
    def test_rejects(self, field, value):
        with pytest.raises(ValueError):
            TrainConfig(**{field: value})


class TestAdam:
    def test_zero_gradient_leaves_params(self):
        cfg = TrainConfig()
        state, p = optimizer_step_n(np.array([1.0, -2.0]), lambda p: np.zeros(2), 5, cfg)
        np.testing.assert_array_equal(p, [1.0, -2.0])

    def test_constant_gradient_step_tends_to_learning_rate(self):
        cfg = TrainConfig(learning_rate=0.01)
        g = np.array([3.0, -0.2])
        _, before = optimizer_step_n(np.zeros(2), lambda p: g, 999, cfg)
        _, after = optimizer_step_n(before, lambda p: g, 1, cfg, start=999)
        np.testing.assert_allclose(np.abs(after - before), [0.01, 0.01], rtol=1e-5)

    def test_first_step_is_learning_rate(self):
        _, p = optimizer_step(OptimizerState.zeros(1), np.zeros(1), np.array([1e-3]), TrainConfig())
        assert p[0] == pytest.approx(-0.01, rel=1e-4)

    def test_non_finite_gradient_names_index(self):
        with pytest.raises(ad.NonFiniteError) as exc:
            optimizer_step(OptimizerState.zeros(3), np.zeros(3), np.array([0.0, 0.0, np.nan]), TrainConfig())
        assert exc.value.index == 2


def optimizer_step_n(params, grad_fn, n, cfg, start=0):
    state = OptimizerState.zeros(params.size)
    if start:
        # replay the constant-gradient history to rebuild the moments
        for _ in range(start):
            state, _ = optimizer_step(state, params, grad_fn(params), cfg)
    for _ in range(n):
        state, params = optimizer_step(state, params, grad_fn(params), cfg)
    return state, params


class TestMap:
    def test_empty_data_gives_prior_mode(self, prior):
        p = train_map(Dataset.empty(), prior).params
        assert abs(p.log_f_hat) < 1e-4 and abs(p.phi_hat) < 1e-4

    def test_matches_oracle(self, map_fit, fixture_grid):
        m = exact_map(fixture_grid)
        assert abs(map_fit.params.log_f_hat - m.log_f) < 1e-3
        assert abs(map_fit.params.phi_hat - m.phi) < 1e-3

    def test_fixture_value(self, map_fit):
        assert map_fit.params.log_f_hat == pytest.approx(-0.5886148153777557, abs=1e-8)
        assert map_fit.params.phi_hat == pytest.approx(2.4723290266047675, abs=1e-8)


class TestMfvi:
    def test_empty_data_gives_prior(self, prior):
        fit = train_mfvi(Dataset.empty(), prior)
        assert gaussian_kl_to_prior(fit.params, prior) < 1e-4

    def test_elbo_below_evidence_every_step(self, mfvi_fit, fixture_grid):
        worst = max(-loss for _, loss in mfvi_fit.train_curve)
        assert worst <= fixture_grid.log_evidence + 1e-3

    def test_extra_records_final_elbo(self, mfvi_fit, fixture_data, prior):
        assert mfvi_fit.extra["elbo"] == pytest.approx(float(elbo(mfvi_fit.params, fixture_data, prior)), rel=1e-12)

    def test_predictive_collapses_to_likelihood(self):
        eta = MeanFieldGaussian((0.3, 0.9), (-20.0, -20.0))
        ref = np.exp(log_likelihood_point(0.4, 0.2, SinusoidParams(0.3, 0.9)))
        assert mfvi_predictive_density(eta, 0.2, 0.4) == pytest.approx(ref, abs=1e-8)

    def test_deterministic(self, fixture_data, prior):
        a = train_mfvi(fixture_data, prior, SHORT).params.values()
        b = train_mfvi(fixture_data, prior, SHORT).params.values()
        np.testing.assert_array_equal(a, b)


class TestBayesDark:
    def test_degenerate_grid_recovers_atom(self, atom_grid):
        p = train_bayesdark(atom_grid).params
        assert abs(p.log_f_hat - 0.303125) < 2e-2
        assert abs(p.phi_hat - 0.703125) < 2e-2

    def test_teacher_is_deterministic(self, fixture_grid):
        a = teacher_samples(fixture_grid, 100, 4)
        b = teacher_samples(fixture_grid, 100, 4)
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])

    def test_phase_is_wrapped(self, bayesdark_fit):
        assert -np.pi < bayesdark_fit.params.phi_hat <= np.pi

    def test_sits_between_modes(self, bayesdark_fit, map_fit, mfvi_fit):
        # the teacher mixes both posterior modes, so the distilled point moves off the MAP towards the MFVI mode
        bd = np.array([bayesdark_fit.params.log_f_hat, bayesdark_fit.params.phi_hat])
        to_mfvi = np.linalg.norm(bd - mfvi_fit.params.values()[:2])
        to_map = np.linalg.norm(bd - [map_fit.params.log_f_hat, map_fit.params.phi_hat])
        assert to_mfvi < to_map


class TestVpLoss:
    def test_terms_named(self, vp_init, fixture_data, prior):
        t = vp_terms(vp_init, fixture_data, step_noise(0, 0, 4), prior=prior)
        assert set(t) == {"log_q_y", "log_q_x", "log_q_theta", "log_p_y", "log_p_x", "log_p_data", "log_p_theta"}

    def test_zero_step_equals_uncond(self, vp_init, fixture_data, prior):
        noise = step_noise(0, 0, 16)
        tiny = replace(vp_init, aug_cfg=AugmentedPosteriorConfig(-20.0, 0.7))
        zero = replace(vp_init, aug_cfg=AugmentedPosteriorConfig.zero_step())
        np.testing.assert_array_equal(vp_loss(tiny, fixture_data, noise, prior=prior),
                                      vp_loss(zero, fixture_data, noise, prior=prior))

    def test_gradient_matches_finite_differences(self, vp_init, fixture_data, prior):
        noise = step_noise(0, 0, 8)
        rep = ad.check_gradient(lambda v: vp_loss(VpState.from_vector(v), fixture_data, noise, prior=prior).mean(),
                                list(vp_init.values()), rtol=1e-4)
        assert rep.passed, rep.table()

    def test_bound_at_init(self, vp_init, fixture_data, fixture_grid, prior):
        draws = loss_draws(vp_init, fixture_data, 10_000, seed=1, prior=prior)
        se = draws.std(ddof=1) / np.sqrt(draws.size)
        assert draws.mean() + fixture_grid.log_evidence >= -3 * se

    def test_no_heavy_tails(self, vp_fit, fixture_data, prior):
        draws = loss_draws(vp_fit.params, fixture_data, 100_000, seed=2, prior=prior)
        assert np.all(np.abs(draws - draws.mean()) <= 50 * draws.std())

    def test_continuous_near_trained_state(self, vp_fit, fixture_data, prior):
        rng = np.random.default_rng(8)
        noise = step_noise(0, 0, 8)
        base = vp_fit.params.values()
        for _ in range(50):
            v = base + rng.uniform(-0.1, 0.1, base.size)
            assert np.all(np.isfinite(vp_loss(VpState.from_vector(v), fixture_data, noise, prior=prior)))

    def test_noise_slicing(self):
        n = VpNoise.draw(np.random.default_rng(0), 5)
        assert len(n) == 5 and n[2].eps_theta.shape == (2,)


class TestTrainVp:
    def test_deterministic(self, fixture_data, prior, vp_init):
        a = train_vp(fixture_data, prior, SHORT, vp_init)
        b = train_vp(fixture_data, prior, SHORT, vp_init)
        np.testing.assert_array_equal(a.params.values(), b.params.values())
        assert a.train_curve == b.train_curve

    def test_uncond_keeps_augmentation_frozen(self, uncond_fit):
        assert uncond_fit.params.aug_cfg == AugmentedPosteriorConfig.zero_step()
        assert uncond_fit.method == "uncondvp"

    def test_uncond_matches_capped_vp(self, fixture_data, prior, vp_init):
        capped = replace(vp_init, aug_cfg=AugmentedPosteriorConfig.zero_step())
        a = train_uncond_vp(fixture_data, prior, SHORT, vp_init)
        b = train_vp(fixture_data, prior, SHORT, capped)
        assert a.train_curve == b.train_curve
        np.testing.assert_array_equal(a.params.values(), b.params.values())

    def test_learned_augmentation(self, vp_fit):
        cfg = vp_fit.params.aug_cfg
        assert np.isfinite(cfg.step_size) and cfg.step_size > 0
        assert cfg.inverse_temperature > 1

    def test_bound_after_training(self, vp_fit, fixture_data, fixture_grid, prior):
        draws = loss_draws(vp_fit.params, fixture_data, 10_000, seed=3, prior=prior)
        se = draws.std(ddof=1) / np.sqrt(draws.size)
        assert draws.mean() + fixture_grid.log_evidence >= -3 * se

    def test_averaging_off_returns_last_iterate(self, fixture_data, prior, vp_init):
        fit = train_vp(fixture_data, prior, replace(SHORT, average_fraction=0.0), vp_init)
        assert isinstance(fit, FitResult) and fit.method == "vp"

    @pytest.mark.filterwarnings("ignore:overflow")
    def test_divergence_reports_step(self, fixture_data, prior):
        bad = VpState(PredictiveParams(0.0, 0.0), MeanFieldGaussian((0.0, 0.0), (0.0, 0.0)),
                      AugmentedPosteriorConfig(30.0, 30.0))
        with pytest.raises(TrainingError, match="at step 0"):
            train_vp(fixture_data, prior, SHORT, bad)


class TestProperties:
    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 2**31), step=st.integers(0, 10_000))
    def test_step_noise_is_pure(self, seed, step):
        a, b = step_noise(seed, step, 3), step_noise(seed, step, 3)
        np.testing.assert_array_equal(a.eps_theta, b.eps_theta)
        assert np.all((a.x >= 0) & (a.x < 1))
