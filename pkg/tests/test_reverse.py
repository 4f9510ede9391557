"""Generative-side contracts: predictor, generative drift, prior, reconstruction."""

import math

import jax.numpy as jnp
import numpy as np
import pytest
from scipy.integrate import quad

import flowdiff as fd
from flowdiff.errors import ConfigError
from flowdiff.reverse import (
    generative_drift,
    predict_x,
    reconstruction_logpdf,
    sample_prior,
)

import handcalc as hc


def _col(*vals):
    return np.asarray(vals, dtype=float).reshape(-1, 1)


class TestPredictX:
    def test_untrained_output_finite_and_shaped(self, small_model, rng):
        z = rng.normal(size=(7, 2))
        out = np.asarray(predict_x(small_model, z, 0.3))
        assert out.shape == (7, 2)
        assert np.all(np.isfinite(out))

    def test_oracle_injection_returns_x(self, analytic_model, rng):
        x = rng.normal(size=(4, 1))
        oracle = lambda z, t: jnp.asarray(x[0])
        f = generative_drift(analytic_model, x, 0.5, predict_fn=oracle)
        assert np.all(np.isfinite(np.asarray(f)))

    def test_shape_error(self, small_model):
        with pytest.raises(ConfigError):
            predict_x(small_model, np.zeros((3, 5)), 0.5)


class TestGenerativeDrift:
    def test_oracle_predictor_matches_backward_drift(self, small_model, rng):
        x = rng.normal(size=(6, 2))
        st = fd.transform(small_model.fp, rng.normal(size=(6, 2)), rng.uniform(0.1, 0.9, 6), x)
        fb = np.asarray(fd.backward_sde_drift(small_model.fp, small_model.vol, st, x))
        # per-sample oracle: substitute the true x for the prediction
        xj = jnp.asarray(x)
        rows = []
        for i in range(6):
            oracle = lambda z, t, i=i: xj[i]
            rows.append(
                np.asarray(
                    generative_drift(
                        small_model, np.asarray(st.values)[i : i + 1],
                        float(np.asarray(st.t)[i]), predict_fn=oracle,
                    )
                )[0]
            )
        # equal up to floating-point association between the two code paths
        np.testing.assert_allclose(np.stack(rows), fb, rtol=1e-12)

    def test_gamma_zero_is_conditional_drift(self, small_model, rng):
        x = rng.normal(size=(5, 2))
        st = fd.transform(small_model.fp, rng.normal(size=(5, 2)), 0.4, x)
        f = np.asarray(fd.conditional_drift(small_model.fp, st, x))
        xj = jnp.asarray(x)
        for i in range(5):
            oracle = lambda z, t, i=i: xj[i]
            out = np.asarray(
                generative_drift(small_model, np.asarray(st.values)[i : i + 1], 0.4,
                                 g_scale=0.0, predict_fn=oracle)
            )[0]
            np.testing.assert_allclose(out, f[i], rtol=1e-12)

    def test_hand_value_constant_prediction(self, analytic_model):
        # x_hat == 3 at z = 1.05, t = 0.5, g == 1
        oracle = lambda z, t: jnp.asarray([3.0])
        f = generative_drift(analytic_model, _col(1.05), 0.5, predict_fn=oracle)
        np.testing.assert_allclose(
            float(f[0, 0]), hc.FROZEN["generative_drift_xhat3"], rtol=1e-6
        )

    def test_affine_in_gamma_squared(self, small_model, rng):
        z = rng.normal(size=(4, 2))
        f0 = np.asarray(generative_drift(small_model, z, 0.5, g_scale=0.0))
        f1 = np.asarray(generative_drift(small_model, z, 0.5, g_scale=1.0))
        f2 = np.asarray(generative_drift(small_model, z, 0.5, g_scale=2.0))
        # slope per unit gamma^2 must agree between gamma=1 and gamma=2
        np.testing.assert_allclose(f1 - f0, (f2 - f0) / 4.0, rtol=1e-6, atol=1e-12)

    def test_negative_gamma_rejected(self, small_model):
        with pytest.raises(ConfigError):
            generative_drift(small_model, np.zeros((1, 2)), 0.5, g_scale=-1.0)


class TestSamplePrior:
    def test_clt_bound(self, small_model):
        n = 10**5
        z = np.asarray(sample_prior(small_model, n, seed=7).values)
        se = 1.0 / math.sqrt(n)
        assert np.all(np.abs(z.mean(axis=0)) < 3 * se)

    def test_deterministic(self, small_model):
        a = np.asarray(sample_prior(small_model, 32, seed=9).values)
        b = np.asarray(sample_prior(small_model, 32, seed=9).values)
        np.testing.assert_array_equal(a, b)

    def test_single_sample_shape(self, small_model):
        st = sample_prior(small_model, 1, seed=1)
        assert np.asarray(st.values).shape == (1, 2)
        assert float(st.t) == 1.0


class TestReconstructionLogpdf:
    def test_at_mean(self, analytic_model):
        v = reconstruction_logpdf(analytic_model, _col(0.7), _col(0.7))
        np.testing.assert_allclose(float(v[0]), hc.FROZEN["recon_at_mean_1d"], rtol=1e-6)

    def test_one_sigma_deviation(self, analytic_model, rng):
        d = analytic_model.recon_delta
        for dim in (1, 3):
            x = rng.normal(size=(2, dim))
            model = analytic_model
            if dim != 1:
                from conftest import analytic_fp
                from flowdiff.reverse import GenerativeModel, make_predictor

                model = GenerativeModel(
                    fp=analytic_fp(dim), vol=model.vol,
                    predictor=make_predictor(dim, hidden=(8,), seed=0),
                )
            v = np.asarray(reconstruction_logpdf(model, x, x + d))
            at_mean = np.asarray(reconstruction_logpdf(model, x, x))
            np.testing.assert_allclose(v, at_mean - dim / 2.0, rtol=1e-12)

    def test_integrates_to_one(self, analytic_model):
        z0 = 0.25
        dens = lambda x: math.exp(
            float(reconstruction_logpdf(analytic_model, _col(x), _col(z0))[0])
        )
        total, _ = quad(dens, z0 - 0.08, z0 + 0.08, limit=200)
        assert abs(total - 1.0) < 1e-3

    def test_shape_mismatch(self, analytic_model):
        with pytest.raises(ConfigError):
            reconstruction_logpdf(analytic_model, np.zeros((2, 1)), np.zeros((3, 1)))
