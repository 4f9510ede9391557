"""Bridge contracts: endpoint pinning, drifts, objective, reverse variants."""

import jax
import jax.numpy as jnp
import numpy as np
import pytest

import flowdiff as fd
from flowdiff.bridge import (
    BridgeModel,
    bridge_backward_sde_drift,
    bridge_conditional_drift,
    bridge_conditional_score,
    bridge_forward_sde_drift,
    bridge_generative_drift,
    bridge_inverse,
    bridge_loss_integrand,
    bridge_time_derivative,
    bridge_total_loss,
    bridge_transform,
    make_bridge_parameterization,
    make_bridge_predictor,
    predict_endpoints,
    sample_bridge_prior,
)
from flowdiff.errors import ConfigError
from flowdiff.nets import NetConfig
from flowdiff.objectives import RestrictionConfig

import handcalc as hc


def _col(*vals):
    return np.asarray(vals, dtype=float).reshape(-1, 1)


def linear_bp(dim=1, sbar=1.0):
    return make_bridge_parameterization(
        dim, NetConfig(kind="constant", mean_value=0.0, scale_value=sbar)
    )


def random_bridge_model(dim=2, seed=50, conditioned=False, g=1.0):
    bp = make_bridge_parameterization(dim, NetConfig(hidden=(32, 32), time_freqs=4), seed=seed)
    vol = fd.make_volatility(constant=g)
    pred = make_bridge_predictor(dim, hidden=(32, 32), seed=seed + 1, conditioned=conditioned)
    return BridgeModel(bp=bp, vol=vol, predictor=pred, conditioned=conditioned)


class TestBridgeTransform:
    def test_endpoint_pinning_for_random_weights(self, rng):
        bp = make_bridge_parameterization(2, NetConfig(hidden=(16, 16)), seed=51)
        x0, x1 = rng.normal(size=(5, 2)), rng.normal(size=(5, 2))
        eps = rng.normal(size=(5, 2))
        z0 = np.asarray(bridge_transform(bp, eps, 0.0, x0, x1).values)
        np.testing.assert_allclose(z0, x0 + bp.delta * eps, atol=1e-14)
        z1 = np.asarray(bridge_transform(bp, eps, 1.0, x0, x1).values)
        np.testing.assert_allclose(z1, x1 + bp.delta * eps, atol=1e-14)

    def test_hand_value(self):
        st = bridge_transform(linear_bp(), _col(1.0), 0.5, _col(0.0), _col(2.0))
        np.testing.assert_allclose(float(st.values[0, 0]), hc.FROZEN["bridge_mid"], rtol=1e-6)

    def test_round_trip(self, rng):
        bp = make_bridge_parameterization(2, NetConfig(hidden=(16, 16)), seed=52)
        x0, x1 = rng.normal(size=(64, 2)), rng.normal(size=(64, 2))
        eps = rng.normal(size=(64, 2))
        t = rng.uniform(0, 1, size=64)
        st = bridge_transform(bp, eps, t, x0, x1)
        np.testing.assert_allclose(np.asarray(bridge_inverse(bp, st, x0, x1)), eps,
                                   rtol=1e-5, atol=1e-9)


class TestBridgeDrifts:
    def test_linear_bridge_closed_form(self, rng):
        for sbar in (1.0, 2.0):
            bp = linear_bp(sbar=sbar)
            eps, x0, x1 = _col(0.7), _col(-1.0), _col(2.0)
            for t in (0.2, 0.5, 0.8):
                v = np.asarray(bridge_time_derivative(bp, eps, t, x0, x1))
                expect = hc.bridge_drift(eps, t, x0, x1, sbar=sbar)
                np.testing.assert_allclose(v, expect, rtol=1e-9)

    def test_matches_finite_differences(self, rng):
        bp = make_bridge_parameterization(2, NetConfig(hidden=(16, 16)), seed=53)
        n, h = 64, 1e-4
        eps = rng.normal(size=(n, 2))
        x0, x1 = rng.normal(size=(n, 2)), rng.normal(size=(n, 2))
        t = rng.uniform(0.05, 0.95, size=n)
        v = np.asarray(bridge_time_derivative(bp, eps, t, x0, x1))
        zp = np.asarray(bridge_transform(bp, eps, t + h, x0, x1).values)
        zm = np.asarray(bridge_transform(bp, eps, t - h, x0, x1).values)
        np.testing.assert_allclose(v, (zp - zm) / (2 * h), rtol=1e-4, atol=1e-7)

    def test_zero_volatility_collapses_to_conditional_drift(self, rng):
        bp = make_bridge_parameterization(2, NetConfig(hidden=(16, 16)), seed=54)
        zero = fd.make_volatility(constant=0.0)
        x0, x1 = rng.normal(size=(4, 2)), rng.normal(size=(4, 2))
        st = bridge_transform(bp, rng.normal(size=(4, 2)), 0.5, x0, x1)
        f = np.asarray(bridge_conditional_drift(bp, st, x0, x1))
        np.testing.assert_allclose(np.asarray(bridge_backward_sde_drift(bp, zero, st, x0, x1)), f)
        np.testing.assert_allclose(np.asarray(bridge_forward_sde_drift(bp, zero, st, x0, x1)), f)

    def test_gaussian_score_closed_form(self, rng):
        bp = linear_bp(dim=1, sbar=1.0)
        eps, x0, x1, t = _col(0.8), _col(0.0), _col(2.0), 0.5
        st = bridge_transform(bp, eps, t, x0, x1)
        s = np.asarray(bridge_conditional_score(bp, st, x0, x1))
        sigma = hc.bridge_sigma(t)
        np.testing.assert_allclose(s, -eps / sigma, rtol=1e-9)


class TestBridgeReverse:
    def test_oracle_endpoints_match_backward_drift(self, rng):
        model = random_bridge_model()
        x0, x1 = rng.normal(size=(5, 2)), rng.normal(size=(5, 2))
        st = bridge_transform(model.bp, rng.normal(size=(5, 2)), 0.4, x0, x1)
        fb = np.asarray(bridge_backward_sde_drift(model.bp, model.vol, st, x0, x1))
        x0j, x1j = jnp.asarray(x0), jnp.asarray(x1)
        for i in range(5):
            oracle = lambda z, t, i=i: (x0j[i], x1j[i])
            out = np.asarray(
                bridge_generative_drift(model, np.asarray(st.values)[i : i + 1], 0.4,
                                        predict_fn=oracle)
            )[0]
            np.testing.assert_allclose(out, fb[i], rtol=1e-12)

    def test_gamma_zero_is_deterministic_ode_drift(self, rng):
        model = random_bridge_model()
        x0, x1 = rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
        st = bridge_transform(model.bp, rng.normal(size=(3, 2)), 0.6, x0, x1)
        f = np.asarray(bridge_conditional_drift(model.bp, st, x0, x1))
        x0j, x1j = jnp.asarray(x0), jnp.asarray(x1)
        for i in range(3):
            oracle = lambda z, t, i=i: (x0j[i], x1j[i])
            out = np.asarray(
                bridge_generative_drift(model, np.asarray(st.values)[i : i + 1], 0.6,
                                        g_scale=0.0, predict_fn=oracle)
            )[0]
            np.testing.assert_allclose(out, f[i], rtol=1e-12)

    def test_joint_predictor_shapes(self, rng):
        model = random_bridge_model()
        x0h, x1h = predict_endpoints(model, rng.normal(size=(6, 2)), 0.3)
        assert np.asarray(x0h).shape == (6, 2) and np.asarray(x1h).shape == (6, 2)
        assert np.all(np.isfinite(np.asarray(x0h)))

    def test_conditioned_variant_passes_x1_through(self, rng):
        model = random_bridge_model(conditioned=True)
        z = rng.normal(size=(4, 2))
        x1 = rng.normal(size=(4, 2))
        x0h, x1h = predict_endpoints(model, z, 0.3, x1=x1)
        np.testing.assert_array_equal(np.asarray(x1h), x1)
        with pytest.raises(ConfigError):
            predict_endpoints(model, z, 0.3)

    def test_bridge_prior_sampling(self, rng):
        model = random_bridge_model()
        x1 = rng.normal(size=(2000, 2))
        st = sample_bridge_prior(model, x1, seed=3)
        dev = np.asarray(st.values) - x1
        assert abs(float(np.std(dev)) - model.bp.delta) < 0.05 * model.bp.delta
        a = np.asarray(sample_bridge_prior(model, x1, seed=3).values)
        np.testing.assert_array_equal(a, np.asarray(st.values))


class TestBridgeObjective:
    def test_oracle_predictor_gives_zero(self, rng):
        model = random_bridge_model()
        x0, x1 = jnp.asarray(rng.normal(size=(4, 2))), jnp.asarray(rng.normal(size=(4, 2)))
        eps = rng.normal(size=(4, 2))
        for i in range(4):
            oracle = lambda z, t, i=i: (x0[i], x1[i])
            v = bridge_loss_integrand(
                model, x0[i : i + 1], x1[i : i + 1], eps[i : i + 1], 0.5, predict_fn=oracle
            )
            assert float(v[0]) == 0.0

    def test_decomposition_identity(self, rng):
        # same algebra as the unconditional objective: the integrand equals
        # || df + (g^2/2) ds ||^2 / (2 g^2) built from drift/score differences.
        model = random_bridge_model(g=0.7)
        n = 200
        x0, x1 = rng.normal(size=(n, 2)), rng.normal(size=(n, 2))
        eps = rng.normal(size=(n, 2))
        t = rng.uniform(1e-3, 1 - 1e-3, size=n)
        direct = np.asarray(bridge_loss_integrand(model, x0, x1, eps, t))
        st = bridge_transform(model.bp, eps, t, x0, x1)
        x0h, x1h = predict_endpoints(model, st.values, t)
        f_true = np.asarray(bridge_conditional_drift(model.bp, st, x0, x1))
        f_hat = np.asarray(bridge_conditional_drift(model.bp, st, x0h, x1h))
        s_true = np.asarray(bridge_conditional_score(model.bp, st, x0, x1))
        s_hat = np.asarray(bridge_conditional_score(model.bp, st, x0h, x1h))
        g = 0.7
        combined = np.sum(((f_true - f_hat) + 0.5 * g**2 * (s_hat - s_true)) ** 2, axis=1)
        combined /= 2 * g**2
        np.testing.assert_allclose(direct, combined, rtol=1e-6)

    def test_prior_term_constant_with_zero_gradient(self, rng):
        model = random_bridge_model()
        x0, x1 = jnp.asarray(rng.normal(size=(8, 2))), jnp.asarray(rng.normal(size=(8, 2)))
        terms = bridge_total_loss(model, x0, x1, RestrictionConfig(), seed=1)
        assert float(terms.l_prior) == 0.0

        from flowdiff.bridge import _bridge_prior_kl1

        def prior(params):
            m = BridgeModel(bp=model.bp.with_params(params), vol=model.vol,
                            predictor=model.predictor)
            return jnp.mean(jax.vmap(lambda a, b: _bridge_prior_kl1(m, a, b))(x0, x1))

        grads = jax.tree_util.tree_leaves(jax.grad(prior)(model.bp.params))
        assert all(np.all(np.asarray(g) == 0.0) for g in grads)

    def test_deterministic_under_seed(self, rng):
        model = random_bridge_model()
        x0, x1 = rng.normal(size=(8, 2)), rng.normal(size=(8, 2))
        a = bridge_total_loss(model, x0, x1, RestrictionConfig(), seed=5)
        b = bridge_total_loss(model, x0, x1, RestrictionConfig(), seed=5)
        assert a == b

    def test_shape_validation(self, rng):
        model = random_bridge_model()
        with pytest.raises(ConfigError):
            bridge_total_loss(model, np.zeros((4, 2)), np.zeros((3, 2)),
                              RestrictionConfig(), seed=0)
