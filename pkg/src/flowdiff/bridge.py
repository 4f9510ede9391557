"""Bridges between two data distributions.

The forward process is conditioned on both endpoints: a Gaussian family whose
mean interpolates the pair and whose scale is pinned to delta at both ends,

    mu    = (1-t) x0 + t x1 + t(1-t) * mu_net(x0, x1, t)
    sigma = delta * scale_net(x0, x1, t)^(t(1-t))

so z_0 ~ N(x0, delta^2 I) and z_1 ~ N(x1, delta^2 I) structurally. The
reverse process predicts both endpoints from (z_t, t) and substitutes them
into the conditional backward drift; alternatively (config flag) it stays
conditioned on the known x1 and predicts only the x0 endpoint, in the spirit
of guidance-style conditioning. Training minimizes the same drift-matching
objective as the unconditional model, with endpoint pairs drawn either
independently (unpaired data) or jointly.
"""

from __future__ import annotations

from dataclasses import dataclass

import jax
import jax.numpy as jnp
import numpy as np

from .errors import ConfigError
from .forward import (
    ForwardParameterization,
    LatentState,
    VolatilitySchedule,
    _BRIDGE_KIND,
    _broadcast_t,
    _drift1,
    _score1,
    _tderiv1,
    _transform1,
    _inverse1,
    _vol1,
    make_parameterization,
)
from .nets import NetConfig, mlp_apply
from .objectives import LossTerms, RestrictionConfig, _obstacle1, draw_times
from .reverse import Predictor, make_predictor, reconstruction_logpdf


@dataclass(frozen=True)
class BridgeModel:
    """Endpoint-conditioned forward process + volatility + endpoint predictor."""

    bp: ForwardParameterization
    vol: VolatilitySchedule
    predictor: Predictor
    conditioned: bool = False
    recon_delta: float = 1e-2

    @property
    def dim(self) -> int:
        return self.bp.dim


jax.tree_util.register_dataclass(
    BridgeModel,
    data_fields=["bp", "vol", "predictor"],
    meta_fields=["conditioned", "recon_delta"],
)


def make_bridge_parameterization(
    dim: int, net: NetConfig | None = None, delta: float = 1e-2, seed: int = 0
) -> ForwardParameterization:
    """Gaussian endpoint-pair parameterization (mean/scale nets over (x0, x1, t))."""
    return make_parameterization(_BRIDGE_KIND, dim, net, delta, seed=seed)


def make_bridge_predictor(
    dim: int,
    hidden: tuple[int, ...] = (128, 128, 128),
    residual: bool = True,
    time_freqs: int = 6,
    seed: int = 0,
    conditioned: bool = False,
) -> Predictor:
    if conditioned:
        return make_predictor(dim, hidden, residual, time_freqs, seed, out_dim=dim, cond_dim=dim)
    return make_predictor(dim, hidden, residual, time_freqs, seed, out_dim=2 * dim)


# ---------------------------------------------------------------------------
# forward-process operations over the endpoint pair

def _pair(x0, x1):
    return (jnp.asarray(x0), jnp.asarray(x1))


def _vmap_pair(fn):
    return jax.vmap(fn, in_axes=(0, 0, (0, 0)))


def bridge_transform(bp, eps, t, x0, x1) -> LatentState:
    """z_t = mu(x0, x1, t) + sigma(x0, x1, t) * eps."""
    eps = jnp.asarray(eps)
    tb = _broadcast_t(t, eps.shape[0])
    z = _vmap_pair(lambda ee, tt, cc: _transform1(bp, ee, tt, cc))(eps, tb, _pair(x0, x1))
    return LatentState(values=z, t=tb)


def bridge_inverse(bp, state: LatentState, x0, x1) -> jnp.ndarray:
    z = jnp.asarray(state.values)
    tb = _broadcast_t(state.t, z.shape[0])
    return _vmap_pair(lambda zz, tt, cc: _inverse1(bp, zz, tt, cc))(z, tb, _pair(x0, x1))


def bridge_time_derivative(bp, eps, t, x0, x1) -> jnp.ndarray:
    eps = jnp.asarray(eps)
    tb = _broadcast_t(t, eps.shape[0])
    return _vmap_pair(lambda ee, tt, cc: _tderiv1(bp, ee, tt, cc))(eps, tb, _pair(x0, x1))


def bridge_conditional_drift(bp, state: LatentState, x0, x1) -> jnp.ndarray:
    z = jnp.asarray(state.values)
    tb = _broadcast_t(state.t, z.shape[0])
    return _vmap_pair(lambda zz, tt, cc: _drift1(bp, zz, tt, cc))(z, tb, _pair(x0, x1))


def bridge_conditional_score(bp, state: LatentState, x0, x1) -> jnp.ndarray:
    z = jnp.asarray(state.values)
    tb = _broadcast_t(state.t, z.shape[0])
    return _vmap_pair(lambda zz, tt, cc: _score1(bp, zz, tt, cc))(z, tb, _pair(x0, x1))


def bridge_forward_sde_drift(bp, vol, state, x0, x1, g_scale: float = 1.0):
    return _bridge_sde(bp, vol, state, x0, x1, g_scale, +1.0)


def bridge_backward_sde_drift(bp, vol, state, x0, x1, g_scale: float = 1.0):
    return _bridge_sde(bp, vol, state, x0, x1, g_scale, -1.0)


def _bridge_sde(bp, vol, state, x0, x1, g_scale, sign):
    z = jnp.asarray(state.values)
    tb = _broadcast_t(state.t, z.shape[0])
    g = g_scale * jax.vmap(lambda tt: _vol1(vol, tt))(tb)
    f = bridge_conditional_drift(bp, state, x0, x1)
    s = bridge_conditional_score(bp, state, x0, x1)
    return f + sign * 0.5 * g[:, None] ** 2 * s


# ---------------------------------------------------------------------------
# reverse process

def _predict_pair1(model: BridgeModel, z, t, x1):
    """Single-sample endpoint prediction (x0_hat, x1_hat)."""
    d = model.dim
    if model.conditioned:
        out = mlp_apply(model.predictor.spec, model.predictor.params["net"],
                        jnp.concatenate([z, x1]), t)
        x0_hat = z + out if model.predictor.residual else out
        return x0_hat, x1
    out = mlp_apply(model.predictor.spec, model.predictor.params["net"], z, t)
    if model.predictor.residual:
        out = out + jnp.tile(z, 2)
    return out[:d], out[d:]


def predict_endpoints(model: BridgeModel, z, t, x1=None):
    """Batched endpoint predictions; x1 is required for the conditioned variant."""
    z = jnp.asarray(z)
    tb = _broadcast_t(t, z.shape[0])
    x1 = _required_x1(model, z, x1)
    return jax.vmap(lambda zz, tt, cc: _predict_pair1(model, zz, tt, cc))(z, tb, x1)


def _required_x1(model, z, x1):
    if model.conditioned:
        if x1 is None:
            raise ConfigError("the conditioned bridge variant needs x1 at evaluation time")
        return jnp.asarray(x1)
    return jnp.zeros_like(z) if x1 is None else jnp.asarray(x1)


def _bridge_gen_drift1(model: BridgeModel, z, t, g_scale, x1, predict_fn=None):
    pair = predict_fn(z, t) if predict_fn is not None else _predict_pair1(model, z, t, x1)
    f = _drift1(model.bp, z, t, pair)
    g = g_scale * _vol1(model.vol, t)
    return f - 0.5 * g**2 * _score1(model.bp, z, t, pair)


def bridge_generative_drift(model: BridgeModel, z, t, g_scale: float = 1.0,
                            x1=None, *, predict_fn=None):
    """Generative drift with predicted (or supplied) endpoints; gamma rescaling
    as in the unconditional model."""
    if g_scale < 0:
        raise ConfigError("g_scale must be >= 0")
    z = jnp.asarray(z)
    tb = _broadcast_t(t, z.shape[0])
    x1 = _required_x1(model, z, x1)
    fn = lambda zz, tt, cc: _bridge_gen_drift1(model, zz, tt, g_scale, cc, predict_fn)
    return jax.vmap(fn)(z, tb, x1)


def sample_bridge_prior(model: BridgeModel, x1, seed) -> LatentState:
    """z_1 ~ N(x1, delta^2 I) for a user-provided endpoint batch."""
    x1 = jnp.asarray(x1)
    key = seed if isinstance(seed, jnp.ndarray) else jax.random.PRNGKey(seed)
    z = x1 + model.bp.delta * jax.random.normal(key, x1.shape)
    return LatentState(values=z, t=jnp.ones(()))


def bridge_curvature_integrand(model: BridgeModel, z, t, x1=None, *, predict_fn=None):
    """Squared total time derivative of the deterministic bridge drift."""
    z = jnp.asarray(z)
    tb = _broadcast_t(t, z.shape[0])
    x1 = _required_x1(model, z, x1)

    def one(zz, tt, cc):
        def drift(zzz, ttt):
            return _bridge_gen_drift1(model, zzz, ttt, 0.0, cc, predict_fn)

        v = drift(zz, tt)
        _, dv = jax.jvp(drift, (zz, tt), (v, jnp.ones_like(tt)))
        return jnp.sum(dv**2)

    return jax.vmap(one)(z, tb, x1)


# ---------------------------------------------------------------------------
# objective

def _bridge_integrand1(model, x0, x1, eps, t, predict_fn=None):
    cond = (x0, x1)
    z = _transform1(model.bp, eps, t, cond)
    g = _vol1(model.vol, t)
    fb = _drift1(model.bp, z, t, cond) - 0.5 * g**2 * _score1(model.bp, z, t, cond)
    fhat = _bridge_gen_drift1(model, z, t, 1.0, x1, predict_fn)
    return jnp.sum((fb - fhat) ** 2) / (2.0 * g**2)


def bridge_loss_integrand(model: BridgeModel, x0, x1, eps, t, *, predict_fn=None):
    """Per-pair value of the bridge objective's integrand."""
    x0, x1, eps = jnp.asarray(x0), jnp.asarray(x1), jnp.asarray(eps)
    tb = _broadcast_t(t, x0.shape[0])
    fn = lambda a, b, ee, tt: _bridge_integrand1(model, a, b, ee, tt, predict_fn)
    return jax.vmap(fn)(x0, x1, eps, tb)


def _bridge_prior_kl1(model, x0, x1):
    from .forward import _mean_scale1

    mu, sigma = _mean_scale1(model.bp, jnp.asarray(1.0), (x0, x1))
    d2 = model.bp.delta**2
    return jnp.sum(
        jnp.log(model.bp.delta) - jnp.log(sigma)
        + (sigma**2 + (mu - x1) ** 2) / (2.0 * d2) - 0.5
    )


def make_bridge_loss_fn(restriction: RestrictionConfig):
    """Pure (model, x0, x1, key) -> LossTerms builder; jit-compatible."""
    lam = restriction.lam if restriction.name == "ot" else 0.0
    lam_obs = restriction.lam_obs if restriction.name == "obstacle" else 0.0
    obstacle = restriction.obstacle

    def loss_fn(model: BridgeModel, x0, x1, key) -> LossTerms:
        n = x0.shape[0]
        k_t, k_eps, k_rec = jax.random.split(key, 3)
        t = draw_times(k_t, n, restriction.t_min, restriction.stratified)
        eps = jax.random.normal(k_eps, x0.shape)
        z = jax.vmap(lambda a, b, ee, tt: _transform1(model.bp, ee, tt, (a, b)))(x0, x1, eps, t)
        l_diff = jnp.mean(
            jax.vmap(lambda a, b, ee, tt: _bridge_integrand1(model, a, b, ee, tt))(x0, x1, eps, t)
        )
        eps0 = jax.random.normal(k_rec, x0.shape)
        z0 = jax.vmap(lambda a, b, ee: _transform1(model.bp, ee, jnp.asarray(0.0), (a, b)))(
            x0, x1, eps0
        )
        l_rec = -jnp.mean(reconstruction_logpdf(model, x0, z0))
        l_prior = jnp.mean(jax.vmap(lambda a, b: _bridge_prior_kl1(model, a, b))(x0, x1))
        l_crv = jnp.asarray(0.0)
        if restriction.name == "ot":
            l_crv = jnp.mean(
                jax.vmap(lambda zz, tt, b: _curvature_bridge1(model, zz, tt, b))(z, t, x1)
            )
        l_obs = jnp.asarray(0.0)
        if restriction.name == "obstacle":
            l_obs = jnp.mean(jax.vmap(lambda zz: _obstacle1(obstacle, zz))(z))
        total = l_rec + l_diff + l_prior + lam * l_crv + lam_obs * l_obs
        return LossTerms(l_rec, l_diff, l_prior, l_crv, l_obs, total, lam, lam_obs)

    return loss_fn


def _curvature_bridge1(model, z, t, x1):
    def drift(zz, tt):
        return _bridge_gen_drift1(model, zz, tt, 0.0, x1)

    v = drift(z, t)
    _, dv = jax.jvp(drift, (z, t), (v, jnp.ones_like(t)))
    return jnp.sum(dv**2)


def bridge_total_loss(model: BridgeModel, x0_batch, x1_batch,
                      restriction: RestrictionConfig, seed) -> LossTerms:
    """Estimate all enabled bridge loss terms on one batch of endpoint pairs."""
    x0, x1 = jnp.asarray(x0_batch), jnp.asarray(x1_batch)
    if x0.shape != x1.shape or x0.ndim != 2 or x0.shape[0] == 0:
        raise ConfigError("endpoint batches must be nonempty arrays of equal shape")
    key = seed if isinstance(seed, jnp.ndarray) else jax.random.PRNGKey(seed)
    terms = make_bridge_loss_fn(restriction)(model, x0, x1, key)
    if not np.isfinite(float(terms.total)):
        from .errors import NumericError

        raise NumericError(f"non-finite loss terms: {terms}")
    return terms
