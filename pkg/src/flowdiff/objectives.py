"""Training losses.

The diffusion term matches the generative drift to the conditional backward
drift of the forward process, weighted by 1/(2 g^2); gradients flow through
both the predictor and the forward parameterization. Restricted training adds
a trajectory-curvature penalty (squared total time derivative of the
deterministic generative drift) and/or a truncated mixture-density obstacle
penalty. A discretized bound (per-step Gaussian KLs along the simulated
conditional chain) is provided as a numerical oracle for the continuous
objective.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import jax
import jax.numpy as jnp
import numpy as np

from .errors import ConfigError, NumericError
from .forward import (
    _broadcast_t,
    _drift1,
    _logq1,
    _mean_scale1,
    _score1,
    _transform1,
    _vol1,
)
from .reverse import GenerativeModel, _generative_drift1, reconstruction_logpdf


class LossTerms(NamedTuple):
    """Decomposed objective; total = l_rec + l_diff + l_prior + lam*l_crv + lam_obs*l_obs."""

    l_rec: float
    l_diff: float
    l_prior: float
    l_crv: float
    l_obs: float
    total: float
    lam: float
    lam_obs: float


class DiscreteBound(NamedTuple):
    """Parts of the discretized variational bound (nats)."""

    diffusion: float
    reconstruction: float
    prior: float
    total: float


@dataclass(frozen=True)
class ObstacleField:
    """Gaussian-mixture obstacle; the penalty is the density, truncated to 0
    wherever it falls below tau."""

    centers: jnp.ndarray  # (k, D)
    scales: jnp.ndarray   # (k,)
    weights: jnp.ndarray  # (k,)
    tau: float


jax.tree_util.register_dataclass(
    ObstacleField, data_fields=["centers", "scales", "weights"], meta_fields=["tau"]
)


@dataclass(frozen=True)
class RestrictionConfig:
    """Which penalty terms are active and with what weights."""

    name: str = "none"  # none | ot | obstacle
    lam: float = 1e-2
    lam_obs: float = 1.0
    obstacle: ObstacleField | None = None
    t_min: float = 1e-5
    stratified: bool = False

    def __post_init__(self):
        if self.name not in ("none", "ot", "obstacle"):
            raise ConfigError(f"unknown restriction: {self.name!r}")
        if self.lam < 0:
            raise ConfigError("curvature weight must be >= 0")
        if self.name == "obstacle" and self.obstacle is None:
            raise ConfigError("obstacle restriction requires an obstacle field")


def make_obstacle_field(centers, scales, weights=None, tau: float = 0.05) -> ObstacleField:
    centers = jnp.atleast_2d(jnp.asarray(centers, dtype=jnp.float64))
    scales = jnp.atleast_1d(jnp.asarray(scales, dtype=jnp.float64))
    if weights is None:
        weights = jnp.full((centers.shape[0],), 1.0 / centers.shape[0])
    weights = jnp.asarray(weights, dtype=jnp.float64)
    weights = weights / jnp.sum(weights)
    if not tau > 0:
        raise ConfigError("truncation threshold tau must be positive")
    if not bool(jnp.all(scales > 0)):
        raise ConfigError("obstacle scales must be positive")
    return ObstacleField(centers=centers, scales=scales, weights=weights, tau=float(tau))


# ---------------------------------------------------------------------------
# single-sample integrands

def _backward1(model: GenerativeModel, z, t, cond):
    g = _vol1(model.vol, t)
    return _drift1(model.fp, z, t, cond) - 0.5 * g**2 * _score1(model.fp, z, t, cond)


def _integrand1(model, x, eps, t, predict_fn):
    z = _transform1(model.fp, eps, t, x)
    g = _vol1(model.vol, t)
    fb = _backward1(model, z, t, x)
    fhat = _generative_drift1(model, z, t, 1.0, predict_fn)
    return jnp.sum((fb - fhat) ** 2) / (2.0 * g**2)


def _decomposition1(model, x, eps, t, predict_fn):
    from .reverse import _predict1

    z = _transform1(model.fp, eps, t, x)
    g = _vol1(model.vol, t)
    xhat = predict_fn(z, t) if predict_fn is not None else _predict1(model.predictor, z, t)
    df = _drift1(model.fp, z, t, x) - _drift1(model.fp, z, t, xhat)
    ds = _score1(model.fp, z, t, xhat) - _score1(model.fp, z, t, x)
    fm = jnp.sum(df**2) / (2.0 * g**2)
    sm = (g**2 / 8.0) * jnp.sum(ds**2)
    combined = jnp.sum((df + 0.5 * g**2 * ds) ** 2) / (2.0 * g**2)
    return fm, sm, combined


def _curvature1(model, z, t, predict_fn):
    def drift(zz, tt):
        return _generative_drift1(model, zz, tt, 0.0, predict_fn)

    v = drift(z, t)
    _, dv = jax.jvp(drift, (z, t), (v, jnp.ones_like(t)))
    return jnp.sum(dv**2)


def _mixture_logpdf1(f: ObstacleField, z):
    d = z.shape[0]
    sq = jnp.sum((z[None, :] - f.centers) ** 2, axis=1)
    logs = (
        jnp.log(f.weights)
        - 0.5 * sq / f.scales**2
        - 0.5 * d * jnp.log(2.0 * math.pi * f.scales**2)
    )
    return jax.scipy.special.logsumexp(logs)


def _obstacle1(f: ObstacleField, z):
    p = jnp.exp(_mixture_logpdf1(f, z))
    return jnp.where(p >= f.tau, p, 0.0)


# ---------------------------------------------------------------------------
# batched operations

def diffusion_loss_integrand(model, x, eps, t, *, predict_fn=None):
    """Per-sample value of the continuous objective's integrand."""
    x, eps = jnp.asarray(x), jnp.asarray(eps)
    tb = _broadcast_t(t, x.shape[0])
    return jax.vmap(lambda xx, ee, tt: _integrand1(model, xx, ee, tt, predict_fn))(x, eps, tb)


def loss_decomposition(model, x, eps, t, *, predict_fn=None):
    """(flow-matching term, score-matching term, combined) per sample.

    The combined value equals diffusion_loss_integrand; the two named terms
    are its small-g and large-g limits.
    """
    x, eps = jnp.asarray(x), jnp.asarray(eps)
    tb = _broadcast_t(t, x.shape[0])
    return jax.vmap(lambda xx, ee, tt: _decomposition1(model, xx, ee, tt, predict_fn))(x, eps, tb)


def reconstruction_loss(model, x, seed) -> jnp.ndarray:
    """Monte-Carlo estimate of E[-log p(x | z_0)] with z_0 ~ q(z_0|x)."""
    x = jnp.asarray(x)
    key = seed if isinstance(seed, jnp.ndarray) else jax.random.PRNGKey(seed)
    eps = jax.random.normal(key, x.shape)
    z0 = jax.vmap(lambda xx, ee: _transform1(model.fp, ee, jnp.asarray(0.0), xx))(x, eps)
    return -jnp.mean(reconstruction_logpdf(model, x, z0))


def prior_loss(model, x, key=None) -> jnp.ndarray:
    """KL(q(z_1|x) || N(0, I)): closed form for Gaussian-family kinds,
    Monte-Carlo (one draw per point) for the flow kind."""
    x = jnp.asarray(x)
    if model.fp.kind != "flow":
        def kl1(xx):
            mu, sigma = _mean_scale1(model.fp, jnp.asarray(1.0), xx)
            return jnp.sum(0.5 * (sigma**2 + mu**2 - 1.0) - jnp.log(sigma))

        return jnp.mean(jax.vmap(kl1)(x))
    if key is None:
        raise ConfigError("prior_loss for the flow kind needs a PRNG key")
    key = key if isinstance(key, jnp.ndarray) else jax.random.PRNGKey(key)
    eps = jax.random.normal(key, x.shape)

    def kl1(xx, ee):
        one = jnp.asarray(1.0)
        z1 = _transform1(model.fp, ee, one, xx)
        logq = _logq1(model.fp, z1, one, xx)
        logp = -0.5 * jnp.sum(z1**2) - 0.5 * z1.shape[0] * math.log(2.0 * math.pi)
        return logq - logp

    return jnp.mean(jax.vmap(kl1)(x, eps))


def curvature_integrand(model, z, t, *, predict_fn=None):
    """Per-sample squared total time derivative of the deterministic
    generative drift, computed as one forward-mode directional derivative
    with the (D+1)-dimensional tangent [drift; 1]."""
    z = jnp.asarray(z)
    tb = _broadcast_t(t, z.shape[0])
    return jax.vmap(lambda zz, tt: _curvature1(model, zz, tt, predict_fn))(z, tb)


def obstacle_integrand(field: ObstacleField, z):
    """Truncated mixture density per sample (exactly 0 below tau)."""
    return jax.vmap(lambda zz: _obstacle1(field, zz))(jnp.asarray(z))


def equal_cov_gaussian_kl(mean_a, mean_b, var):
    """KL between Gaussians sharing covariance var*I: ||a-b||^2 / (2 var)."""
    diff = jnp.asarray(mean_a) - jnp.asarray(mean_b)
    return jnp.sum(diff**2, axis=-1) / (2.0 * var)


def draw_times(key, n, t_min=1e-5, stratified=False):
    """Per-sample t in [t_min, 1-t_min]; optionally one draw per width-1/n bin."""
    u = jax.random.uniform(key, (n,))
    if stratified:
        u = (jnp.arange(n) + u) / n
    return t_min + (1.0 - 2.0 * t_min) * u


def make_loss_fn(restriction: RestrictionConfig):
    """Build the pure (model, x, key) -> LossTerms function for a fixed
    restriction config; jit-compatible."""
    lam = restriction.lam if restriction.name == "ot" else 0.0
    lam_obs = restriction.lam_obs if restriction.name == "obstacle" else 0.0
    obstacle = restriction.obstacle

    def loss_fn(model: GenerativeModel, x, key) -> LossTerms:
        n = x.shape[0]
        k_t, k_eps, k_rec, k_prior = jax.random.split(key, 4)
        t = draw_times(k_t, n, restriction.t_min, restriction.stratified)
        eps = jax.random.normal(k_eps, x.shape)
        z = jax.vmap(lambda xx, ee, tt: _transform1(model.fp, ee, tt, xx))(x, eps, t)
        l_diff = jnp.mean(
            jax.vmap(lambda xx, ee, tt: _integrand1(model, xx, ee, tt, None))(x, eps, t)
        )
        l_rec = reconstruction_loss(model, x, k_rec)
        l_prior = prior_loss(model, x, k_prior if model.fp.kind == "flow" else None)
        l_crv = jnp.asarray(0.0)
        if restriction.name == "ot":
            l_crv = jnp.mean(jax.vmap(lambda zz, tt: _curvature1(model, zz, tt, None))(z, t))
        l_obs = jnp.asarray(0.0)
        if restriction.name == "obstacle":
            l_obs = jnp.mean(jax.vmap(lambda zz: _obstacle1(obstacle, zz))(z))
        total = l_rec + l_diff + l_prior + lam * l_crv + lam_obs * l_obs
        return LossTerms(l_rec, l_diff, l_prior, l_crv, l_obs, total, lam, lam_obs)

    return loss_fn


def total_loss(model: GenerativeModel, batch, restriction: RestrictionConfig, seed) -> LossTerms:
    """Estimate all enabled loss terms on one batch; deterministic per seed."""
    batch = jnp.asarray(batch)
    if batch.ndim != 2 or batch.shape[0] == 0:
        raise ConfigError("batch must be a nonempty (n, D) array")
    key = seed if isinstance(seed, jnp.ndarray) else jax.random.PRNGKey(seed)
    terms = make_loss_fn(restriction)(model, batch, key)
    if not np.isfinite(float(terms.total)):
        raise NumericError(f"non-finite loss terms: {terms}")
    return terms


def discrete_elbo(
    model: GenerativeModel, x, steps: int, seed, n_paths: int = 64, *, predict_fn=None
) -> DiscreteBound:
    """Discretized variational bound, simulated along the conditional chain.

    The chain starts at z_1 ~ q(z_1|x) and follows per-step Gaussian kernels
    with mean z - dt * drift and variance dt * g^2; each step contributes the
    equal-covariance Gaussian KL between the conditional and generative
    kernels. Used as a convergence oracle for the continuous objective.
    """
    if steps < 2:
        raise ConfigError("discretization needs at least 2 steps")
    x = jnp.asarray(x)
    key = seed if isinstance(seed, jnp.ndarray) else jax.random.PRNGKey(seed)
    xrep = jnp.repeat(x, n_paths, axis=0)
    k_init, k_chain, k_rec, k_prior = jax.random.split(key, 4)
    diff, z0 = _discrete_chain(model, xrep, steps, k_init, k_chain, predict_fn)
    l_diff = jnp.mean(diff)
    l_rec = -jnp.mean(reconstruction_logpdf(model, xrep, z0))
    l_prior = prior_loss(model, x, k_prior if model.fp.kind == "flow" else None)
    total = l_diff + l_rec + l_prior
    return DiscreteBound(float(l_diff), float(l_rec), float(l_prior), float(total))


def _discrete_chain(model, xrep, steps, k_init, k_chain, predict_fn=None):
    dt = 1.0 / steps
    eps = jax.random.normal(k_init, xrep.shape)
    one = jnp.ones(())
    z1 = jax.vmap(lambda xx, ee: _transform1(model.fp, ee, one, xx))(xrep, eps)

    def step(carry, k):
        z, acc = carry
        t = k / steps
        g = _vol1(model.vol, t)
        fb = jax.vmap(lambda zz, xx: _backward1(model, zz, t, xx))(z, xrep)
        fhat = jax.vmap(lambda zz: _generative_drift1(model, zz, t, 1.0, predict_fn))(z)
        acc = acc + equal_cov_gaussian_kl(z - dt * fb, z - dt * fhat, dt * g**2)
        noise = jax.random.normal(jax.random.fold_in(k_chain, k), z.shape)
        z_next = z - dt * fb + g * jnp.sqrt(dt) * noise
        return (z_next, acc), None

    init = (z1, jnp.zeros(xrep.shape[0]))
    (z0, acc), _ = jax.lax.scan(step, init, jnp.arange(steps, 0, -1, dtype=jnp.float64))
    return acc, z0
