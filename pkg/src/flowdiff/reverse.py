"""Generative side: data predictor, generative drift, prior, reconstruction.

The reverse SDE is obtained by substituting a prediction of the data point
into the conditional backward drift of the forward process. Stochasticity is
an inference-time dial: a factor gamma rescales the volatility coherently in
both the drift's score part (by gamma^2) and the injected noise; gamma = 0
yields the deterministic generative ODE.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import jax
import jax.numpy as jnp

from .errors import ConfigError
from .forward import (
    ForwardParameterization,
    LatentState,
    VolatilitySchedule,
    _broadcast_t,
    _drift1,
    _score1,
    _vol1,
)
from .nets import MlpSpec, mlp_apply, mlp_init


@dataclass(frozen=True)
class Predictor:
    """Network mapping (z_t, t) to a prediction of the data point.

    With residual=True the net learns a correction on top of the identity,
    which is the optimal predictor in the t -> 0 limit. spec=None marks a
    constant predictor (see make_constant_predictor).
    """

    spec: MlpSpec | None
    residual: bool
    params: dict = field(default_factory=dict)


@dataclass(frozen=True)
class GenerativeModel:
    """Forward parameterization + volatility + predictor + fixed endpoints.

    The prior is the standard normal in D dimensions; the reconstruction is
    N(x; z_0, recon_delta^2 I).
    """

    fp: ForwardParameterization
    vol: VolatilitySchedule
    predictor: Predictor
    recon_delta: float = 1e-2

    @property
    def dim(self) -> int:
        return self.fp.dim


for _cls, _data, _meta in (
    (Predictor, ("params",), ("spec", "residual")),
    (GenerativeModel, ("fp", "vol", "predictor"), ("recon_delta",)),
):
    jax.tree_util.register_dataclass(_cls, data_fields=list(_data), meta_fields=list(_meta))


def make_predictor(
    dim: int,
    hidden: tuple[int, ...] = (128, 128, 128),
    residual: bool = True,
    time_freqs: int = 6,
    seed: int = 0,
    out_dim: int | None = None,
    cond_dim: int = 0,
) -> Predictor:
    """Initialize a predictor net; out_dim/cond_dim support bridge variants."""
    spec = MlpSpec(
        data_dim=dim + cond_dim,
        out_dim=out_dim or dim,
        hidden=hidden,
        time_freqs=time_freqs,
        zero_init_last=True,
    )
    params = {"net": mlp_init(jax.random.PRNGKey(seed), spec)}
    return Predictor(spec=spec, residual=residual, params=params)


def make_constant_predictor(value) -> Predictor:
    """Predictor that ignores its input and returns a fixed point (test double
    and degenerate-data baseline)."""
    const = jnp.atleast_1d(jnp.asarray(value, dtype=jnp.float64))
    return Predictor(spec=None, residual=False, params={"const": const})


def _predict1(predictor: Predictor, z, t):
    if predictor.spec is None:
        return predictor.params["const"]
    out = mlp_apply(predictor.spec, predictor.params["net"], z, t)
    if predictor.residual:
        d = z.shape[0]
        out = out + jnp.tile(z, out.shape[0] // d)
    return out


def predict_x(model: GenerativeModel, z, t) -> jnp.ndarray:
    """Batched data-point prediction x_hat(z_t, t)."""
    z = jnp.asarray(z)
    if z.ndim != 2 or z.shape[1] != model.dim:
        raise ConfigError(f"expected z of shape (n, {model.dim}), got {z.shape}")
    tb = _broadcast_t(t, z.shape[0])
    return jax.vmap(_predict1, in_axes=(None, 0, 0))(model.predictor, z, tb)


def _generative_drift1(model: GenerativeModel, z, t, g_scale, predict_fn=None):
    xhat = predict_fn(z, t) if predict_fn is not None else _predict1(model.predictor, z, t)
    f = _drift1(model.fp, z, t, xhat)
    g = g_scale * _vol1(model.vol, t)
    return f - 0.5 * g**2 * _score1(model.fp, z, t, xhat)


def generative_drift(model: GenerativeModel, z, t, g_scale: float = 1.0, *, predict_fn=None):
    """Drift of the generative SDE at stochasticity factor g_scale (gamma).

    gamma = 0 reduces to the deterministic generative ODE drift. predict_fn
    optionally replaces the learned predictor (single-sample signature),
    e.g. to substitute the true data point in tests.
    """
    if g_scale < 0:
        raise ConfigError("g_scale must be >= 0")
    z = jnp.asarray(z)
    tb = _broadcast_t(t, z.shape[0])
    fn = lambda zz, tt: _generative_drift1(model, zz, tt, g_scale, predict_fn)
    return jax.vmap(fn)(z, tb)


def sample_prior(model: GenerativeModel, n: int, seed) -> LatentState:
    """n i.i.d. draws from the standard-normal prior at t = 1."""
    if n < 0:
        raise ConfigError("n must be >= 0")
    key = seed if isinstance(seed, jnp.ndarray) else jax.random.PRNGKey(seed)
    z = jax.random.normal(key, (n, model.dim))
    return LatentState(values=z, t=jnp.ones(()))


def reconstruction_logpdf(model: GenerativeModel, x, z0) -> jnp.ndarray:
    """Per-sample log N(x; z_0, recon_delta^2 I), in nats."""
    x, z0 = jnp.asarray(x), jnp.asarray(z0)
    if x.shape != z0.shape:
        raise ConfigError(f"shape mismatch: {x.shape} vs {z0.shape}")
    var = model.recon_delta**2
    d = x.shape[-1]
    sq = jnp.sum((x - z0) ** 2, axis=-1)
    return -0.5 * (sq / var + d * math.log(2.0 * math.pi * var))
