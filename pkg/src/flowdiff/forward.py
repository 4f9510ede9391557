"""Learnable forward process.

A parameterization maps base noise to a latent at time t, conditional on the
data point: z_t = transform(eps, t, x). Everything else is derived from that
map: the inverse, the conditional ODE drift (the time derivative of the
transform at fixed noise), the conditional score, and the pair of conditional
SDE drifts that share the transform's marginals for any volatility schedule.

Four kinds are supported:

  gaussian          z = mu(x,t) + sigma(x,t) * eps with
                    mu = (1-t) x + t(1-t) mu_net(x,t) and
                    log sigma = (1-t) log(delta) + t(1-t) log(sigma_net(x,t));
                    the boundary laws N(x, delta^2 I) at t=0 and N(0, I) at
                    t=1 hold structurally, for any network weights.
  flow              z = (1-t) x + (delta + (1-delta) t) * C(eps, t, (1-t) x)
                    with C an affine coupling stack; non-Gaussian marginals
                    with exact log-densities. At t=1 the output is
                    x-independent because the conditioning input vanishes.
  fixed_vp          z = alpha(t) x + sigma(t) eps with a frozen scalar
                    schedule (cosine, log-SNR-linear, or straight-line).
  learnable_scalar  same linear form with a learnable scalar log-SNR curve
                    (boundaries pinned, interior free).

The bridge variant (conditioning on an endpoint pair) reuses this module's
machinery through the internal kind "bridge_gaussian"; see bridge.py.

Time derivatives are computed as a forward-mode directional derivative with a
unit time tangent, so they remain differentiable with respect to the
parameters (needed when the training loss itself contains drifts).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import jax
import jax.numpy as jnp
import numpy as np

from .coupling import CouplingSpec, coupling_forward, coupling_init, coupling_inverse
from .errors import ConfigError, SingularityError
from .nets import MlpSpec, NetConfig, mlp_apply, mlp_init, positive

KINDS = ("gaussian", "flow", "fixed_vp", "learnable_scalar")
_BRIDGE_KIND = "bridge_gaussian"
SCHEDULES = ("cosine", "log_snr_linear", "linear")

#: log(delta^2 / (1 - delta^2)) for delta = 1e-2; default log-SNR endpoint.
GAMMA_SPAN = 9.2103404


@dataclass(frozen=True)
class ForwardParameterization:
    """A forward-process transform plus its learnable parameters.

    Static configuration lives in the frozen fields; `params` is the pytree
    of weights. Instances are registered as pytrees, so they can be passed
    through jit/grad directly.
    """

    kind: str
    dim: int
    delta: float
    net: NetConfig
    schedule: str
    gamma_lo: float
    gamma_hi: float
    coupling: CouplingSpec | None
    params: dict = field(default_factory=dict)

    def with_params(self, params):
        return replace(self, params=params)


@dataclass(frozen=True)
class VolatilitySchedule:
    """Scalar volatility g(t) > 0: a constant override or a positive net."""

    constant: float | None
    spec: MlpSpec | None
    floor: float
    params: dict = field(default_factory=dict)


@dataclass(frozen=True)
class LatentState:
    """A batch of latents with their time: values (n, D), t scalar or (n,)."""

    values: jnp.ndarray
    t: jnp.ndarray


for _cls, _data, _meta in (
    (ForwardParameterization, ("params",),
     ("kind", "dim", "delta", "net", "schedule", "gamma_lo", "gamma_hi", "coupling")),
    (VolatilitySchedule, ("params",), ("constant", "spec", "floor")),
    (LatentState, ("values", "t"), ()),
):
    jax.tree_util.register_dataclass(_cls, data_fields=list(_data), meta_fields=list(_meta))


# ---------------------------------------------------------------------------
# construction

def make_parameterization(
    kind: str,
    dim: int,
    net: NetConfig | None = None,
    delta: float = 1e-2,
    *,
    schedule: str = "cosine",
    gamma_bounds: tuple[float, float] = (-GAMMA_SPAN, GAMMA_SPAN),
    coupling: CouplingSpec | None = None,
    seed: int = 0,
) -> ForwardParameterization:
    """Build an initialized parameterization of the requested kind.

    Boundary conditions (see module docstring) hold at initialization by
    construction, not by training. Raises ConfigError for unknown kinds or
    non-positive delta/dimension.
    """
    if kind not in KINDS and kind != _BRIDGE_KIND:
        raise ConfigError(f"unknown parameterization kind: {kind!r}")
    if dim < 1:
        raise ConfigError(f"dimension must be >= 1, got {dim}")
    if not delta > 0:
        raise ConfigError(f"delta must be positive, got {delta}")
    if schedule not in SCHEDULES:
        raise ConfigError(f"unknown schedule: {schedule!r}")
    net = net or NetConfig()
    key = jax.random.PRNGKey(seed)
    params: dict = {}
    if kind in ("gaussian", _BRIDGE_KIND) and net.kind == "mlp":
        data_dim = dim if kind == "gaussian" else 2 * dim
        spec = MlpSpec(data_dim=data_dim, out_dim=2 * dim, hidden=net.hidden,
                       time_freqs=net.time_freqs, zero_init_last=True)
        params["net"] = mlp_init(key, spec)
    elif kind == "learnable_scalar":
        spec = MlpSpec(data_dim=0, out_dim=1, hidden=net.hidden,
                       time_freqs=net.time_freqs, zero_init_last=True)
        params["net"] = mlp_init(key, spec)
    elif kind == "flow":
        coupling = coupling or CouplingSpec(dim=dim)
        if coupling.dim != dim:
            raise ConfigError("coupling dimension does not match parameterization")
        params["coupling"] = coupling_init(key, coupling)
    return ForwardParameterization(
        kind=kind, dim=dim, delta=float(delta), net=net, schedule=schedule,
        gamma_lo=float(gamma_bounds[0]), gamma_hi=float(gamma_bounds[1]),
        coupling=coupling, params=params,
    )


def make_volatility(
    constant: float | None = None,
    hidden: tuple[int, ...] = (64, 64, 64),
    floor: float = 1e-6,
    time_freqs: int = 6,
    seed: int = 0,
) -> VolatilitySchedule:
    """A constant g or a learnable positive scalar net over t."""
    if constant is not None:
        if constant < 0:
            raise ConfigError(f"constant volatility must be >= 0, got {constant}")
        return VolatilitySchedule(constant=float(constant), spec=None, floor=floor)
    spec = MlpSpec(data_dim=0, out_dim=1, hidden=hidden, time_freqs=time_freqs)
    params = {"net": mlp_init(jax.random.PRNGKey(seed), spec)}
    return VolatilitySchedule(constant=None, spec=spec, floor=floor, params=params)


def sample_noise(n: int, dim: int, seed) -> jnp.ndarray:
    """Standard-normal base noise, reproducible from the seed (or PRNG key)."""
    key = seed if isinstance(seed, jnp.ndarray) else jax.random.PRNGKey(seed)
    return jax.random.normal(key, (n, dim))


# ---------------------------------------------------------------------------
# single-sample primitives (cond is x for the plain kinds, (x0, x1) for bridges)

def _gaussian_spec(fp: ForwardParameterization) -> MlpSpec:
    data_dim = fp.dim if fp.kind == "gaussian" else 2 * fp.dim
    return MlpSpec(data_dim=data_dim, out_dim=2 * fp.dim, hidden=fp.net.hidden,
                   time_freqs=fp.net.time_freqs, zero_init_last=True)


def _base_nets(fp: ForwardParameterization, t, cond):
    """(mu_net, sigma_net) outputs of the gaussian-family base networks."""
    if fp.net.kind == "constant":
        mu_bar = jnp.full((fp.dim,), fp.net.mean_value)
        sigma_bar = jnp.full((fp.dim,), fp.net.scale_value)
        return mu_bar, sigma_bar
    x_in = cond if fp.kind == "gaussian" else jnp.concatenate(cond)
    out = mlp_apply(_gaussian_spec(fp), fp.params["net"], x_in, t)
    return out[: fp.dim], positive(out[fp.dim :])


def _gamma(fp: ForwardParameterization, t):
    """Log-SNR curve for the scalar-schedule kinds."""
    base = fp.gamma_lo + (fp.gamma_hi - fp.gamma_lo) * t
    if fp.kind == "learnable_scalar":
        spec = MlpSpec(data_dim=0, out_dim=1, hidden=fp.net.hidden,
                       time_freqs=fp.net.time_freqs, zero_init_last=True)
        base = base + t * (1.0 - t) * mlp_apply(spec, fp.params["net"], None, t)[0]
    return base


def _mean_scale1(fp: ForwardParameterization, t, cond):
    """(mu, sigma) of the conditional Gaussian for the linear-in-eps kinds."""
    d = fp.delta
    if fp.kind in ("gaussian", _BRIDGE_KIND):
        mu_bar, sigma_bar = _base_nets(fp, t, cond)
        if fp.kind == "gaussian":
            mu = (1.0 - t) * cond + t * (1.0 - t) * mu_bar
            log_sigma = (1.0 - t) * math.log(d) + t * (1.0 - t) * jnp.log(sigma_bar)
            return mu, jnp.exp(log_sigma)
        x0, x1 = cond
        mu = (1.0 - t) * x0 + t * x1 + t * (1.0 - t) * mu_bar
        # delta factored out so sigma equals delta exactly at both endpoints
        return mu, d * jnp.exp(t * (1.0 - t) * jnp.log(sigma_bar))
    if fp.kind == "fixed_vp" and fp.schedule == "cosine":
        sig2 = d**2 + (1.0 - d**2) * jnp.sin(0.5 * jnp.pi * t) ** 2
        alpha = math.sqrt(1.0 - d**2) * jnp.cos(0.5 * jnp.pi * t)
    elif fp.kind == "fixed_vp" and fp.schedule == "linear":
        alpha = 1.0 - t
        sig2 = (d + (1.0 - d) * t) ** 2
    else:  # log-SNR schedules, frozen or learnable
        g = _gamma(fp, t)
        sig2 = jax.nn.sigmoid(g)
        alpha = jnp.sqrt(jax.nn.sigmoid(-g))
    sigma = jnp.sqrt(sig2)
    ones = jnp.ones((fp.dim,))
    return alpha * cond, sigma * ones


def _transform1(fp, eps, t, cond):
    if fp.kind == "flow":
        s = fp.delta + (1.0 - fp.delta) * t
        c = (1.0 - t) * cond
        u, _ = coupling_forward(fp.coupling, fp.params["coupling"], eps, t, c)
        return c + s * u
    mu, sigma = _mean_scale1(fp, t, cond)
    return mu + sigma * eps


def _inverse1(fp, z, t, cond):
    if fp.kind == "flow":
        s = fp.delta + (1.0 - fp.delta) * t
        c = (1.0 - t) * cond
        eps, _ = coupling_inverse(fp.coupling, fp.params["coupling"], (z - c) / s, t, c)
        return eps
    mu, sigma = _mean_scale1(fp, t, cond)
    return (z - mu) / sigma


def _logq1(fp, z, t, cond):
    """log q(z_t | cond), exact via the change of variables."""
    if fp.kind == "flow":
        s = fp.delta + (1.0 - fp.delta) * t
        c = (1.0 - t) * cond
        eps, logdet_inv = coupling_inverse(
            fp.coupling, fp.params["coupling"], (z - c) / s, t, c
        )
        base = -0.5 * jnp.sum(eps**2) - 0.5 * fp.dim * math.log(2.0 * math.pi)
        return base + logdet_inv - fp.dim * jnp.log(s)
    mu, sigma = _mean_scale1(fp, t, cond)
    eps = (z - mu) / sigma
    return jnp.sum(-0.5 * eps**2 - jnp.log(sigma)) - 0.5 * fp.dim * math.log(2.0 * math.pi)


def _score1(fp, z, t, cond):
    if fp.kind == "flow":
        return jax.grad(lambda zz: _logq1(fp, zz, t, cond))(z)
    mu, sigma = _mean_scale1(fp, t, cond)
    return (mu - z) / sigma**2


def _tderiv1(fp, eps, t, cond):
    """Directional derivative of the transform along a unit time tangent."""
    _, dz = jax.jvp(lambda tt: _transform1(fp, eps, tt, cond), (t,), (jnp.ones_like(t),))
    return dz


def _drift1(fp, z, t, cond):
    eps = _inverse1(fp, z, t, cond)
    return _tderiv1(fp, eps, t, cond)


def _vol1(vol: VolatilitySchedule, t):
    if vol.constant is not None:
        return jnp.asarray(vol.constant, dtype=jnp.float64)
    return positive(mlp_apply(vol.spec, vol.params["net"], None, t)[0], vol.floor)


# ---------------------------------------------------------------------------
# batched API

def _broadcast_t(t, n):
    t = jnp.asarray(t, dtype=jnp.float64)
    if t.ndim == 0:
        t = jnp.full((n,), t)
    if t.shape != (n,):
        raise ConfigError(f"t must be scalar or shape ({n},), got {t.shape}")
    return t


def _is_concrete(value) -> bool:
    return not isinstance(value, jax.core.Tracer)


def _check_inputs(fp, t, *arrays):
    for a in arrays:
        if a.ndim != 2 or a.shape[1] != fp.dim:
            raise ConfigError(
                f"expected arrays of shape (n, {fp.dim}), got {a.shape}"
            )
    if _is_concrete(t):
        tv = np.asarray(t)
        if np.any(tv < 0.0) or np.any(tv > 1.0):
            raise ConfigError("t must lie in [0, 1]")


def transform(fp: ForwardParameterization, eps, t, x) -> LatentState:
    """Push base noise through the forward transform: z_t ~ q(z_t | x)."""
    eps, x = jnp.asarray(eps), jnp.asarray(x)
    _check_inputs(fp, t, eps, x)
    tb = _broadcast_t(t, eps.shape[0])
    z = jax.vmap(_transform1, in_axes=(None, 0, 0, 0))(fp, eps, tb, x)
    return LatentState(values=z, t=tb)


def inverse(fp: ForwardParameterization, state: LatentState, x) -> jnp.ndarray:
    """Recover the base noise for a latent: the inverse of transform."""
    z, x = jnp.asarray(state.values), jnp.asarray(x)
    _check_inputs(fp, state.t, z, x)
    tb = _broadcast_t(state.t, z.shape[0])
    _check_invertible(fp, tb, x)
    return jax.vmap(_inverse1, in_axes=(None, 0, 0, 0))(fp, z, tb, x)


def _check_invertible(fp, tb, cond):
    if fp.kind == "flow":
        return
    sigma = jax.vmap(lambda tt, cc: _mean_scale1(fp, tt, cc)[1], in_axes=(0, 0))(tb, cond)
    if _is_concrete(sigma) and not bool(jnp.all(sigma > 0.0)):
        raise SingularityError("zero scale: transform is not invertible here")


def time_derivative(fp: ForwardParameterization, eps, t, x) -> jnp.ndarray:
    """d transform / dt at fixed noise; differentiable in the parameters."""
    eps, x = jnp.asarray(eps), jnp.asarray(x)
    _check_inputs(fp, t, eps, x)
    tb = _broadcast_t(t, eps.shape[0])
    return jax.vmap(_tderiv1, in_axes=(None, 0, 0, 0))(fp, eps, tb, x)


def conditional_drift(fp: ForwardParameterization, state: LatentState, x) -> jnp.ndarray:
    """ODE velocity at z_t: the time derivative evaluated at the matched noise."""
    eps = inverse(fp, state, x)
    tb = _broadcast_t(state.t, eps.shape[0])
    return jax.vmap(_tderiv1, in_axes=(None, 0, 0, 0))(fp, eps, tb, jnp.asarray(x))


def conditional_score(fp: ForwardParameterization, state: LatentState, x) -> jnp.ndarray:
    """Gradient of log q(z_t | x) in z_t (closed form for linear kinds)."""
    z, x = jnp.asarray(state.values), jnp.asarray(x)
    _check_inputs(fp, state.t, z, x)
    tb = _broadcast_t(state.t, z.shape[0])
    _check_invertible(fp, tb, x)
    return jax.vmap(_score1, in_axes=(None, 0, 0, 0))(fp, z, tb, x)


def log_density(fp: ForwardParameterization, state: LatentState, x) -> jnp.ndarray:
    """Per-sample log q(z_t | x)."""
    z, x = jnp.asarray(state.values), jnp.asarray(x)
    _check_inputs(fp, state.t, z, x)
    tb = _broadcast_t(state.t, z.shape[0])
    return jax.vmap(_logq1, in_axes=(None, 0, 0, 0))(fp, z, tb, x)


def volatility(vol: VolatilitySchedule, t, g_scale: float = 1.0) -> jnp.ndarray:
    """g(t), strictly positive; an inference-time factor may rescale it."""
    tv = jnp.atleast_1d(jnp.asarray(t, dtype=jnp.float64))
    if _is_concrete(tv) and (np.any(np.asarray(tv) < 0.0) or np.any(np.asarray(tv) > 1.0)):
        raise ConfigError("t must lie in [0, 1]")
    g = jax.vmap(lambda tt: _vol1(vol, tt))(tv)
    g = g_scale * g
    return g if jnp.asarray(t).ndim else g[0]


def forward_sde_drift(fp, vol, state: LatentState, x, g_scale: float = 1.0):
    """Drift of the forward-time conditional SDE sharing transform's marginals."""
    tb = _broadcast_t(state.t, jnp.asarray(state.values).shape[0])
    g = volatility(vol, tb, g_scale)
    f = conditional_drift(fp, state, x)
    s = conditional_score(fp, state, x)
    return f + 0.5 * g[:, None] ** 2 * s


def backward_sde_drift(fp, vol, state: LatentState, x, g_scale: float = 1.0):
    """Drift of the reverse-time conditional SDE (same marginals, flipped sign)."""
    tb = _broadcast_t(state.t, jnp.asarray(state.values).shape[0])
    g = volatility(vol, tb, g_scale)
    f = conditional_drift(fp, state, x)
    s = conditional_score(fp, state, x)
    return f - 0.5 * g[:, None] ** 2 * s
