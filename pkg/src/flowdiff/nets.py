"""Small fully-connected networks used for all learnable components.

Parameters live in plain pytrees (lists of {"w", "b"} dicts) so that models
can be passed straight into jit/grad and serialized without framework
machinery. Specs are frozen dataclasses registered as static pytree metadata.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import jax
import jax.numpy as jnp


@dataclass(frozen=True)
class MlpSpec:
    """Shape of an MLP over an optional data input and an optional time input.

    data_dim may be 0 (time-only networks such as scalar schedules). When
    with_time is set, the scalar time is expanded into Fourier features
    [t, sin(2*pi*k*t), cos(2*pi*k*t)] with geometric frequencies k = 2**j.
    """

    data_dim: int
    out_dim: int
    hidden: tuple[int, ...] = (128, 128, 128)
    with_time: bool = True
    time_freqs: int = 6
    zero_init_last: bool = False

    @property
    def in_dim(self) -> int:
        d = self.data_dim
        if self.with_time:
            d += 1 + 2 * self.time_freqs
        return d


def time_features(t, n_freqs: int):
    """Fourier embedding of a scalar time, shape (1 + 2*n_freqs,)."""
    t = jnp.asarray(t)
    feats = [t[None]]
    for j in range(n_freqs):
        w = 2.0 * jnp.pi * (2.0**j)
        feats.append(jnp.sin(w * t)[None])
        feats.append(jnp.cos(w * t)[None])
    return jnp.concatenate(feats)


def mlp_init(key, spec: MlpSpec):
    """LeCun-normal weights; the last layer may be zero-initialized so the
    network starts as (near) identity in residual/coupling settings."""
    dims = (spec.in_dim,) + tuple(spec.hidden) + (spec.out_dim,)
    params = []
    keys = jax.random.split(key, len(dims) - 1)
    for i, k in enumerate(keys):
        fan_in = dims[i]
        scale = 1.0 / jnp.sqrt(fan_in)
        w = jax.random.normal(k, (dims[i], dims[i + 1])) * scale
        if spec.zero_init_last and i == len(keys) - 1:
            w = jnp.zeros_like(w)
        params.append({"w": w, "b": jnp.zeros(dims[i + 1])})
    return params


def mlp_apply(spec: MlpSpec, params, x=None, t=None):
    """Evaluate on a single sample. x: (data_dim,) or None; t: scalar or None."""
    parts = []
    if spec.data_dim > 0:
        parts.append(jnp.asarray(x))
    if spec.with_time:
        parts.append(time_features(t, spec.time_freqs))
    h = jnp.concatenate(parts) if len(parts) > 1 else parts[0]
    for layer in params[:-1]:
        h = jax.nn.silu(h @ layer["w"] + layer["b"])
    last = params[-1]
    return h @ last["w"] + last["b"]


@dataclass(frozen=True)
class NetConfig:
    """Selects how a component function is realized.

    kind "mlp" is the learnable default. "constant"/"zero" give parameter-free
    stand-ins (used for analytic test parameterizations, e.g. a unit scale
    network), with `mean_value`/`scale_value` taken verbatim.
    """

    kind: str = "mlp"
    hidden: tuple[int, ...] = (128, 128, 128)
    time_freqs: int = 6
    mean_value: float = 0.0
    scale_value: float = 1.0


def positive(raw, floor: float = 1e-6):
    """Smooth positive map with an explicit floor; keeps scales away from 0."""
    return jax.nn.softplus(raw) + floor
