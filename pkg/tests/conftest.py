"""Shared fixtures: analytic parameterizations and small random models."""

import numpy as np
import pytest

import flowdiff as fd
from flowdiff.nets import NetConfig
from flowdiff.reverse import GenerativeModel, make_predictor


def analytic_fp(dim=1, delta=0.01):
    """The power-scale family F = (1-t) x + delta^(1-t) eps (constant base nets)."""
    return fd.make_parameterization(
        "gaussian", dim, NetConfig(kind="constant", mean_value=0.0, scale_value=1.0),
        delta=delta,
    )


def straight_fp(dim=1, delta=0.01):
    """The straight-line family F = (1-t) x + (delta + (1-delta) t) eps."""
    return fd.make_parameterization("fixed_vp", dim, delta=delta, schedule="linear")


def all_kind_fps(dim=2, seed=0):
    small = NetConfig(hidden=(32, 32), time_freqs=4)
    return {
        "gaussian": fd.make_parameterization("gaussian", dim, small, seed=seed),
        "flow": fd.make_parameterization("flow", dim, seed=seed),
        "fixed_vp": fd.make_parameterization("fixed_vp", dim, schedule="cosine"),
        "learnable_scalar": fd.make_parameterization(
            "learnable_scalar", dim, small, seed=seed
        ),
    }


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20250810)


@pytest.fixture()
def analytic_model():
    """Generative model around the analytic family, g = 1, D = 1."""
    fp = analytic_fp()
    return GenerativeModel(
        fp=fp,
        vol=fd.make_volatility(constant=1.0),
        predictor=make_predictor(1, hidden=(16, 16), seed=7),
    )


@pytest.fixture()
def small_model():
    """Random small model, D = 2, learnable volatility."""
    fp = fd.make_parameterization("gaussian", 2, NetConfig(hidden=(32, 32), time_freqs=4), seed=5)
    return GenerativeModel(
        fp=fp,
        vol=fd.make_volatility(hidden=(16, 16), seed=6),
        predictor=make_predictor(2, hidden=(32, 32), seed=8),
    )
