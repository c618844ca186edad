"""Tests for the seasonal OU driver processes."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gesopt.processes import (
    OUParams,
    ProcessError,
    Seasonality,
    ou_exact_step,
    ou_step_sd,
    sample_path,
    seasonality_eval,
    stationary_band,
)


def test_seasonality_constant():
    s = Seasonality(mu0=-16.7)
    assert seasonality_eval(s, 3.5) == -16.7
    assert np.all(seasonality_eval(s, np.arange(5.0)) == -16.7)


def test_seasonality_cosine_components():
    s = Seasonality(mu0=1.0, components=((2.0, 24.0, 6.0),))
    # peak at t = shift, trough half a period later
    assert seasonality_eval(s, 6.0) == pytest.approx(3.0, abs=1e-12)
    assert seasonality_eval(s, 18.0) == pytest.approx(-1.0, abs=1e-12)


def test_seasonality_validation():
    with pytest.raises(ProcessError):
        Seasonality(mu0=0.0, components=((1.0, 0.0, 0.0),))


def test_ou_step_decay_factor():
    params = OUParams(beta=0.5, sigma=0.0, x0=10.0)
    out = ou_exact_step(10.0, params, 0, 1.0, 0.0)
    assert out == pytest.approx(10.0 * math.exp(-0.5), rel=1e-14)


def test_ou_step_sd_closed_form():
    params = OUParams(beta=0.5, sigma=2.0)
    sd = ou_step_sd(params, 0, 1.0)
    assert sd == pytest.approx(2.0 * math.sqrt((1 - math.exp(-1.0)) / 1.0), rel=1e-14)


def test_ou_step_sd_per_period_clamps():
    params = OUParams(beta=1.0, sigma=(1.0, 3.0))
    assert ou_step_sd(params, 0, 1.0) < ou_step_sd(params, 1, 1.0)
    assert ou_step_sd(params, 7, 1.0) == ou_step_sd(params, 1, 1.0)


def test_ou_step_matches_sde_moments_monte_carlo():
    # Euler–Maruyama oracle with a fine substep: mean and sd of X(dt) | X(0)=x
    rng = np.random.default_rng(17)
    beta, sigma, x_init, dt = 0.8, 1.5, 2.0, 1.0
    n_paths, n_sub = 40_000, 400
    h = dt / n_sub
    x = np.full(n_paths, x_init)
    for _ in range(n_sub):
        x = x - beta * x * h + sigma * math.sqrt(h) * rng.standard_normal(n_paths)
    params = OUParams(beta=beta, sigma=sigma)
    exact_mean = x_init * math.exp(-beta * dt)
    exact_sd = ou_step_sd(params, 0, dt)
    assert abs(x.mean() - exact_mean) < 3 * x.std() / math.sqrt(n_paths) + 0.01
    assert abs(x.std() - exact_sd) < 0.01


@given(st.floats(-5, 5), st.floats(0.05, 2.0), st.integers(0, 4))
@settings(max_examples=50, deadline=None)
def test_ou_step_zero_noise_contracts_toward_zero(x, beta, n):
    params = OUParams(beta=beta, sigma=(0.5, 0.4, 0.3), x0=0.0)
    out = ou_exact_step(x, params, n, 1.0, 0.0)
    assert abs(out) <= abs(x) + 1e-12


def test_stationary_band_closed_form():
    params = OUParams(beta=0.5, sigma=2.0)
    lo, hi = stationary_band(params)
    half = 3.0 * 2.0 / math.sqrt(1.0)
    assert (lo, hi) == (pytest.approx(-half), pytest.approx(half))


def test_stationary_band_requires_constant_sigma():
    with pytest.raises(ProcessError):
        stationary_band(OUParams(beta=0.5, sigma=(1.0, 2.0)))


def test_sample_path_shape_and_determinism():
    params = OUParams(beta=0.5, sigma=1.0, x0=0.3)
    s = Seasonality(mu0=-2.0)
    a = sample_path(params, s, 24, 1.0, seed=5)
    b = sample_path(params, s, 24, 1.0, seed=5)
    c = sample_path(params, s, 24, 1.0, seed=6)
    assert a.shape == (25, 3)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    # third column is residual plus seasonal mean
    assert np.allclose(a[:, 2], a[:, 1] - 2.0)
    assert a[0, 1] == 0.3


def test_sample_path_long_run_variance():
    # after many periods the lattice marginal approaches sigma^2 / (2 beta)
    params = OUParams(beta=0.5, sigma=1.0, x0=0.0)
    s = Seasonality(mu0=0.0)
    rng = np.random.default_rng(99)
    finals = np.array(
        [sample_path(params, s, 40, 1.0, rng=rng)[-1, 1] for _ in range(4000)]
    )
    assert finals.var() == pytest.approx(1.0 / (2 * 0.5), rel=0.1)


def test_param_validation():
    with pytest.raises(ProcessError):
        OUParams(beta=0.0, sigma=1.0)
    with pytest.raises(ProcessError):
        OUParams(beta=1.0, sigma=-1.0)
    with pytest.raises(ProcessError):
        OUParams(beta=1.0, sigma=())
