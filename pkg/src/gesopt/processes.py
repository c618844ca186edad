"""Exogenous driver processes: residual heat demand and fuel price.

Both drivers are modelled as a deterministic seasonality curve plus a
mean-reverting Ornstein–Uhlenbeck residual.  The residual is always handled in
deseasonalized coordinates; adding the seasonality back is the caller's
concern (the exports do it when writing r̃ columns).

Time is measured in hours and the per-period volatility may change from one
decision period to the next (piecewise-constant σ), which is why the exact
one-step update takes the period index.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class ProcessError(ValueError):
    pass


@dataclass(frozen=True)
class Seasonality:
    """Deterministic seasonal mean  μ(t) = mu0 + Σ aᵢ cos(2π (t - sᵢ) / Tᵢ).

    ``components`` is a tuple of (amplitude, period_h, shift_h) triples; an
    empty tuple makes the curve constant.  Periods must be positive.
    """

    mu0: float
    components: tuple = ()

    def __post_init__(self):
        if not math.isfinite(self.mu0):
            raise ProcessError("seasonality level must be finite")
        for amp, period, shift in self.components:
            if period <= 0 or not all(map(math.isfinite, (amp, period, shift))):
                raise ProcessError("seasonality component needs finite values, period > 0")

    def __call__(self, t):
        return seasonality_eval(self, t)


def seasonality_eval(seasonality, t):
    """Evaluate the seasonal mean at time(s) ``t`` (hours)."""
    t = np.asarray(t, dtype=float)
    out = np.full(t.shape, seasonality.mu0)
    for amp, period, shift in seasonality.components:
        out = out + amp * np.cos(2.0 * math.pi * (t - shift) / period)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class OUParams:
    """Mean-reverting residual  dX = -beta X dt + sigma(n) dW  (deseasonalized).

    ``sigma`` is either a scalar (constant volatility) or a sequence giving the
    volatility of each decision period; indices past the end clamp to the last
    entry.  Units are per-hour: beta [1/h], sigma [unit·h^-1/2].
    """

    beta: float
    sigma: tuple = (0.0,)
    x0: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.beta) and self.beta > 0):
            raise ProcessError("beta must be positive and finite")
        sig = self.sigma
        if np.isscalar(sig):
            sig = (float(sig),)
        else:
            sig = tuple(float(s) for s in sig)
        if len(sig) == 0:
            raise ProcessError("sigma needs at least one entry")
        if any(not math.isfinite(s) or s < 0 for s in sig):
            raise ProcessError("sigma entries must be finite and nonnegative")
        object.__setattr__(self, "sigma", sig)
        if not math.isfinite(self.x0):
            raise ProcessError("x0 must be finite")

    def sigma_at(self, n):
        if n < 0:
            raise ProcessError("period index must be nonnegative")
        return self.sigma[min(n, len(self.sigma) - 1)]


def ou_step_sd(params, n, dt):
    """Exact standard deviation of the one-period increment.

    ``Σ(n) = sigma_n sqrt((1 - e^(-2 beta dt)) / (2 beta))`` — the stationary
    variance times the accumulation factor of one period.
    """
    if dt < 0:
        raise ProcessError("dt must be nonnegative")
    s = params.sigma_at(n)
    return s * math.sqrt(-math.expm1(-2.0 * params.beta * dt) / (2.0 * params.beta))


def ou_exact_step(x, params, n, dt, shock):
    """Advance the deseasonalized residual one period, exactly in law.

    ``x' = x e^(-beta dt) + Σ(n) shock`` with ``shock`` a standard-normal draw
    (scalar or array; arrays broadcast against ``x``).  This is the exact
    solution of the OU SDE, so no time-stepping error enters the decision
    process.
    """
    decay = math.exp(-params.beta * dt)
    return x * decay + ou_step_sd(params, n, dt) * np.asarray(shock, dtype=float)


def stationary_band(params):
    """Symmetric ±3 sd band of the stationary law, for truncation boxes.

    Only defined for constant volatility; a per-period sigma has no single
    stationary law and raises.
    """
    if len(set(params.sigma)) != 1:
        raise ProcessError("stationary_band requires constant sigma")
    half = 3.0 * params.sigma[0] / math.sqrt(2.0 * params.beta)
    return (-half, half)


def sample_path(params, seasonality, n_steps, dt, seed=None, rng=None):
    """Simulate the driver on the decision lattice with exact OU increments.

    Returns an array of shape ``(n_steps + 1, 3)`` with columns
    ``(t_hours, residual, residual + seasonal_mean)``.  Pass either ``seed``
    or an existing ``numpy`` Generator; the same seed reproduces the path
    bit for bit.
    """
    if n_steps < 0:
        raise ProcessError("n_steps must be nonnegative")
    if rng is None:
        rng = np.random.default_rng(seed)
    t = np.arange(n_steps + 1) * float(dt)
    x = np.empty(n_steps + 1)
    x[0] = params.x0
    shocks = rng.standard_normal(n_steps)
    for k in range(n_steps):
        x[k + 1] = ou_exact_step(x[k], params, k, dt, shocks[k])
    mu = seasonality_eval(seasonality, t)
    mu = np.broadcast_to(mu, t.shape)
    return np.column_stack([t, x, x + mu])
