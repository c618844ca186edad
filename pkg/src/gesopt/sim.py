"""Forward simulation of controlled trajectories and ensemble statistics.

A controlled path records everything needed to redraw the reference path
figures from data alone: the seasonal demand r̃, the tank and storage
temperatures, the action taken each period (as an integer code, suitable for
background shading), and the running cost accounting.  Summaries aggregate an
ensemble into per-period action frequencies and 5/50/95% quantile bands.

Paths are generated by the same engine as the solver's Monte Carlo policy
evaluation, so cost summaries here and value estimates there agree path for
path.  Band-violation accounting follows the chance-constraint convention:
a period counts as violated when its *end* state lies outside the band, so
the initial condition is never charged against the controller.

Generation is sequential in-process; paths drawn from disjoint seeds are
independent, so ensembles can be produced in parallel batches and merged
before ``summarize`` (a pure reduction).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import mdp, solver

__all__ = [
    "SimError",
    "ACTION_NAMES",
    "PATH_CSV_HEADER",
    "SUMMARY_CSV_HEADER",
    "ControlledPath",
    "PathSummary",
    "simulate_controlled_path",
    "simulate_paths",
    "summarize",
    "band_violations",
    "violation_frequency",
    "write_path_csv",
    "write_summary_csv",
]


class SimError(ValueError):
    pass


#: presentation names for the integer action codes, in mdp.ACTIONS order
ACTION_NAMES = {-2: "over_spill", -1: "charge", 0: "wait",
                1: "heat_pump", 2: "fuel"}

PATH_CSV_HEADER = ["t_h", "r_tilde", "p_c", "qM_c", "qF_c", "action",
                   "cost_eur", "cum_cost_eur"]

SUMMARY_CSV_HEADER = (
    ["t_h"]
    + [f"freq_{ACTION_NAMES[a]}" for a in mdp.ACTIONS]
    + ["p_c_mean", "p_c_q05", "p_c_q50", "p_c_q95",
       "qM_c_mean", "qM_c_q05", "qM_c_q50", "qM_c_q95"]
)

_QUANTS = (0.05, 0.5, 0.95)


@dataclass
class ControlledPath:
    """One controlled trajectory with per-period cost accounting.

    States are recorded at all N+1 period boundaries; ``actions[n]`` and
    ``period_costs[n]`` belong to the period that starts at ``times[n]``.
    ``cum_costs`` runs over the same boundaries: entry n < N is the discounted
    cost accumulated through period n, and the final entry additionally
    absorbs the terminal charge, so ``cum_costs[-1]`` is the path total.
    """

    times: np.ndarray  # (N+1,) hours
    r_tilde: np.ndarray  # (N+1,) seasonal mean + residual, MJ/h
    p: np.ndarray  # (N+1,) tank temperature °C
    qm: np.ndarray  # (N+1,) storage medium average °C
    qf: np.ndarray  # (N+1,) storage fluid average °C
    actions: np.ndarray  # (N,) int8 codes, see ACTION_NAMES
    period_costs: np.ndarray  # (N,) discounted EUR
    cum_costs: np.ndarray  # (N+1,) discounted EUR
    terminal_cost: float  # discounted EUR
    fallbacks: int  # periods where the policy's action was infeasible

    @property
    def total_cost(self) -> float:
        return float(self.cum_costs[-1])

    @property
    def n_periods(self) -> int:
        return len(self.actions)


def _from_record(rec: solver.PathRecord) -> ControlledPath:
    cum = np.concatenate([np.cumsum(rec.period_costs), [rec.total_cost]])
    return ControlledPath(times=rec.times, r_tilde=rec.r_tilde, p=rec.p,
                          qm=rec.qm, qf=rec.qf, actions=rec.actions,
                          period_costs=rec.period_costs, cum_costs=cum,
                          terminal_cost=rec.terminal_cost,
                          fallbacks=rec.fallbacks)


def _as_callable(policy, grid):
    if isinstance(policy, solver.PolicyTable):
        if grid is None:
            raise SimError("grid is required to simulate a PolicyTable")
        return solver.table_policy(policy, grid)
    return policy


def simulate_paths(policy, ctx, x0, n_paths, seed, *, grid=None):
    """Draw ``n_paths`` controlled trajectories from one seeded stream.

    ``policy`` is a callable ``(n, x) -> action`` or a
    :class:`~gesopt.solver.PolicyTable` (pass ``grid`` for lookups).  The
    paths come from the identical generator stream that
    :func:`~gesopt.solver.evaluate_policy_mc` consumes, so the list's total
    costs reproduce that estimator's samples bit for bit.
    """
    if n_paths < 1:
        raise SimError("need at least one path")
    rule = _as_callable(policy, grid)
    rng = np.random.default_rng(seed)
    return [_from_record(solver.rollout(ctx, rule, x0, rng))
            for _ in range(n_paths)]


def simulate_controlled_path(policy, ctx, x0, seed, *, grid=None):
    """Simulate a single controlled path; same seed, same path — bit for bit.

    Every recorded action is feasible at the continuous state where it was
    applied: infeasible policy suggestions (possible for table policies away
    from grid points) fall back to the documented preference order and are
    counted in ``fallbacks``.
    """
    return simulate_paths(policy, ctx, x0, 1, seed, grid=grid)[0]


@dataclass
class PathSummary:
    """Deterministic aggregation of a path ensemble.

    ``action_freq`` rows are periods, columns follow ``mdp.ACTIONS``;
    ``*_bands`` rows are the 5/50/95% quantiles over paths at each period
    boundary; ``cost_bands`` holds the same quantiles of the total cost.
    """

    times: np.ndarray  # (N+1,)
    action_freq: np.ndarray  # (N, len(ACTIONS))
    p_mean: np.ndarray  # (N+1,)
    p_bands: np.ndarray  # (3, N+1)
    qm_mean: np.ndarray  # (N+1,)
    qm_bands: np.ndarray  # (3, N+1)
    cost_mean: float
    cost_bands: np.ndarray  # (3,)
    n_paths: int


def summarize(paths) -> PathSummary:
    """Aggregate paths into action frequencies and quantile bands.

    A single path collapses every band onto the path itself, and duplicating
    the input list leaves the statistical content unchanged — the aggregation
    is a pure reduction of the empirical distribution, which is why quantiles
    use the inverse empirical CDF rather than sample-count-dependent
    interpolation between order statistics.
    """
    paths = list(paths)
    if not paths:
        raise SimError("summarize needs at least one path")
    n_per = paths[0].n_periods
    if any(p.n_periods != n_per for p in paths):
        raise SimError("paths have mismatched horizons")
    acts = np.stack([p.actions for p in paths])
    freq = np.stack([(acts == a).mean(axis=0) for a in mdp.ACTIONS], axis=1)
    pmat = np.stack([p.p for p in paths])
    qmat = np.stack([p.qm for p in paths])
    totals = np.array([p.total_cost for p in paths])
    return PathSummary(
        times=paths[0].times.copy(),
        action_freq=freq,
        p_mean=pmat.mean(axis=0),
        p_bands=np.quantile(pmat, _QUANTS, axis=0, method="inverted_cdf"),
        qm_mean=qmat.mean(axis=0),
        qm_bands=np.quantile(qmat, _QUANTS, axis=0, method="inverted_cdf"),
        cost_mean=float(totals.mean()),
        cost_bands=np.quantile(totals, _QUANTS, method="inverted_cdf"),
        n_paths=len(paths),
    )


def band_violations(path, cons):
    """Count periods whose end state leaves the tank / storage comfort bands.

    Returns ``{"p": count, "q": count}``.  Only period *ends* are charged
    (the chance constraints are stated there); the initial state is free.
    """
    p_end = path.p[1:]
    q_end = path.qm[1:]
    return {
        "p": int(np.count_nonzero((p_end < cons.p_lo) | (p_end > cons.p_hi))),
        "q": int(np.count_nonzero((q_end < cons.q_lo) | (q_end > cons.q_hi))),
    }


def violation_frequency(paths, cons):
    """Fraction of (path, period) pairs ending outside each band."""
    paths = list(paths)
    total = sum(p.n_periods for p in paths)
    if total == 0:
        raise SimError("violation frequency needs at least one period")
    counts = {"p": 0, "q": 0}
    for path in paths:
        v = band_violations(path, cons)
        counts["p"] += v["p"]
        counts["q"] += v["q"]
    return {band: count / total for band, count in counts.items()}


def _fmt(x) -> str:
    return repr(float(x))


def write_path_csv(path, out):
    """Write one path as CSV; column names carry units (h, °C, EUR).

    One row per period boundary.  The terminal row leaves ``action`` and
    ``cost_eur`` empty while ``cum_cost_eur`` absorbs the terminal charge,
    so the last cumulative entry equals the path's total cost.
    """
    n_per = path.n_periods
    with open(out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(PATH_CSV_HEADER)
        for n in range(n_per + 1):
            w.writerow([
                _fmt(path.times[n]), _fmt(path.r_tilde[n]), _fmt(path.p[n]),
                _fmt(path.qm[n]), _fmt(path.qf[n]),
                str(int(path.actions[n])) if n < n_per else "",
                _fmt(path.period_costs[n]) if n < n_per else "",
                _fmt(path.cum_costs[n]),
            ])


def write_summary_csv(summary, out):
    """Write the per-period part of a summary as CSV (units in the header).

    Action-frequency cells are empty on the terminal row — no action is taken
    there.  Scalar cost statistics live on the summary object itself, not in
    this table.
    """
    n_per = summary.action_freq.shape[0]
    with open(out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_CSV_HEADER)
        for n in range(n_per + 1):
            if n < n_per:
                freqs = [_fmt(f) for f in summary.action_freq[n]]
            else:
                freqs = [""] * len(mdp.ACTIONS)
            w.writerow([
                _fmt(summary.times[n]), *freqs,
                _fmt(summary.p_mean[n]), _fmt(summary.p_bands[0, n]),
                _fmt(summary.p_bands[1, n]), _fmt(summary.p_bands[2, n]),
                _fmt(summary.qm_mean[n]), _fmt(summary.qm_bands[0, n]),
                _fmt(summary.qm_bands[1, n]), _fmt(summary.qm_bands[2, n]),
            ])
