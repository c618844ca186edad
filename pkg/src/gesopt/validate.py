"""Property checks over a finished artifact set, with a pass/fail report.

The checks here hold for *any* well-formed configuration: transition rows
are probability distributions, the stored value table replays its own
recursion exactly, the terminal slice matches the closed-form liquidation
schedule, chosen actions respect the chance constraints.  Benchmarks that
only make sense at the reference parameter set (policy structure, cost
dominance of the optimal control) live in the test suite instead.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import mdp
from .grid import feasibility_table
from .solver import bellman_residual


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str


def _point_coordinates(ctx, grid):
    """Per-flat-point tank temperature and storage medium average.

    The medium average must reproduce the scalar dot product used when the
    terminal table was filled; a matrix product can round the last ulp
    differently and defeat the exact comparison below.
    """
    n_r, n_p = grid.shape[0], grid.shape[1]
    p_axis = np.asarray(grid.axes[1].points, dtype=float)
    c_med = np.asarray(ctx.reduced.c_medium, dtype=float)
    qm_y = np.array([float(c_med @ np.asarray(y, dtype=float))
                     for y in grid.y_points()])
    p_all = np.repeat(np.tile(p_axis, n_r), grid.n_y)
    qm_all = np.tile(qm_y, n_r * n_p)
    return p_all, qm_all


def check_kernel_rows(kernels, grid, tol=1e-8):
    """Every feasible transition row sums to one within ``tol``."""
    ones = np.ones(grid.n_points)
    worst = 0.0
    n_rows = 0
    for key in sorted(kernels, key=repr):
        ker = kernels[key]
        sums = ker.expected_values(grid, ones)
        if ker.feasible is not None:
            sums = sums[ker.feasible]
        if sums.size == 0:
            continue
        worst = max(worst, float(np.abs(sums - 1.0).max()))
        n_rows += sums.size
    passed = worst <= tol
    return CheckResult(
        "kernel_rows_sum_to_one", passed,
        f"worst |row sum - 1| = {worst:.3e} over {n_rows} feasible rows "
        f"in {len(kernels)} kernels (tol {tol:g})")


def check_bellman_residual(ctx, grid, kernels, value_table, *,
                           n_probes=100, seed=0):
    """Replaying the recursion at random probes reproduces V bit for bit."""
    if ctx.n_periods == 0:
        return CheckResult("bellman_residual_zero", True,
                           "no decision periods; nothing to replay")
    rng = np.random.default_rng(seed)
    k = min(n_probes, ctx.n_periods * grid.n_points)
    probes = list(zip(rng.integers(0, ctx.n_periods, size=k),
                      rng.integers(0, grid.n_points, size=k)))
    res = bellman_residual(ctx, grid, kernels, value_table, probes)
    worst = float(np.abs(res).max()) if len(res) else 0.0
    return CheckResult(
        "bellman_residual_zero", worst == 0.0,
        f"max |residual| = {worst:.3e} at {k} probes (must be exactly 0)")


def check_terminal_structure(ctx, grid, value_table):
    """Terminal slice equals the closed-form schedule: exactly zero on the
    plateau p >= p_ref, q_medium >= q_ref, piecewise linear off it."""
    costs, ies = ctx.costs, ctx.ies
    p_all, qm_all = _point_coordinates(ctx, grid)
    kwh_q = costs.m_q * costs.cp_m / 3.6e6
    kwh_p = ies.m_p * ies.cp_w / 3.6e6
    under_q = np.maximum(costs.q_ref - qm_all, 0.0)
    over_q = np.maximum(qm_all - costs.q_ref, 0.0)
    under_p = np.maximum(costs.p_ref - p_all, 0.0)
    over_p = np.maximum(p_all - costs.p_ref, 0.0)
    expect = (kwh_q * (costs.xi_pen_q * under_q - costs.xi_liq_q * over_q)
              + kwh_p * (costs.xi_pen_p * under_p - costs.xi_liq_p * over_p))
    terminal = value_table.values[-1]
    exact = bool(np.array_equal(terminal, expect))
    plateau = (p_all >= costs.p_ref) & (qm_all >= costs.q_ref)
    plateau_zero = bool(np.all(terminal[plateau] == 0.0)) if plateau.any() else True
    passed = exact and plateau_zero
    return CheckResult(
        "terminal_structure", passed,
        f"closed-form match {'exact' if exact else 'BROKEN'}; "
        f"plateau ({int(plateau.sum())} points) "
        f"{'exactly zero' if plateau_zero else 'NONZERO'}; "
        f"slopes {kwh_p * costs.xi_pen_p:.6g} EUR/K (tank), "
        f"{kwh_q * costs.xi_pen_q:.6g} EUR/K (storage)")


def check_policy_feasible(ctx, grid, policy_table):
    """Period-0 choices all lie inside the chance-constraint action sets."""
    if ctx.n_periods == 0:
        return CheckResult("policy_feasible", True, "no decision periods")
    mask, _ = feasibility_table(ctx, grid, 0)
    cols = {a: i for i, a in enumerate(mdp.ACTIONS)}
    chosen = policy_table.actions[0]
    col_idx = np.array([cols[int(a)] for a in chosen])
    ok = mask[np.arange(grid.n_points), col_idx]
    bad = int((~ok).sum())
    return CheckResult(
        "policy_feasible", bad == 0,
        f"{bad} infeasible period-0 choices out of {grid.n_points}")


def check_values_finite(value_table):
    finite = bool(np.all(np.isfinite(value_table.values)))
    peak = float(np.abs(value_table.values).max())
    return CheckResult("values_finite", finite,
                       f"max |V| = {peak:.6g} EUR, all entries finite: {finite}")


def check_mc_band_frequency(mc_stats, cons):
    """End-of-period tank-band violation frequency stays within 2 epsilon."""
    freq = float(mc_stats["violation_freq"]["p"])
    limit = 2.0 * cons.epsilon
    return CheckResult(
        "mc_band_frequency", freq <= limit,
        f"tank-band violation frequency {freq:.4f} <= {limit:.4f} "
        f"(raw frequency reported; limit = 2 epsilon)")


def check_mc_cost_steps(mc_stats):
    """Cumulative path costs never decrease when no revenue terms exist."""
    step = float(mc_stats["min_cost_step_eur"])
    return CheckResult(
        "mc_cost_steps", step >= -1e-9,
        f"smallest cumulative cost increment {step:.3e} EUR (>= -1e-9)")


def run_property_checks(ctx, grid, kernels, value_table, policy_table,
                        mc_stats=None):
    """All applicable checks, in report order."""
    checks = [
        check_kernel_rows(kernels, grid),
        check_bellman_residual(ctx, grid, kernels, value_table),
        check_terminal_structure(ctx, grid, value_table),
        check_policy_feasible(ctx, grid, policy_table),
        check_values_finite(value_table),
    ]
    if mc_stats is not None:
        checks.append(check_mc_band_frequency(mc_stats, ctx.cons))
        if "min_cost_step_eur" in mc_stats:
            checks.append(check_mc_cost_steps(mc_stats))
    return checks


def render_report(checks, value_table=None):
    """Plain-text report, one line per check, no timestamps."""
    lines = [f"{'PASS' if c.passed else 'FAIL'} {c.name}: {c.detail}"
             for c in checks]
    if value_table is not None and np.all(value_table.values == 0.0):
        lines.append("V ≡ 0 (every value entry is exactly zero)")
    n_fail = sum(not c.passed for c in checks)
    lines.append(f"{len(checks) - n_fail} passed, {n_fail} failed")
    return "\n".join(lines) + "\n"
