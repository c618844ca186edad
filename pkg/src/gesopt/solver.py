"""Backward induction on the discretized control problem and policy evaluation.

The value table stores time-0 discounted totals: period costs enter as
e^{−δ·t_n}·Ψ̄ and the terminal penalty as e^{−δ·t_N}·Φ, so with δ = 0 (the
reference configuration) the last row equals the terminal cost exactly and
every other row is a plain expected total.

Ties in the per-point minimization are broken by a fixed preference order —
wait, discharge, charge, fire, over-spill — so repeated solves are
bit-identical and golden tests are meaningful.  The recursion is a handful of
dense matrix products per period; grid points within a sweep are independent
and evaluated as whole-array operations.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np

from . import mdp
from .grid import GridError, build_kernel, feasibility_table, project

__all__ = [
    "SolverError",
    "TIE_BREAK",
    "ValueTable",
    "PolicyTable",
    "PolicyEvaluation",
    "PathRecord",
    "kernels_time_invariant",
    "prepare_kernels",
    "terminal_values",
    "solve_bellman",
    "bellman_residual",
    "policy_cost_to_go",
    "wait_policy_table",
    "policy_lookup",
    "table_policy",
    "wait_policy",
    "greedy_policy",
    "rollout",
    "evaluate_policy_mc",
    "save_tables",
    "load_tables",
]


class SolverError(ValueError):
    pass


#: action preference under exact ties (documented, deterministic)
TIE_BREAK = (0, 1, -1, 2, -2)

_NO_ACTION = 127  # sentinel in int8 action arrays before assignment


@dataclass
class ValueTable:
    """Discounted cost-to-go V̂(n, m) for every period and grid point."""

    values: np.ndarray  # (N+1, n_points) EUR
    grid_hash: str
    config_hash: str = ""

    @property
    def n_periods(self):
        return self.values.shape[0] - 1


@dataclass
class PolicyTable:
    """Minimizing action per (period, grid point), with feasibility provenance.

    ``provenance[n, m]`` carries the grid-module bitmask of constraint rules
    that removed at least one action at that point, recording *why* the
    feasible set was smaller than the full action set wherever it was.
    """

    actions: np.ndarray  # (N, n_points) int8
    provenance: np.ndarray  # (N, n_points) uint8
    grid_hash: str
    config_hash: str = ""

    @property
    def n_periods(self):
        return self.actions.shape[0]


def kernels_time_invariant(ctx):
    """True when one kernel per action serves every period.

    The factored kernel depends on the period only through the shock scales,
    the correlation and the seasonal-demand constant; constant per-period
    arrays mean the period-0 kernel is exact for all n.
    """
    if ctx.n_periods <= 1:
        return True
    return bool(
        np.all(ctx.sig_r == ctx.sig_r[0])
        and np.all(ctx.sig_p == ctx.sig_p[0])
        and np.all(ctx.rho == ctx.rho[0])
        and np.all(ctx.h_mu == ctx.h_mu[0]))


def prepare_kernels(ctx, grid, *, quantize_div=100):
    """Build the kernel set a solve needs.

    Returns ``{action: kernel}`` when the context is time-invariant (the
    common case: kernels are built once and shared across all periods) and
    ``{(n, action): kernel}`` otherwise.  The period-0 feasibility mask is
    attached to shared kernels so stray row reads at infeasible points fail
    loudly.
    """
    if ctx.n_periods == 0:
        return {}
    if kernels_time_invariant(ctx):
        mask, _ = feasibility_table(ctx, grid, 0)
        cols = {a: i for i, a in enumerate(mdp.ACTIONS)}
        return {a: build_kernel(ctx, grid, 0, a, feasible=mask[:, cols[a]],
                                quantize_div=quantize_div)
                for a in mdp.ACTIONS}
    return {(n, a): build_kernel(ctx, grid, n, a, quantize_div=quantize_div)
            for n in range(ctx.n_periods) for a in mdp.ACTIONS}


def _kernel(kernels, n, action):
    try:
        return kernels[(n, action)]
    except KeyError:
        return kernels[action]


def terminal_values(ctx, grid):
    """Undiscounted terminal cost at every grid point, flat order.

    The cost depends only on (p, q̄M), so the scalar function is evaluated on
    the (p-axis × storage-axis) face and broadcast across the demand axis —
    each stored value is the exact scalar-function output.
    """
    ys = grid.y_points()
    n_p = grid.shape[1]
    face = np.empty((n_p, grid.n_y))
    for j, p in enumerate(grid.axes[1].points):
        for iy in range(grid.n_y):
            x = mdp.State(0.0, 0.0, float(p), ys[iy])
            face[j, iy] = mdp.terminal_cost(x, ctx.ies, ctx.costs,
                                            ctx.reduced.c_medium)
    full = np.broadcast_to(face[None, :, :], (grid.shape[0], n_p, grid.n_y))
    return full.reshape(-1).copy()


def _action_totals(ctx, grid, kernels, n, next_values):
    """Discounted cost-plus-continuation of every action at every point.

    Returns a ``(len(ACTIONS), n_points)`` array in :data:`mdp.ACTIONS`
    order; entries at infeasible points are computed but never selected.  The
    running cost is evaluated on the grid's f = 0 slice (the fuel-price
    residual is not a grid coordinate; its seasonal mean is in the constant).
    """
    disc = math.exp(-ctx.costs.delta * n * ctx.dt)
    ys = grid.y_points()
    n_y = grid.n_y
    totals = np.empty((len(mdp.ACTIONS), grid.n_points))
    for i, a in enumerate(mdp.ACTIONS):
        const, row_y, _ = mdp.running_cost_affine(ctx, n, a)
        cost_y = const + ys @ row_y  # (n_y,)
        ev = _kernel(kernels, n, a).expected_values(grid, next_values)
        totals[i] = (ev.reshape(-1, n_y) + disc * cost_y[None, :]).reshape(-1)
    return totals


def _select(totals, mask):
    """Feasible minimum and argmin per point, ties going to TIE_BREAK order."""
    n_points = totals.shape[1]
    best = np.full(n_points, np.inf)
    act = np.full(n_points, _NO_ACTION, dtype=np.int8)
    cols = {a: i for i, a in enumerate(mdp.ACTIONS)}
    for a in TIE_BREAK:
        t = totals[cols[a]]
        better = mask[:, cols[a]] & (t < best)
        best[better] = t[better]
        act[better] = a
    return best, act


def solve_bellman(ctx, grid, kernels=None, *, config_hash="",
                  terminal_shift=0.0):
    """Solve the finite-horizon problem on the grid.

    ``kernels`` defaults to :func:`prepare_kernels`.  ``terminal_shift`` adds
    a constant to the terminal cost before solving; it exists for the
    validation suite's linearity experiments.  Raises the feasibility error
    of :func:`gesopt.grid.feasibility_table` (with a state dump) if any point
    ever has an empty feasible set.
    """
    if kernels is None:
        kernels = prepare_kernels(ctx, grid)
    n_per = ctx.n_periods
    n_points = grid.n_points
    values = np.empty((n_per + 1, n_points))
    actions = np.empty((n_per, n_points), dtype=np.int8)
    provenance = np.empty((n_per, n_points), dtype=np.uint8)

    disc_n = math.exp(-ctx.costs.delta * n_per * ctx.dt)
    term = terminal_values(ctx, grid)
    if terminal_shift != 0.0:
        term = term + terminal_shift
    values[n_per] = disc_n * term

    invariant = kernels_time_invariant(ctx)
    mask = prov = None
    for n in reversed(range(n_per)):
        if mask is None or not invariant:
            mask, prov = feasibility_table(ctx, grid, n)
        totals = _action_totals(ctx, grid, kernels, n, values[n + 1])
        best, act = _select(totals, mask)
        if not np.isfinite(best).all():
            raise SolverError(f"non-finite value produced at period {n}")
        values[n] = best
        actions[n] = act
        provenance[n] = prov

    gh = grid.grid_hash()
    return (ValueTable(values, gh, config_hash),
            PolicyTable(actions, provenance, gh, config_hash))


def bellman_residual(ctx, grid, kernels, value_table, probes):
    """Residual V̂(n, m) − recomputed minimum at the given (n, m) probes.

    Replays the same vectorized sweep code on the stored next-period row, so
    a correctly stored table yields exact floating-point zeros.
    """
    probes = [(int(n), int(m)) for n, m in probes]
    out = np.empty(len(probes))
    by_period = {}
    for pos, (n, m) in enumerate(probes):
        if not 0 <= n < value_table.n_periods:
            raise SolverError(f"probe period {n} outside horizon")
        by_period.setdefault(n, []).append((pos, m))
    for n, items in by_period.items():
        mask, _ = feasibility_table(ctx, grid, n)
        totals = _action_totals(ctx, grid, kernels, n, value_table.values[n + 1])
        best, _ = _select(totals, mask)
        for pos, m in items:
            out[pos] = value_table.values[n, m] - best[m]
    return out


def policy_cost_to_go(ctx, grid, kernels, action_table):
    """Value of following a fixed action table, on the same kernels.

    ``action_table`` is (N, n_points) of actions; the result has the same
    layout as :class:`ValueTable` values.  Used for dominance checks against
    heuristic policies.
    """
    action_table = np.asarray(action_table)
    n_per = ctx.n_periods
    if action_table.shape != (n_per, grid.n_points):
        raise SolverError(
            f"action table shape {action_table.shape} does not match "
            f"({n_per}, {grid.n_points})")
    cols = {a: i for i, a in enumerate(mdp.ACTIONS)}
    idx = np.vectorize(cols.__getitem__, otypes=[np.intp])
    values = np.empty((n_per + 1, grid.n_points))
    values[n_per] = math.exp(-ctx.costs.delta * n_per * ctx.dt) \
        * terminal_values(ctx, grid)
    points = np.arange(grid.n_points)
    for n in reversed(range(n_per)):
        totals = _action_totals(ctx, grid, kernels, n, values[n + 1])
        values[n] = totals[idx(action_table[n]), points]
    return values


def wait_policy_table(ctx, grid):
    """Action table that waits wherever feasible, else falls back in TIE_BREAK order."""
    n_per = ctx.n_periods
    cols = {a: i for i, a in enumerate(mdp.ACTIONS)}
    actions = np.empty((n_per, grid.n_points), dtype=np.int8)
    invariant = kernels_time_invariant(ctx)
    row = None
    for n in range(n_per):
        if row is None or not invariant:
            mask, _ = feasibility_table(ctx, grid, n)
            row = np.full(grid.n_points, _NO_ACTION, dtype=np.int8)
            for a in TIE_BREAK:
                free = (row == _NO_ACTION) & mask[:, cols[a]]
                row[free] = a
        actions[n] = row
    return actions


# ---------------------------------------------------------------------------
# policy application


def policy_lookup(policy, grid, n, x):
    """Stored action at the grid cell containing ``x``."""
    if not 0 <= n < policy.n_periods:
        raise SolverError(f"period {n} outside policy horizon {policy.n_periods}")
    _, multi = project(grid, x)
    return int(policy.actions[n, grid.flat_index(multi)])


def table_policy(policy, grid):
    """Wrap a :class:`PolicyTable` as a callable ``(n, x) -> action``."""
    return lambda n, x: policy_lookup(policy, grid, n, x)


def wait_policy(ctx):
    """Heuristic: wait when feasible, otherwise first feasible in TIE_BREAK order."""

    def rule(n, x):
        feasible = mdp.feasible_actions(ctx, n, x)
        for a in TIE_BREAK:
            if a in feasible:
                return a
        raise mdp.MdpError("empty feasible set")  # pragma: no cover

    return rule


def greedy_policy(ctx):
    """Heuristic: cheapest immediate expected period cost among feasible actions.

    Myopic in the strict sense — terminal costs are ignored until the horizon
    ends — with exact ties resolved by TIE_BREAK order.
    """

    def rule(n, x):
        best = math.inf
        choice = None
        feasible = mdp.feasible_actions(ctx, n, x)
        for a in TIE_BREAK:
            if a not in feasible:
                continue
            cost = mdp.running_cost(ctx, n, x, a)
            if cost < best:
                best = cost
                choice = a
        if choice is None:  # pragma: no cover - feasible_actions raises first
            raise mdp.MdpError("empty feasible set")
        return choice

    return rule


@dataclass
class PathRecord:
    """One simulated trajectory under a policy, with per-period accounting."""

    times: np.ndarray  # (N+1,) hours
    r: np.ndarray  # (N+1,) deseasonalized residual demand
    r_tilde: np.ndarray  # (N+1,) seasonal mean + residual
    p: np.ndarray  # (N+1,) tank temperature °C
    qm: np.ndarray  # (N+1,) storage medium average °C
    qf: np.ndarray  # (N+1,) storage fluid average °C
    actions: np.ndarray  # (N,) int8
    period_costs: np.ndarray  # (N,) discounted EUR
    terminal_cost: float  # discounted EUR
    fallbacks: int

    @property
    def total_cost(self):
        return math.fsum(self.period_costs) + self.terminal_cost


def rollout(ctx, policy, x0, rng):
    """Simulate one controlled path; the engine behind all MC estimates.

    ``policy`` is a callable ``(n, x) -> action``.  If its action is
    infeasible at the realized continuous state (possible for table policies,
    whose actions were chosen at the projected grid point), the first
    feasible action in TIE_BREAK order is taken instead and the event is
    counted in ``fallbacks``.
    """
    n_per = ctx.n_periods
    x = x0
    shocks = rng.standard_normal((n_per, 3))
    times = np.arange(n_per + 1) * ctx.dt
    rs = np.empty(n_per + 1)
    ps = np.empty(n_per + 1)
    qms = np.empty(n_per + 1)
    qfs = np.empty(n_per + 1)
    acts = np.empty(n_per, dtype=np.int8)
    costs = np.empty(n_per)
    fallbacks = 0
    c_medium = ctx.reduced.c_medium
    c_fluid = ctx.reduced.c_fluid
    for n in range(n_per):
        rs[n], ps[n] = x.r, x.p
        qms[n] = float(c_medium @ x.y)
        qfs[n] = float(c_fluid @ x.y)
        a = policy(n, x)
        feasible = mdp.feasible_actions(ctx, n, x)
        if a not in feasible:
            fallbacks += 1
            a = next(b for b in TIE_BREAK if b in feasible)
        acts[n] = a
        disc = math.exp(-ctx.costs.delta * n * ctx.dt)
        costs[n] = disc * mdp.running_cost(ctx, n, x, a)
        x = mdp.transition(ctx, n, x, a, shocks[n])
    rs[n_per], ps[n_per] = x.r, x.p
    qms[n_per] = float(c_medium @ x.y)
    qfs[n_per] = float(c_fluid @ x.y)
    disc_end = math.exp(-ctx.costs.delta * n_per * ctx.dt)
    terminal = disc_end * mdp.terminal_cost(x, ctx.ies, ctx.costs, c_medium)
    # seasonal mean extended flat to the horizon end for display purposes
    mu = np.concatenate([ctx.mu_r, ctx.mu_r[-1:]]) if n_per else np.zeros(1)
    return PathRecord(times=times, r=rs, r_tilde=mu + rs, p=ps, qm=qms,
                      qf=qfs, actions=acts, period_costs=costs,
                      terminal_cost=terminal, fallbacks=fallbacks)


@dataclass
class PolicyEvaluation:
    """Monte Carlo estimate of a policy's expected discounted total cost."""

    mean: float
    se: float
    n_paths: int
    fallbacks: int  # infeasible-at-continuous-state events, summed over paths
    costs: np.ndarray = field(repr=False)


def evaluate_policy_mc(ctx, policy, x0, n_paths, seed, *, grid=None):
    """Estimate a policy's expected cost from ``x0`` over ``n_paths`` paths.

    ``policy`` may be a callable ``(n, x) -> action`` or a
    :class:`PolicyTable` (then ``grid`` is required for lookups).  Fallback
    events are counted, not silent — they measure projection-induced policy
    error.
    """
    if n_paths < 2:
        raise SolverError("need at least 2 paths for a standard error")
    if isinstance(policy, PolicyTable):
        if grid is None:
            raise SolverError("grid is required to evaluate a PolicyTable")
        policy = table_policy(policy, grid)
    rng = np.random.default_rng(seed)
    costs = np.empty(n_paths)
    fallbacks = 0
    for i in range(n_paths):
        record = rollout(ctx, policy, x0, rng)
        costs[i] = record.total_cost
        fallbacks += record.fallbacks
    mean = float(costs.mean())
    se = float(costs.std(ddof=1) / math.sqrt(n_paths))
    return PolicyEvaluation(mean=mean, se=se, n_paths=n_paths,
                            fallbacks=fallbacks, costs=costs)


# ---------------------------------------------------------------------------
# serialization


_TABLE_FORMAT = 1


def save_tables(value_table, policy_table, path):
    """Write a solve's value and policy tables to one NumPy zip archive.

    Layout: scalars ``format``, ``grid_hash``, ``config_hash``; arrays
    ``values`` (N+1 × points), ``actions`` and ``provenance`` (N × points).
    """
    if value_table.grid_hash != policy_table.grid_hash:
        raise SolverError("value and policy tables belong to different grids")
    payload = {
        "format": np.array(_TABLE_FORMAT),
        "grid_hash": np.array(value_table.grid_hash),
        "config_hash": np.array(value_table.config_hash),
        "values": value_table.values,
        "actions": policy_table.actions,
        "provenance": policy_table.provenance,
    }
    buf = io.BytesIO()
    np.savez_compressed(buf, **payload)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_tables(path, grid=None):
    """Read tables written by :func:`save_tables`; verify the grid hash."""
    with np.load(path, allow_pickle=False) as data:
        if int(data["format"]) != _TABLE_FORMAT:
            raise SolverError(f"unsupported table format {int(data['format'])}")
        gh = str(data["grid_hash"])
        ch = str(data["config_hash"])
        vt = ValueTable(data["values"].copy(), gh, ch)
        pt = PolicyTable(data["actions"].copy(), data["provenance"].copy(),
                         gh, ch)
    if grid is not None and grid.grid_hash() != gh:
        raise GridError("tables were built for a different grid (hash mismatch)")
    if vt.values.shape[0] != pt.actions.shape[0] + 1:
        raise SolverError("value/policy horizon mismatch in archive")
    return vt, pt
