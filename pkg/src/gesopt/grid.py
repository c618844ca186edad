"""State-space discretization and factored transition kernels.

The continuous state (r, p, y¹…y^ℓ) is projected onto a tensor-product grid
of per-axis points.  Each point owns the half-open cell between the midpoints
to its neighbours, ``(mid(i-1,i), mid(i,i+1)]``, with the first and last cell
extended to ∓∞ so every real value belongs to exactly one cell.

One-period transition kernels of the discretized chain factor exactly: the
storage coordinates move deterministically, so a row's support is the
Gaussian (r, p)-block tensored with a point mass on the storage image.  The
(r, p)-block of a source depends only on its (r, p) indices — plus, for the
injection action, the scalar return-flow shift of its storage state — which
is what makes whole-grid kernel construction cheap: blocks are computed once
per distinct key and shared across the storage axes.  Return-flow shifts are
snapped to a fine lattice and rows interpolate linearly between the two
bracketing node blocks, keeping the shared-block economy without biasing row
probabilities beyond ~1e-4.

Nothing in this module draws random numbers; identical inputs produce
bit-identical grids and kernels.
"""

from __future__ import annotations

import hashlib
import io
import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from . import mdp, mor
from .numerics import gaussian_rect_table, std_normal_cdf

__all__ = [
    "GridError",
    "AxisGrid",
    "StateGrid",
    "build_axes",
    "envelope_ranges",
    "project",
    "TransitionKernel",
    "KernelPlan",
    "kernel_cache_plan",
    "build_kernel",
    "kernel_row_for_state",
    "feasibility_table",
    "save_kernel",
    "load_kernel",
    "PROV_STORAGE_FULL",
    "PROV_STORAGE_EMPTY",
    "PROV_TANK_HOT",
    "PROV_TANK_COLD",
    "PROV_SPILL_SHUT",
    "PROV_SPILL_BAND",
]


class GridError(ValueError):
    pass


# provenance bits recording which rule removed at least one action at a point
PROV_STORAGE_FULL = 1  # injection barred: storage would overfill
PROV_STORAGE_EMPTY = 2  # extraction barred: storage would be overdrawn
PROV_TANK_HOT = 4  # a transfer action barred by the hot-band probability
PROV_TANK_COLD = 8  # a transfer action barred by the cold-band probability
PROV_SPILL_SHUT = 16  # over-spill withheld: tank not at risk
PROV_SPILL_BAND = 32  # over-spill withheld: endpoint leaves the band


@dataclass(frozen=True)
class AxisGrid:
    """One coordinate axis: representative points and their half-open cells."""

    name: str
    points: np.ndarray
    edges: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 1 or pts.size < 1:
            raise GridError(f"axis {self.name}: need a 1-d array of ≥ 1 points")
        if not np.all(np.isfinite(pts)):
            raise GridError(f"axis {self.name}: points must be finite")
        if pts.size > 1 and not np.all(np.diff(pts) > 0):
            raise GridError(f"axis {self.name}: points must be strictly increasing")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "edges", 0.5 * (pts[1:] + pts[:-1]))

    @property
    def n_points(self):
        return len(self.points)

    def locate(self, values):
        """Cell index of each value: upper-inclusive, tails absorbed.

        A value exactly on an inner edge belongs to the lower cell, matching
        the ``(lo, hi]`` cell convention.
        """
        idx = np.searchsorted(self.edges, np.asarray(values, dtype=float), side="left")
        return int(idx) if np.ndim(values) == 0 else idx

    def cell(self, i):
        """(lower, upper) bounds of cell ``i``; boundary cells are unbounded."""
        if not 0 <= i < self.n_points:
            raise GridError(f"axis {self.name}: cell {i} out of range")
        lo = -math.inf if i == 0 else float(self.edges[i - 1])
        hi = math.inf if i == self.n_points - 1 else float(self.edges[i])
        return lo, hi

    def cell_edges(self):
        """All n+1 cell boundaries including the ±∞ outer ones."""
        return np.concatenate(([-np.inf], self.edges, [np.inf]))


@dataclass(frozen=True)
class StateGrid:
    """Tensor product of one r-axis, one p-axis and ℓ storage axes.

    Flat enumeration is C-ordered over (r, p, y¹, …, y^ℓ), so the storage
    block index varies fastest; ``flat = rp_flat · n_y + y_flat``.
    """

    axes: tuple

    def __post_init__(self):
        if len(self.axes) < 3:
            raise GridError("need at least (r, p) plus one storage axis")
        object.__setattr__(self, "axes", tuple(self.axes))

    @property
    def ell(self):
        return len(self.axes) - 2

    @property
    def shape(self):
        return tuple(ax.n_points for ax in self.axes)

    @property
    def n_points(self):
        return int(np.prod(self.shape))

    @property
    def n_rp(self):
        return self.shape[0] * self.shape[1]

    @property
    def n_y(self):
        return int(np.prod(self.shape[2:]))

    def flat_index(self, multi):
        return int(np.ravel_multi_index(tuple(multi), self.shape))

    def multi_index(self, flat):
        return tuple(int(i) for i in np.unravel_index(int(flat), self.shape))

    def point(self, flat):
        multi = self.multi_index(flat)
        return np.array([ax.points[i] for ax, i in zip(self.axes, multi)])

    def y_points(self):
        """(n_y, ℓ) array of storage-axis combinations in flat y order."""
        prods = itertools.product(*(ax.points for ax in self.axes[2:]))
        return np.array(list(prods), dtype=float).reshape(self.n_y, self.ell)

    def coords(self, x):
        """Continuous coordinates of a state in axis order (r, p, y…)."""
        if isinstance(x, mdp.State):
            return np.concatenate(([x.r, x.p], np.asarray(x.y, dtype=float)))
        arr = np.asarray(x, dtype=float)
        if arr.shape != (len(self.axes),):
            raise GridError(f"state vector must have length {len(self.axes)}")
        return arr

    def state(self, flat, f=0.0):
        vec = self.point(flat)
        return mdp.State(float(vec[0]), float(f), float(vec[1]), vec[2:].copy())

    def grid_hash(self):
        digest = hashlib.sha256()
        for ax in self.axes:
            digest.update(ax.name.encode())
            digest.update(np.ascontiguousarray(ax.points).tobytes())
        return digest.hexdigest()


def project(grid, x):
    """Map a continuous state onto its grid cell.

    Returns ``(point, multi)`` where ``point`` is the representative
    coordinate vector (r, p, y…) and ``multi`` the per-axis cell indices.
    Values beyond the outermost points are absorbed by the boundary cells.
    """
    vec = grid.coords(x)
    multi = tuple(ax.locate(v) for ax, v in zip(grid.axes, vec))
    point = np.array([ax.points[i] for ax, i in zip(grid.axes, multi)])
    return point, multi


# ---------------------------------------------------------------------------
# axis construction


def envelope_ranges(reduced, *, dt, q_ground, q_lo, q_hi, leg_periods=240):
    """Per-coordinate (min, max) of the storage state over exercising runs.

    Drives the reduced model from cold, middle and hot uniform starts through
    long charge / discharge / idle legs and alternating blocks, recording the
    componentwise envelope of every state visited.  Deterministic.
    """
    half = max(1, leg_periods // 2)
    schedule = [(-1, leg_periods), (0, half), (1, leg_periods), (0, half),
                (-1, half), (1, half), (-1, half // 2), (1, half // 2)]
    lo = np.full(reduced.ell, np.inf)
    hi = np.full(reduced.ell, -np.inf)
    for q0 in (q_lo, 0.5 * (q_lo + q_hi), q_hi):
        _, states = mor.simulate_reduced(reduced, schedule,
                                         reduced.uniform_state(q0), dt, q_ground)
        lo = np.minimum(lo, states.min(axis=0))
        hi = np.maximum(hi, states.max(axis=0))
    return lo, hi


def build_axes(cons, reduced, counts, *, dt=1.0, q_ground, pad=0.1,
               leg_periods=240):
    """Construct the state grid for a constraint box and reduced storage model.

    ``counts`` lists the number of points per axis, ordered (r, p, y¹…y^ℓ).
    The r and p axes split their constraint intervals uniformly.  The last
    storage axis is the aligned mean-temperature coordinate and is spaced so
    its output values run uniformly from ``q_lo`` to ``q_hi``; the remaining
    storage axes have no physical scale, so their ranges come from
    deterministic exercising runs (:func:`envelope_ranges`), padded by
    ``pad`` × range on both sides.  A count of 1 yields a single cell
    covering all of ℝ on that axis.
    """
    counts = [int(c) for c in counts]
    if len(counts) != 2 + reduced.ell:
        raise GridError(f"need {2 + reduced.ell} axis counts, got {len(counts)}")
    if any(c < 1 for c in counts):
        raise GridError("axis counts must be ≥ 1")

    def spaced(name, lo, hi, count):
        if count == 1:
            return AxisGrid(name, np.array([0.5 * (lo + hi)]))
        return AxisGrid(name, np.linspace(lo, hi, count))

    axes = [spaced("r", cons.r_lo, cons.r_hi, counts[0]),
            spaced("p", cons.p_lo, cons.p_hi, counts[1])]

    lo_env, hi_env = envelope_ranges(reduced, dt=dt, q_ground=q_ground,
                                     q_lo=cons.q_lo, q_hi=cons.q_hi,
                                     leg_periods=leg_periods)
    for k in range(reduced.ell - 1):
        span = hi_env[k] - lo_env[k]
        if span <= 0:
            raise GridError(
                f"storage coordinate {k + 1} has a degenerate simulated range "
                f"[{lo_env[k]:.6g}, {hi_env[k]:.6g}]; cannot build its axis")
        axes.append(spaced(f"y{k + 1}", lo_env[k] - pad * span,
                           hi_env[k] + pad * span, counts[2 + k]))

    scale = reduced.qm_scale()
    q_pts = (np.array([0.5 * (cons.q_lo + cons.q_hi)]) if counts[-1] == 1
             else np.linspace(cons.q_lo, cons.q_hi, counts[-1]))
    last = q_pts / scale
    if scale < 0:
        last = last[::-1]
    axes.append(AxisGrid(f"y{reduced.ell}", last))
    return StateGrid(tuple(axes))


# ---------------------------------------------------------------------------
# feasibility over the whole grid


def feasibility_table(ctx, grid, n):
    """Feasible-action mask and provenance bits for every grid point.

    Vectorized counterpart of :func:`gesopt.mdp.feasible_actions` (agreement
    is pinned by tests).  Returns ``(mask, provenance)`` with ``mask`` of
    shape ``(n_points, len(ACTIONS))`` in :data:`gesopt.mdp.ACTIONS` order
    and ``provenance`` a uint8 bitmask of the rules that removed at least one
    action.  Raises :class:`gesopt.mdp.MdpError` if any point ends up with no
    feasible action.
    """
    cons = ctx.cons
    n_r, n_p = grid.shape[0], grid.shape[1]
    n_y = grid.n_y
    r_pts = grid.axes[0].points
    p_pts = grid.axes[1].points
    ys = grid.y_points()

    qm_next = {}
    for action in (-1, 1):
        y1 = ys @ ctx.y_matrix[action].T + ctx.y_offset[action]
        qm_next[action] = y1 @ ctx.reduced.c_medium

    # conditional tank means over the (r, p, y) product, per action
    sd = float(ctx.sig_p[n])
    prov = np.zeros((n_r, n_p, n_y), dtype=np.uint8)
    mask = np.zeros((n_r, n_p, n_y, len(mdp.ACTIONS)), dtype=bool)
    col = {a: i for i, a in enumerate(mdp.ACTIONS)}

    def band_probs(action):
        const, coef_r, row_y = mdp.p_mean_affine(ctx, n, action)
        mean = (ctx.decay_p * p_pts[None, :, None]
                + const + coef_r * r_pts[:, None, None]
                + (ys @ row_y)[None, None, :])
        if sd == 0.0 or action == -2:
            return (mean > cons.p_hi).astype(float), (mean < cons.p_lo).astype(float)
        hot = 1.0 - std_normal_cdf((cons.p_hi - mean) / sd)
        cold = std_normal_cdf((cons.p_lo - mean) / sd)
        return hot, cold

    hot0 = cold0 = None
    for action in mdp.TRANSFER_ACTIONS:
        hot, cold = band_probs(action)
        ok = (hot <= cons.epsilon) & (cold <= cons.epsilon)
        if action == 0:
            hot0, cold0 = hot, cold
        prov |= np.where(~ok & (hot > cons.epsilon), PROV_TANK_HOT, 0).astype(np.uint8)
        prov |= np.where(~ok & (cold > cons.epsilon), PROV_TANK_COLD, 0).astype(np.uint8)
        mask[:, :, :, col[action]] = ok

    mask[:, :, :, col[-1]] &= (qm_next[-1] <= cons.q_hi)[None, None, :]
    prov |= np.where((qm_next[-1] > cons.q_hi)[None, None, :],
                     PROV_STORAGE_FULL, 0).astype(np.uint8)
    mask[:, :, :, col[1]] &= (qm_next[1] >= cons.q_lo)[None, None, :]
    prov |= np.where((qm_next[1] < cons.q_lo)[None, None, :],
                     PROV_STORAGE_EMPTY, 0).astype(np.uint8)

    hot_s, cold_s = band_probs(-2)
    in_band = (hot_s == 0.0) & (cold_s == 0.0)
    needed = np.full_like(in_band, True) if cons.spill_always else hot0 > cons.epsilon
    mask[:, :, :, col[-2]] = in_band & needed
    prov |= np.where(~in_band, PROV_SPILL_BAND, 0).astype(np.uint8)
    prov |= np.where(in_band & ~needed, PROV_SPILL_SHUT, 0).astype(np.uint8)

    mask = mask.reshape(grid.n_points, len(mdp.ACTIONS))
    prov = prov.reshape(grid.n_points)
    dead = ~mask.any(axis=1)
    if dead.any():
        m = int(np.nonzero(dead)[0][0])
        vec = grid.point(m)
        raise mdp.MdpError(
            f"no feasible action at period {n} for grid point {m} "
            f"(r={vec[0]:.3f}, p={vec[1]:.3f}, "
            f"qm={float(ctx.reduced.c_medium @ vec[2:]):.3f}); "
            f"{int(dead.sum())} points total are infeasible")
    return mask, prov


# ---------------------------------------------------------------------------
# kernels


@dataclass
class TransitionKernel:
    """Factored one-period kernel for a single action.

    ``blocks[v]`` is the (r, p)-block at shift node ``v``: entry ``[s, t]``
    is the probability that the Gaussian pair moves from source rp-index
    ``s`` to target rp-cell ``t``.  A row for source ``(s, iy)`` places the
    blended block ``(1-w)·blocks[lo] + w·blocks[hi]`` on target storage index
    ``y_img[iy]``.  Deterministic kernels (no demand noise) store the target
    rp-cell directly in ``rp_img`` instead.
    """

    period: int
    action: int
    grid_hash: str
    kind: str  # "gauss" | "deterministic"
    y_img: np.ndarray  # (n_y,) flat storage target per source storage index
    blocks: np.ndarray | None = None  # (n_nodes, n_rp, n_rp)
    y_var_lo: np.ndarray | None = None  # (n_y,) lower node id
    y_var_hi: np.ndarray | None = None  # (n_y,) upper node id
    y_w: np.ndarray | None = None  # (n_y,) blend weight in [0, 1)
    node_shifts: np.ndarray | None = None  # (n_nodes,) shift value per node
    rp_img: np.ndarray | None = None  # (n_rp, n_y) deterministic rp target
    feasible: np.ndarray | None = None  # (n_points,) rows the solver may use
    stats: dict = field(default_factory=dict)

    def n_rows(self):
        return self.y_img.size * (self.rp_img.shape[0] if self.kind == "deterministic"
                                  else self.blocks.shape[1])

    def row(self, grid, m):
        """Materialize one row as (target flat indices, probabilities)."""
        if self.feasible is not None and not self.feasible[m]:
            raise GridError(f"row {m} was not built (action infeasible there)")
        n_y = grid.n_y
        s, iy = divmod(int(m), n_y)
        img = int(self.y_img[iy])
        if self.kind == "deterministic":
            return (np.array([int(self.rp_img[s, iy]) * n_y + img]),
                    np.array([1.0]))
        w = float(self.y_w[iy])
        probs = (1.0 - w) * self.blocks[int(self.y_var_lo[iy])][s]
        if w > 0.0:
            probs = probs + w * self.blocks[int(self.y_var_hi[iy])][s]
        cols = np.arange(probs.size) * n_y + img
        keep = probs > 0.0
        return cols[keep], probs[keep]

    def expected_values(self, grid, values):
        """Per-source expectation of ``values`` over the kernel, flat order."""
        n_y = grid.n_y
        vmat = np.asarray(values, dtype=float).reshape(-1, n_y)
        if self.kind == "deterministic":
            ev = vmat[self.rp_img, np.broadcast_to(self.y_img, self.rp_img.shape)]
            return ev.reshape(-1)
        vsel = vmat[:, self.y_img]  # (n_rp, n_y) target values at each image
        n_rp = self.blocks.shape[1]
        ev = np.zeros((n_rp, self.y_img.size))
        for v in np.unique(self.y_var_lo):
            sel = self.y_var_lo == v
            ev[:, sel] += (1.0 - self.y_w[sel]) * (self.blocks[v] @ vsel[:, sel])
        heavy = self.y_w > 0.0
        for v in np.unique(self.y_var_hi[heavy]):
            sel = heavy & (self.y_var_hi == v)
            ev[:, sel] += self.y_w[sel] * (self.blocks[v] @ vsel[:, sel])
        return ev.reshape(-1)


@dataclass(frozen=True)
class KernelPlan:
    """Predicted block sharing of a kernel build.

    ``n_blocks`` counts the distinct (r, p)-block evaluations the shared
    build performs; ``n_naive`` is what a row-by-row build would need (one
    block per feasible row).
    """

    action: int
    quantum: float
    n_rows: int
    n_blocks: int
    n_naive: int
    node_keys: tuple


def _p_cell_quantum(grid, quantize_div):
    p_axis = grid.axes[1]
    if p_axis.n_points < 2:
        return 1.0 / float(quantize_div)
    return float(np.min(np.diff(p_axis.points))) / float(quantize_div)


def _shift_nodes(ctx, grid, n, quantize_div):
    """Per-storage-point shift keys and the sorted node table for a = -1."""
    _, _, row_y = mdp.p_mean_affine(ctx, n, -1)
    shifts = grid.y_points() @ row_y
    quantum = _p_cell_quantum(grid, quantize_div)
    keys = np.floor(shifts / quantum).astype(np.int64)
    weights = shifts / quantum - keys
    needed = np.unique(np.concatenate([keys, keys + 1]))
    pos = {int(k): i for i, k in enumerate(needed)}
    var_lo = np.array([pos[int(k)] for k in keys], dtype=np.int32)
    var_hi = np.array([pos[int(k) + 1] for k in keys], dtype=np.int32)
    return needed, quantum, var_lo, var_hi, weights


def kernel_cache_plan(grid, ctx, action, n=0, quantize_div=100):
    """Block-sharing layout of :func:`build_kernel` without building it.

    For every action except injection the (r, p)-block depends only on the
    source (r, p)-indices, so the table has ``n_rp`` entries regardless of
    the storage grid.  Injection rows shift the tank mean by their state's
    return-flow value; blocks are keyed by that shift snapped to 1/
    ``quantize_div`` of a p-cell and rows blend the two bracketing nodes.
    """
    n_rows = grid.n_points
    if action == -1:
        needed, quantum, _, _, _ = _shift_nodes(ctx, grid, n, quantize_div)
        return KernelPlan(action, quantum, n_rows, grid.n_rp * len(needed),
                          n_rows, tuple(int(k) for k in needed))
    return KernelPlan(action, 0.0, n_rows, grid.n_rp, n_rows, (0,))


def build_kernel(ctx, grid, n, action, feasible=None, *, quantize_div=100):
    """Assemble the factored kernel of one (period, action) pair.

    ``feasible`` optionally restricts which rows the solver may read (the
    block tables themselves are shared across rows, so they are always built
    whole).  Rows sum to 1 within 1e-8 by construction; a block whose
    quadrature mass strays from 1 by more than 1e-6 raises, smaller residue
    is renormalized away.
    """
    if action not in mdp.ACTIONS:
        raise GridError(f"action {action} outside {mdp.ACTIONS}")
    if not 0 <= n < ctx.n_periods:
        raise GridError(f"period {n} outside horizon of {ctx.n_periods}")
    n_r, n_p = grid.shape[0], grid.shape[1]
    n_rp = n_r * n_p
    r_pts = grid.axes[0].points
    p_pts = grid.axes[1].points
    ys = grid.y_points()

    y1 = ys @ ctx.y_matrix[action].T + ctx.y_offset[action]
    y_multi = [grid.axes[2 + k].locate(y1[:, k]) for k in range(grid.ell)]
    y_img = np.ravel_multi_index(tuple(y_multi), grid.shape[2:]).astype(np.int32)

    sd_r = float(ctx.sig_r[n])
    sd_p = 0.0 if action == -2 else float(ctx.sig_p[n])
    corr = 0.0 if action == -2 else float(ctx.rho[n])
    const, coef_r, row_y = mdp.p_mean_affine(ctx, n, action)
    r_means = ctx.decay_r * r_pts

    if action == -1:
        nodes, quantum, var_lo, var_hi, weights = _shift_nodes(
            ctx, grid, n, quantize_div)
        node_shifts = nodes.astype(float) * quantum
    else:
        node_shifts = np.zeros(1)
        var_lo = np.zeros(grid.n_y, dtype=np.int32)
        var_hi = np.zeros(grid.n_y, dtype=np.int32)
        weights = np.zeros(grid.n_y)

    if sd_r == 0.0:
        # fully deterministic transition: every row is a single point mass
        r_next = r_means  # (n_r,)
        i2 = grid.axes[0].locate(r_next)
        shifts = ys @ row_y
        p_base = ctx.decay_p * p_pts[None, :] + const + coef_r * r_pts[:, None]
        rp_img = np.empty((n_rp, grid.n_y), dtype=np.int32)
        for iy in range(grid.n_y):
            j2 = grid.axes[1].locate(p_base + shifts[iy])
            rp_img[:, iy] = (i2[:, None] * n_p + j2).reshape(-1)
        kern = TransitionKernel(
            period=n, action=action, grid_hash=grid.grid_hash(),
            kind="deterministic", y_img=y_img, rp_img=rp_img,
            feasible=None if feasible is None else np.asarray(feasible, bool),
            stats={"block_evals": 0, "naive_evals": 0})
        return kern

    r_edges = grid.axes[0].cell_edges()
    p_edges = grid.axes[1].cell_edges()
    n_nodes = len(node_shifts)
    blocks = np.empty((n_nodes, n_rp, n_rp))
    chunk = max(1, 2_000_000 // (n_rp * max(1, len(p_edges))))
    for i1 in range(n_r):
        base = ctx.decay_p * p_pts + const + coef_r * r_pts[i1]  # (n_p,)
        means = (base[None, :] + node_shifts[:, None]).reshape(-1)  # (n_nodes·n_p,)
        tables = np.empty((means.size, n_r, n_p))
        for lo in range(0, means.size, chunk):
            tables[lo:lo + chunk] = gaussian_rect_table(
                r_means[i1], sd_r, means[lo:lo + chunk], sd_p, corr,
                r_edges, p_edges)
        tables = tables.reshape(n_nodes, n_p, n_rp)
        sums = tables.sum(axis=2)
        bad = np.abs(1.0 - sums) > 1e-6
        if bad.any():
            v, j = np.argwhere(bad)[0]
            raise GridError(
                f"kernel accuracy: block mass {sums[v, j]:.12f} deviates from 1 "
                f"by more than 1e-6 (action {action}, r-index {i1}, "
                f"p-index {j}, shift node {v})")
        tables /= sums[:, :, None]
        for j1 in range(n_p):
            blocks[:, i1 * n_p + j1, :] = tables[:, j1, :]

    kern = TransitionKernel(
        period=n, action=action, grid_hash=grid.grid_hash(), kind="gauss",
        y_img=y_img, blocks=blocks, y_var_lo=var_lo, y_var_hi=var_hi,
        y_w=weights, node_shifts=node_shifts,
        feasible=None if feasible is None else np.asarray(feasible, bool),
        stats={"block_evals": n_nodes * n_rp, "naive_evals": grid.n_points})
    return kern


def kernel_row_for_state(ctx, grid, n, action, x, *, exact_shift=True):
    """One kernel row from an arbitrary continuous source state.

    Used by refinement and Monte Carlo cross-checks; the (r, p)-block is
    evaluated at the state's exact coordinates (no shift snapping unless
    ``exact_shift`` is False), so the row is the quadrature-exact law of
    ``transition`` followed by projection.
    """
    vec = grid.coords(x)
    r0, p0, y0 = vec[0], vec[1], vec[2:]
    y1 = ctx.y_matrix[action] @ y0 + ctx.y_offset[action]
    multi = tuple(grid.axes[2 + k].locate(y1[k]) for k in range(grid.ell))
    img = int(np.ravel_multi_index(multi, grid.shape[2:]))

    const, coef_r, row_y = mdp.p_mean_affine(ctx, n, action)
    shift = float(row_y @ y0)
    if not exact_shift and action == -1:
        quantum = _p_cell_quantum(grid, 100)
        shift = math.floor(shift / quantum) * quantum
    m_r = ctx.decay_r * r0
    m_p = ctx.decay_p * p0 + const + coef_r * r0 + shift
    sd_r = float(ctx.sig_r[n])
    sd_p = 0.0 if action == -2 else float(ctx.sig_p[n])
    corr = 0.0 if action == -2 else float(ctx.rho[n])

    n_y = grid.n_y
    if sd_r == 0.0:
        i2 = grid.axes[0].locate(m_r)
        j2 = grid.axes[1].locate(m_p)
        return (np.array([(i2 * grid.shape[1] + j2) * n_y + img]),
                np.array([1.0]))
    table = gaussian_rect_table(m_r, sd_r, np.array([m_p]), sd_p, corr,
                                grid.axes[0].cell_edges(),
                                grid.axes[1].cell_edges())[0].reshape(-1)
    total = table.sum()
    if abs(1.0 - total) > 1e-6:
        raise GridError(f"kernel accuracy: row mass {total:.12f} deviates from 1")
    table /= total
    cols = np.arange(table.size) * n_y + img
    keep = table > 0.0
    return cols[keep], table[keep]


# ---------------------------------------------------------------------------
# serialization


_KERNEL_FORMAT = 1


def save_kernel(kernel, path):
    """Write a kernel to ``path`` (NumPy zip archive, format documented here).

    Header scalars: ``format``, ``period``, ``action``, ``kind``,
    ``grid_hash``; body arrays mirror the :class:`TransitionKernel` fields.
    """
    payload = {
        "format": np.array(_KERNEL_FORMAT),
        "period": np.array(kernel.period),
        "action": np.array(kernel.action),
        "kind": np.array(kernel.kind),
        "grid_hash": np.array(kernel.grid_hash),
        "y_img": kernel.y_img,
    }
    for name in ("blocks", "y_var_lo", "y_var_hi", "y_w", "node_shifts",
                 "rp_img", "feasible"):
        value = getattr(kernel, name)
        if value is not None:
            payload[name] = value
    buf = io.BytesIO()
    np.savez_compressed(buf, **payload)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_kernel(path, grid=None):
    """Read a kernel written by :func:`save_kernel`; verify the grid hash."""
    with np.load(path, allow_pickle=False) as data:
        if int(data["format"]) != _KERNEL_FORMAT:
            raise GridError(f"unsupported kernel format {int(data['format'])}")
        fields = {name: data[name] for name in data.files
                  if name not in ("format", "period", "action", "kind", "grid_hash")}
        kern = TransitionKernel(
            period=int(data["period"]), action=int(data["action"]),
            grid_hash=str(data["grid_hash"]), kind=str(data["kind"]),
            **fields)
    if grid is not None and grid.grid_hash() != kern.grid_hash:
        raise GridError("kernel was built for a different grid (hash mismatch)")
    return kern
