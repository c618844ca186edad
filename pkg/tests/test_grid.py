import math

import numpy as np
import pytest
from conftest import make_context, make_cons

import gesopt.grid as grid_mod
import gesopt.mdp as mdp
from gesopt.grid import (
    AxisGrid,
    GridError,
    StateGrid,
    build_axes,
    build_kernel,
    feasibility_table,
    kernel_cache_plan,
    kernel_row_for_state,
    load_kernel,
    project,
    save_kernel,
)
from gesopt.mor import ReducedSystem
from gesopt.numerics import gaussian_rect_table

SMALL_COUNTS = (5, 6, 3, 3, 3, 5)


@pytest.fixture(scope="module")
def small_grid(t1ctx):
    return build_axes(t1ctx.cons, t1ctx.reduced, SMALL_COUNTS,
                      dt=1.0, q_ground=t1ctx.q_ground)


# ---------------------------------------------------------------------------
# axes and projection


def test_axis_validation():
    with pytest.raises(GridError):
        AxisGrid("r", np.array([1.0, 1.0, 2.0]))
    with pytest.raises(GridError):
        AxisGrid("r", np.array([]))
    with pytest.raises(GridError):
        AxisGrid("r", np.array([0.0, np.inf]))


def test_axis_cells_follow_midpoints():
    ax = AxisGrid("p", np.array([0.0, 2.0, 6.0]))
    assert ax.cell(0) == (-math.inf, 1.0)
    assert ax.cell(1) == (1.0, 4.0)
    assert ax.cell(2) == (4.0, math.inf)
    assert np.allclose(ax.cell_edges()[1:-1], [1.0, 4.0])


def test_axis_locate_upper_inclusive():
    ax = AxisGrid("p", np.array([0.0, 2.0, 6.0]))
    # a value exactly on an inner edge belongs to the lower cell: (lo, hi]
    assert ax.locate(1.0) == 0
    assert ax.locate(np.nextafter(1.0, 2.0)) == 1
    assert ax.locate(4.0) == 1
    assert ax.locate(-50.0) == 0
    assert ax.locate(50.0) == 2
    assert list(ax.locate(np.array([0.5, 1.0, 3.0, 4.5]))) == [0, 0, 1, 2]


def test_axis_locate_matches_cell_membership():
    rng = np.random.default_rng(3)
    pts = np.sort(rng.uniform(-5, 5, size=9))
    ax = AxisGrid("r", pts)
    for v in rng.uniform(-8, 8, size=200):
        i = ax.locate(v)
        lo, hi = ax.cell(i)
        assert lo < v <= hi or (i == ax.n_points - 1 and v > lo)


def test_single_point_axis_covers_everything():
    ax = AxisGrid("y1", np.array([3.0]))
    assert ax.cell(0) == (-math.inf, math.inf)
    assert ax.locate(-1e9) == 0 and ax.locate(1e9) == 0


def test_project_fixed_point_and_tails(small_grid):
    flat = small_grid.n_points // 2 + 3
    x = small_grid.state(flat)
    point, multi = project(small_grid, x)
    assert np.array_equal(point, small_grid.point(flat))
    assert small_grid.flat_index(multi) == flat

    hot = mdp.State(x.r, 0.0, small_grid.axes[1].points[-1] + 50.0, x.y)
    _, multi_hot = project(small_grid, hot)
    assert multi_hot[1] == small_grid.axes[1].n_points - 1


def test_project_idempotent(small_grid):
    rng = np.random.default_rng(8)
    for _ in range(25):
        vec = np.array([rng.uniform(-20, 20), rng.uniform(20, 100),
                        *rng.normal(scale=30, size=4)])
        point, multi = project(small_grid, vec)
        point2, multi2 = project(small_grid, point)
        assert multi2 == multi
        assert np.array_equal(point2, point)


def test_state_grid_enumeration_bijective(small_grid):
    assert small_grid.shape == SMALL_COUNTS
    assert small_grid.n_points == int(np.prod(SMALL_COUNTS))
    assert small_grid.n_rp * small_grid.n_y == small_grid.n_points
    for flat in (0, 1, 17, small_grid.n_points - 1):
        assert small_grid.flat_index(small_grid.multi_index(flat)) == flat
    multi = (2, 3, 1, 0, 2, 4)
    flat = small_grid.flat_index(multi)
    iy = int(np.ravel_multi_index(multi[2:], small_grid.shape[2:]))
    assert flat == (multi[0] * small_grid.shape[1] + multi[1]) * small_grid.n_y + iy


def test_build_axes_uniform_examples(t1ctx):
    g = build_axes(t1ctx.cons, t1ctx.reduced, (9, 11, 3, 3, 3, 8),
                   dt=1.0, q_ground=t1ctx.q_ground)
    assert np.allclose(g.axes[1].points, np.arange(30.0, 96.0, 6.0))
    qs = g.axes[-1].points * t1ctx.reduced.qm_scale()
    assert np.allclose(qs, np.linspace(10.0, 30.0, 8))
    assert qs[1] == pytest.approx(10.0 + 20.0 / 7.0)


def test_build_axes_reference_scale(t1ctx):
    g = build_axes(t1ctx.cons, t1ctx.reduced, (9, 12, 5, 5, 5, 9),
                   dt=1.0, q_ground=t1ctx.q_ground)
    assert g.n_points == 121_500
    assert g.axes[0].points[0] == -16.7 and g.axes[0].points[-1] == 13.4
    assert g.axes[1].points[1] - g.axes[1].points[0] == pytest.approx(60.0 / 11.0)


def test_build_axes_single_point_axis(t1ctx):
    g = build_axes(t1ctx.cons, t1ctx.reduced, (5, 6, 1, 1, 1, 5),
                   dt=1.0, q_ground=t1ctx.q_ground)
    assert g.axes[2].n_points == 1
    assert g.axes[2].cell(0) == (-math.inf, math.inf)


def test_build_axes_degenerate_envelope_errors():
    # coordinate 0 is inert: never excited by inputs nor by the start state
    a_bar = np.diag([-0.5, -1.0, -2.0, -3.0])
    b = np.zeros((4, 2))
    b[1:, 0] = 0.1
    b[1:, 1] = 0.05
    fake = ReducedSystem(
        a_bar=a_bar, b=b, c_medium=np.array([0.0, 0.0, 0.0, 1.0]),
        c_fluid=np.array([0.0, 1.0, 0.0, 0.0]), c_outlet=None,
        hankel=np.ones(4), alignment=np.eye(4), t_matrix=np.eye(4),
        tinv_matrix=np.eye(4), uniform_dir=np.array([0.0, 1.0, 1.0, 1.0]),
        q_in_charge=40.0, dt_heat_pump=3.0)
    with pytest.raises(GridError, match="degenerate"):
        build_axes(make_cons(), fake, (5, 6, 3, 3, 3, 5), dt=1.0, q_ground=15.0)


# ---------------------------------------------------------------------------
# feasibility table


def test_feasibility_table_matches_scalar_rule(t1ctx, small_grid):
    mask, prov = feasibility_table(t1ctx, small_grid, 0)
    assert mask.shape == (small_grid.n_points, len(mdp.ACTIONS))
    rng = np.random.default_rng(4)
    cols = {a: i for i, a in enumerate(mdp.ACTIONS)}
    for flat in rng.integers(0, small_grid.n_points, size=150):
        x = small_grid.state(int(flat))
        allowed = mdp.feasible_actions(t1ctx, 0, x)
        table_says = tuple(a for a in mdp.ACTIONS if mask[flat, cols[a]])
        assert table_says == tuple(sorted(allowed))


def test_feasibility_provenance_bits(t1ctx, small_grid):
    mask, prov = feasibility_table(t1ctx, small_grid, 0)
    cols = {a: i for i, a in enumerate(mdp.ACTIONS)}
    ys = small_grid.y_points()
    y_next = ys @ t1ctx.y_matrix[-1].T + t1ctx.y_offset[-1]
    overfull = np.broadcast_to(
        (y_next @ t1ctx.reduced.c_medium > t1ctx.cons.q_hi)[None, :],
        (small_grid.n_rp, small_grid.n_y)).reshape(-1)
    blocked_by_storage = (prov & grid_mod.PROV_STORAGE_FULL) > 0
    assert np.array_equal(blocked_by_storage, overfull)
    assert not mask[blocked_by_storage, cols[-1]].any()
    assert blocked_by_storage.any()


def test_feasibility_table_raises_when_empty(toy_reduced):
    tight = make_context(toy_reduced, cons=make_cons(p_lo=89.3, p_hi=90.0))
    g = build_axes(tight.cons, toy_reduced, (3, 4, 1, 1, 1, 3),
                   dt=1.0, q_ground=tight.q_ground)
    with pytest.raises(mdp.MdpError, match="no feasible action"):
        feasibility_table(tight, g, 0)


# ---------------------------------------------------------------------------
# kernels


@pytest.fixture(scope="module")
def kernels(t1ctx, small_grid):
    return {a: build_kernel(t1ctx, small_grid, 0, a) for a in mdp.ACTIONS}


def test_kernel_rows_are_distributions(kernels, small_grid):
    rng = np.random.default_rng(5)
    for action, kern in kernels.items():
        for m in rng.integers(0, small_grid.n_points, size=40):
            cols, probs = kern.row(small_grid, int(m))
            assert np.all(probs >= 0.0)
            assert np.all(probs <= 1.0)
            assert abs(math.fsum(probs) - 1.0) <= 1e-8
            assert np.all(cols >= 0) and np.all(cols < small_grid.n_points)


def test_deterministic_kernel_single_atom(toy_reduced, small_grid):
    quiet = make_context(toy_reduced, sigma_r=0.0)
    for action in mdp.ACTIONS:
        kern = build_kernel(quiet, small_grid, 0, action)
        assert kern.kind == "deterministic"
        for m in (0, 17, small_grid.n_points - 1):
            cols, probs = kern.row(small_grid, m)
            assert len(cols) == 1 and probs[0] == 1.0


def test_deterministic_kernel_matches_noise_free_transition(
        toy_reduced, small_grid):
    quiet = make_context(toy_reduced, sigma_r=0.0)
    kern = build_kernel(quiet, small_grid, 0, -2)
    rng = np.random.default_rng(6)
    for m in rng.integers(0, small_grid.n_points, size=30):
        x = small_grid.state(int(m))
        x1 = mdp.transition(quiet, 0, x, -2, np.zeros(3))
        _, multi = project(small_grid, x1)
        cols, _ = kern.row(small_grid, int(m))
        assert cols[0] == small_grid.flat_index(multi)


def test_transition_batch_matches_scalar(t1ctx, small_grid):
    x = small_grid.state(small_grid.n_points // 3)
    shocks = np.random.default_rng(9).normal(size=(6, 3))
    for action in mdp.ACTIONS:
        r1, f1, p1, y1 = mdp.transition_batch(t1ctx, 0, x, action, shocks)
        for k in range(len(shocks)):
            ref = mdp.transition(t1ctx, 0, x, action, shocks[k])
            assert r1[k] == ref.r and f1[k] == ref.f and p1[k] == ref.p
            assert np.array_equal(y1, ref.y)


@pytest.mark.parametrize("action", [0, -1])
def test_kernel_row_matches_monte_carlo(t1ctx, small_grid, kernels, action):
    m = small_grid.flat_index((2, 3, 1, 1, 1, 2))
    x = small_grid.state(m)
    n_samples = 200_000
    rng = np.random.default_rng(2024 + action)
    r1, _, p1, y1 = mdp.transition_batch(
        t1ctx, 0, x, action, rng.normal(size=(n_samples, 3)))

    # all sampled storage states project to the kernel's deterministic image
    _, y_multi = project(small_grid, np.concatenate(([r1[0], p1[0]], y1)))
    iy = int(np.ravel_multi_index(y_multi[2:], small_grid.shape[2:]))
    assert iy == int(kernels[action].y_img[m % small_grid.n_y])

    i2 = small_grid.axes[0].locate(r1)
    j2 = small_grid.axes[1].locate(p1)
    rp = i2 * small_grid.shape[1] + j2
    freq = np.bincount(rp, minlength=small_grid.n_rp) / n_samples

    cols, probs = kernels[action].row(small_grid, m)
    dense = np.zeros(small_grid.n_points)
    dense[cols] = probs
    kern_rp = dense.reshape(small_grid.n_rp, small_grid.n_y).sum(axis=1)

    checked = 0
    for t in range(small_grid.n_rp):
        p = kern_rp[t]
        if p < 1e-6:
            continue
        se = math.sqrt(p * (1.0 - p) / n_samples)
        assert abs(freq[t] - p) <= 3.5 * se + 1e-12, (action, t, p, freq[t])
        checked += 1
    assert checked >= 5
    assert freq[kern_rp < 1e-6].sum() <= 1e-3


def test_kernel_blocks_replicated_independently(t1ctx, small_grid, kernels):
    """Re-derive a few rows from scratch with the quadrature primitive."""
    n = 0
    sd_r = float(t1ctx.sig_r[n])
    sd_p = float(t1ctx.sig_p[n])
    corr = float(t1ctx.rho[n])
    r_edges = small_grid.axes[0].cell_edges()
    p_edges = small_grid.axes[1].cell_edges()
    quantum = grid_mod._p_cell_quantum(small_grid, 100)
    ys = small_grid.y_points()
    rng = np.random.default_rng(12)
    for action in (0, 2, -1):
        const, coef_r, row_y = mdp.p_mean_affine(t1ctx, n, action)
        for m in rng.integers(0, small_grid.n_points, size=6):
            mi = small_grid.multi_index(int(m))
            r0 = small_grid.axes[0].points[mi[0]]
            p0 = small_grid.axes[1].points[mi[1]]
            iy = int(m) % small_grid.n_y
            base = t1ctx.decay_p * p0 + const + coef_r * r0
            shift = float(ys[iy] @ row_y)
            if action == -1:
                k = math.floor(shift / quantum)
                w = shift / quantum - k
                lo = gaussian_rect_table(t1ctx.decay_r * r0, sd_r,
                                         np.array([base + k * quantum]),
                                         sd_p, corr, r_edges, p_edges)[0]
                hi = gaussian_rect_table(t1ctx.decay_r * r0, sd_r,
                                         np.array([base + (k + 1) * quantum]),
                                         sd_p, corr, r_edges, p_edges)[0]
                expect = (1.0 - w) * lo / lo.sum() + w * hi / hi.sum()
            else:
                tab = gaussian_rect_table(t1ctx.decay_r * r0, sd_r,
                                          np.array([base + shift]), sd_p,
                                          corr, r_edges, p_edges)[0]
                expect = tab / tab.sum()
            cols, probs = kernels[action].row(small_grid, int(m))
            dense = np.zeros(small_grid.n_points)
            dense[cols] = probs
            got = dense.reshape(small_grid.n_rp, small_grid.n_y).sum(axis=1)
            assert np.allclose(got, expect.reshape(-1), atol=1e-12)


def test_kernel_row_for_state_agrees_at_grid_points(t1ctx, small_grid, kernels):
    m = small_grid.flat_index((1, 2, 1, 2, 0, 3))
    x = small_grid.state(m)
    for action in (0, 1, 2, -2):
        cols_a, probs_a = kernels[action].row(small_grid, m)
        cols_b, probs_b = kernel_row_for_state(t1ctx, small_grid, 0, action, x)
        dense_a = np.zeros(small_grid.n_points)
        dense_a[cols_a] = probs_a
        dense_b = np.zeros(small_grid.n_points)
        dense_b[cols_b] = probs_b
        assert np.allclose(dense_a, dense_b, atol=1e-12)
    # injection rows interpolate between shift nodes; on this deliberately
    # coarse grid the node spacing admits ~5e-4 of interpolation error
    cols_a, probs_a = kernels[-1].row(small_grid, m)
    cols_b, probs_b = kernel_row_for_state(t1ctx, small_grid, 0, -1, x)
    dense_a = np.zeros(small_grid.n_points)
    dense_a[cols_a] = probs_a
    dense_b = np.zeros(small_grid.n_points)
    dense_b[cols_b] = probs_b
    assert np.abs(dense_a - dense_b).max() <= 1e-3


def test_expected_values_match_materialized_rows(kernels, small_grid, t1ctx):
    rng = np.random.default_rng(7)
    values = rng.normal(size=small_grid.n_points)
    for action, kern in kernels.items():
        ev = kern.expected_values(small_grid, values)
        for m in rng.integers(0, small_grid.n_points, size=25):
            cols, probs = kern.row(small_grid, int(m))
            assert ev[m] == pytest.approx(float(probs @ values[cols]),
                                          rel=1e-12, abs=1e-12)
    quiet = make_context(t1ctx.reduced, sigma_r=0.0)
    kern = build_kernel(quiet, small_grid, 0, 1)
    ev = kern.expected_values(small_grid, values)
    for m in rng.integers(0, small_grid.n_points, size=25):
        cols, probs = kern.row(small_grid, int(m))
        assert ev[m] == float(probs @ values[cols])


def test_cache_plan_structure(t1ctx, small_grid):
    plan0 = kernel_cache_plan(small_grid, t1ctx, 0)
    assert plan0.n_blocks == small_grid.n_rp
    assert plan0.n_naive == small_grid.n_points
    # widening the storage axes does not change the shared table size
    wide = build_axes(t1ctx.cons, t1ctx.reduced, (5, 6, 5, 5, 5, 7),
                      dt=1.0, q_ground=t1ctx.q_ground)
    assert kernel_cache_plan(wide, t1ctx, 0).n_blocks == wide.n_rp

    plan1 = kernel_cache_plan(small_grid, t1ctx, -1)
    kern = build_kernel(t1ctx, small_grid, 0, -1)
    assert kern.stats["block_evals"] == plan1.n_blocks
    assert plan1.n_blocks == small_grid.n_rp * len(plan1.node_keys)


def test_cache_plan_shares_equal_shifts(t1ctx, toy_reduced):
    # two storage points whose return-flow shifts agree to well below one
    # quantum must share their shift nodes
    cons = make_cons()
    scale = toy_reduced.qm_scale()
    axes = [AxisGrid("r", np.linspace(cons.r_lo, cons.r_hi, 3)),
            AxisGrid("p", np.linspace(cons.p_lo, cons.p_hi, 4)),
            AxisGrid("y1", np.array([0.0])), AxisGrid("y2", np.array([0.0])),
            AxisGrid("y3", np.array([0.0])),
            AxisGrid("y4", np.array([20.0, 20.0 + 1e-7]) / scale)]
    g = StateGrid(tuple(axes))
    kern = build_kernel(t1ctx, g, 0, -1)
    assert kern.y_var_lo[0] == kern.y_var_lo[1]
    assert kern.y_var_hi[0] == kern.y_var_hi[1]
    assert len(kernel_cache_plan(g, t1ctx, -1).node_keys) == 2


def test_kernel_refinement_consistency(t1ctx, small_grid):
    """Halving every cell (offset doubling, so cells nest) must coarse-grain
    back to the coarse kernel; discrepancy is quadrature-level."""
    fine_axes = []
    for ax in small_grid.axes:
        if ax.n_points == 1:
            fine_axes.append(ax)
            continue
        step = ax.points[1] - ax.points[0]
        pts = np.sort(np.concatenate([ax.points - step / 4, ax.points + step / 4]))
        fine_axes.append(AxisGrid(ax.name, pts))
    fine = StateGrid(tuple(fine_axes))

    rng = np.random.default_rng(11)
    for action in (0, 2, -1):
        for _ in range(3):
            x = np.array([rng.uniform(-16, 13), rng.uniform(32, 88),
                          *small_grid.state(
                              int(rng.integers(small_grid.n_points))).y])
            cols_c, probs_c = kernel_row_for_state(t1ctx, small_grid, 0, action, x)
            coarse = np.zeros(small_grid.n_points)
            coarse[cols_c] = probs_c
            cols_f, probs_f = kernel_row_for_state(t1ctx, fine, 0, action, x)
            regrained = np.zeros(small_grid.n_points)
            for cf, pf in zip(cols_f, probs_f):
                vec = fine.point(int(cf))
                _, multi = project(small_grid, vec)
                regrained[small_grid.flat_index(multi)] += pf
            tv = 0.5 * np.abs(regrained - coarse).sum()
            assert tv <= 2e-2
            assert tv <= 1e-6  # in practice it is quadrature dust


def test_kernel_build_deterministic(t1ctx, small_grid):
    a = build_kernel(t1ctx, small_grid, 0, -1)
    b = build_kernel(t1ctx, small_grid, 0, -1)
    assert np.array_equal(a.blocks, b.blocks)
    assert np.array_equal(a.y_img, b.y_img)
    assert np.array_equal(a.y_w, b.y_w)


def test_kernel_serialization_roundtrip(t1ctx, small_grid, kernels, tmp_path):
    for action in (0, -1):
        path = tmp_path / f"kern_{action}.npz"
        save_kernel(kernels[action], path)
        back = load_kernel(path, small_grid)
        assert back.kind == kernels[action].kind
        assert np.array_equal(back.y_img, kernels[action].y_img)
        if back.blocks is not None:
            assert np.array_equal(back.blocks, kernels[action].blocks)
    quiet = make_context(t1ctx.reduced, sigma_r=0.0)
    kern = build_kernel(quiet, small_grid, 0, 0)
    path = tmp_path / "kern_det.npz"
    save_kernel(kern, path)
    back = load_kernel(path, small_grid)
    assert back.kind == "deterministic"
    assert np.array_equal(back.rp_img, kern.rp_img)

    other = build_axes(t1ctx.cons, t1ctx.reduced, (4, 5, 3, 3, 3, 4),
                       dt=1.0, q_ground=t1ctx.q_ground)
    with pytest.raises(GridError, match="hash"):
        load_kernel(tmp_path / "kern_0.npz", other)


def test_kernel_rejects_bad_arguments(t1ctx, small_grid):
    with pytest.raises(GridError):
        build_kernel(t1ctx, small_grid, 0, 7)
    with pytest.raises(GridError):
        build_kernel(t1ctx, small_grid, 99, 0)
