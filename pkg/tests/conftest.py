"""Shared fixtures: a small but physically faithful storage model plus the
reference parameter set, reused by the grid/solver/simulation test modules.

The toy geometry keeps the real channel-transit time (1000 s) while shrinking
the soil block enough that full-order assembly and reduction run in seconds.
"""

import numpy as np
import pytest

import gesopt.mdp as mdp
from gesopt.gesmodel import (
    BoundaryParams,
    Geometry,
    MaterialParams,
    assemble_full_order,
)
from gesopt.mor import balanced_truncation
from gesopt.processes import OUParams

GAMMA_S = 3.27e-6
MU_R = -4.64e3 * 3600.0 * 1e-6  # MJ/h
SIGMA_R = 232.5e-6 * 3600.0 ** 1.5  # MJ/h^1.5
F0 = 2.25


def make_ies(**over):
    base = dict(m_p=4000.0, cp_w=4182.0, l_c=1.66e3, l_f=7.436e4, l_d=1.39e3,
                kappa_p=12.0, a_p=9.096, p_in=40.0, p_out=30.0, p_amb=20.0,
                gamma_per_s=GAMMA_S)
    base.update(over)
    return mdp.IesParams.from_exchange_rates(**base)


def make_cons(**over):
    base = dict(p_lo=30.0, p_hi=90.0, q_lo=10.0, q_hi=30.0,
                r_lo=-16.7, r_hi=13.4, epsilon=0.05)
    base.update(over)
    return mdp.ConstraintParams(**base)


def make_costs(**over):
    base = dict(xi_f=30.0, xi_hp=3.0, xi_p=5.0, xi_pen_p=6.7, xi_pen_q=0.45,
                xi_liq_p=0.0, xi_liq_q=0.0, p_ref=60.0, q_ref=20.0,
                m_q=2e5, cp_m=800.0, delta=0.0)
    base.update(over)
    return mdp.CostParams(**base)


def make_context(reduced_sys, *, sigma_r=SIGMA_R, sigma_f=0.0, delta=0.0,
                 mu_r=MU_R, mu_f=F0, cons=None, costs=None, ies=None,
                 n_periods=72):
    return mdp.build_context(
        reduced_sys, OUParams(beta=0.5, sigma=sigma_r),
        OUParams(beta=0.5, sigma=sigma_f), ies or make_ies(),
        cons or make_cons(), costs or make_costs(delta=delta), dt=1.0,
        n_periods=n_periods, q_ground=15.0, mu_r=mu_r, mu_f=mu_f)


@pytest.fixture(scope="session")
def toy_full_order():
    geo = Geometry(lx=2.0, ly=0.4, lz=2.0, hx=0.1, hy=0.02, phx_height=0.02)
    mat = MaterialParams(rho_m=2000.0, cp_m=800.0, kappa_m=1.59,
                         rho_f=998.0, cp_f=4182.0, kappa_f=0.60)
    bnd = BoundaryParams(lambda_ground=10.0, q_ground=15.0, v_flow=2e-3,
                         q_in_charge=40.0, dt_heat_pump=3.0)
    return assemble_full_order(geo, mat, bnd)


@pytest.fixture(scope="session")
def toy_reduced(toy_full_order):
    return balanced_truncation(toy_full_order, ell=4)


# A variant for Monte Carlo policy comparisons: the price axis is fine enough
# (2.5 K cells) that the chain and the continuous dynamics agree about cell
# crossings, the fast storage modes are frozen to single points, and the
# hotter heat-pump loop keeps every running cost nonnegative over the whole
# padded state box.
HOT_COUNTS = (5, 25, 1, 1, 1, 7)


@pytest.fixture(scope="session")
def hot_setup(toy_reduced):
    from gesopt.grid import build_axes
    from gesopt.solver import prepare_kernels, solve_bellman

    ctx = make_context(toy_reduced, ies=make_ies(p_in=60.0, p_out=50.0))
    grid = build_axes(ctx.cons, ctx.reduced, HOT_COUNTS, dt=1.0,
                      q_ground=ctx.q_ground)
    vt, pt = solve_bellman(ctx, grid, prepare_kernels(ctx, grid))
    return ctx, grid, vt, pt


@pytest.fixture(scope="session")
def t1ctx(toy_reduced):
    """Reference-parameter transition context on the toy reduced model."""
    return make_context(toy_reduced)


@pytest.fixture(scope="session")
def toy_cfg():
    """Reference config shrunk to the toy geometry and a tiny grid/horizon,
    so full pipeline runs finish in well under a second."""
    import dataclasses

    from gesopt.config import load_config, reference_config_path

    ref = load_config(reference_config_path())
    return dataclasses.replace(
        ref,
        geometry=dataclasses.replace(ref.geometry, lx=2.0, ly=0.4, lz=2.0,
                                     hy=0.02),
        time=dataclasses.replace(ref.time, n_periods=6),
        grid=dataclasses.replace(ref.grid, counts=(3, 4, 2, 1, 1, 2)),
        sim=dataclasses.replace(ref.sim, n_paths=16, seed=11),
    )
