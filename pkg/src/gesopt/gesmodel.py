"""Finite-volume model of the geothermal storage (GES) cross-section.

The storage is a 2-D vertical slice: a soil/gravel body of size lx × ly with a
thin horizontal water channel (the pipe heat exchanger, "PHX") embedded at
mid-height.  Water flows through the channel in +x direction; heat spreads by
conduction everywhere and by first-order upwind advection inside the channel.
Boundaries: insulated top/left/right (homogeneous Neumann), a Robin exchange
with the surrounding ground at the bottom, an inlet condition on the channel's
left face and a free-outflow ("do nothing") condition on its right face.

Discretization: cell-centered finite volumes on a uniform rectangular grid,
harmonic-mean conductivities at material interfaces, per-cell volumetric heat
capacity.  The semi-discrete model is the linear time-invariant system

    x' = A x + B g,   outputs (mean medium, mean fluid, mean outlet) = C x

with B's two input channels (inlet temperature, ground temperature).  The
inlet temperature depends on the operating mode:

* ``charge``     — fixed inlet (hot water from the internal store),
* ``idle``       — inlet follows the mean fluid temperature (closed loop),
* ``discharge``  — inlet is the outlet temperature minus the heat-pump lift.

The idle/discharge loops are rank-1 feedback closures of the same assembly;
``a_mode`` materializes them.  All quantities are SI (meters, seconds, °C);
the model-reduction layer rescales time to hours.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

MODES = ("charge", "idle", "discharge")


class GesModelError(ValueError):
    pass


def _check_positive(name, value):
    if not (math.isfinite(value) and value > 0):
        raise GesModelError(f"{name} must be positive and finite, got {value!r}")
    return float(value)


@dataclass(frozen=True)
class Geometry:
    """Storage cross-section and grid resolution (meters).

    ``lz`` is the out-of-plane depth used for aggregate quantities; the 2-D
    model itself is per unit depth.  ``phx_height``/``phx_center`` place the
    water channel; ``n_phx`` is accepted for interface compatibility but only
    a single channel is supported here.
    """

    lx: float
    ly: float
    lz: float
    hx: float
    hy: float
    phx_height: float
    phx_center: float | None = None
    n_phx: int = 1

    def __post_init__(self):
        for name in ("lx", "ly", "lz", "hx", "hy", "phx_height"):
            _check_positive(name, getattr(self, name))
        if self.phx_center is None:
            object.__setattr__(self, "phx_center", self.ly / 2.0)
        if self.n_phx != 1:
            raise GesModelError("only a single heat-exchanger channel is supported")
        for extent, step, name in ((self.lx, self.hx, "hx"), (self.ly, self.hy, "hy")):
            ratio = extent / step
            if abs(ratio - round(ratio)) > 1e-9 * max(ratio, 1.0):
                raise GesModelError(f"{name} must divide the domain extent evenly")
        if self.phx_height < self.hy * (1.0 - 1e-9):
            raise GesModelError(
                "channel thinner than one cell row; refine hy or thicken the channel"
            )

    @property
    def nx(self):
        return int(round(self.lx / self.hx))

    @property
    def ny(self):
        return int(round(self.ly / self.hy))

    def fluid_rows(self):
        """Row indices occupied by the channel, snapped to whole cell rows.

        The channel is represented by ``max(1, round(phx_height/hy))`` full
        rows positioned as close to the nominal span as the grid allows; the
        fluid cross-section area is preserved exactly whenever ``phx_height``
        is a whole number of rows.
        """
        n_rows = max(1, int(round(self.phx_height / self.hy)))
        start = int(round(self.phx_center / self.hy - n_rows / 2.0))
        start = min(max(start, 1), self.ny - n_rows - 1)
        if start < 1 or start + n_rows > self.ny - 1:
            raise GesModelError("channel must leave at least one medium row above and below")
        return tuple(range(start, start + n_rows))


@dataclass(frozen=True)
class MaterialParams:
    """Densities, heat capacities and conductivities of medium and fluid (SI)."""

    rho_m: float
    cp_m: float
    kappa_m: float
    rho_f: float
    cp_f: float
    kappa_f: float

    def __post_init__(self):
        for name in ("rho_m", "cp_m", "kappa_m", "rho_f", "cp_f", "kappa_f"):
            _check_positive(name, getattr(self, name))

    @property
    def diffusivity_m(self):
        return self.kappa_m / (self.rho_m * self.cp_m)

    @property
    def diffusivity_f(self):
        return self.kappa_f / (self.rho_f * self.cp_f)


@dataclass(frozen=True)
class BoundaryParams:
    """Boundary data: ground coupling, flow speed and inlet laws.

    ``lambda_ground`` [W/(m² K)] may be zero (perfectly insulated bottom).
    ``q_ground`` is the ground temperature input level, ``q_in_charge`` the
    charging inlet temperature and ``dt_heat_pump`` the temperature lift the
    heat pump removes from the outlet stream during discharge; ``v_flow`` is
    the channel velocity (m/s, ≥ 0, +x direction).
    """

    lambda_ground: float
    q_ground: float
    v_flow: float
    q_in_charge: float
    dt_heat_pump: float

    def __post_init__(self):
        if not (math.isfinite(self.lambda_ground) and self.lambda_ground >= 0):
            raise GesModelError("lambda_ground must be nonnegative")
        if not (math.isfinite(self.v_flow) and self.v_flow >= 0):
            raise GesModelError("v_flow must be nonnegative")
        for name in ("q_ground", "q_in_charge", "dt_heat_pump"):
            if not math.isfinite(getattr(self, name)):
                raise GesModelError(f"{name} must be finite")


@dataclass
class FullOrderSystem:
    """Assembled semi-discrete GES model plus mode closures."""

    geometry: Geometry
    materials: MaterialParams
    boundary: BoundaryParams
    a_charge: sp.csr_matrix
    b: np.ndarray  # (n, 2): inlet channel, ground channel
    c_medium: np.ndarray
    c_fluid: np.ndarray
    c_outlet: np.ndarray
    is_fluid: np.ndarray  # (n,) bool
    _mode_cache: dict = field(default_factory=dict, repr=False)

    @property
    def n(self):
        return self.a_charge.shape[0]

    def feedback_row(self, mode):
        """Inlet feedback functional of a mode (None for charge)."""
        if mode == "charge":
            return None
        if mode == "idle":
            return self.c_fluid
        if mode == "discharge":
            return self.c_outlet
        raise GesModelError(f"unknown mode {mode!r}")

    def a_mode(self, mode):
        """System matrix with the mode's inlet feedback folded in (CSR)."""
        if mode not in MODES:
            raise GesModelError(f"unknown mode {mode!r}")
        if mode not in self._mode_cache:
            row = self.feedback_row(mode)
            if row is None:
                self._mode_cache[mode] = self.a_charge
            else:
                # sparse rank-1 product keeps the closure cheap on fine grids
                col = sp.csr_matrix(self.b[:, 0]).T
                rank1 = col @ sp.csr_matrix(row)
                self._mode_cache[mode] = (self.a_charge + rank1).tocsr()
        return self._mode_cache[mode]

    def input_values(self, mode):
        """Input vector g = (inlet component, ground temperature) of a mode."""
        bnd = self.boundary
        if mode == "charge":
            return np.array([bnd.q_in_charge, bnd.q_ground])
        if mode == "idle":
            return np.array([0.0, bnd.q_ground])
        if mode == "discharge":
            return np.array([-bnd.dt_heat_pump, bnd.q_ground])
        raise GesModelError(f"unknown mode {mode!r}")


def _harmonic(k1, k2):
    return 2.0 * k1 * k2 / (k1 + k2)


def assemble_full_order(geometry, materials, boundary, check_stability=False):
    """Assemble the finite-volume system for all operating modes.

    Returns a :class:`FullOrderSystem`.  With ``check_stability=True`` a dense
    eigenvalue check asserts that every mode matrix is strictly stable (only
    sensible for small grids; the reduction layer re-checks stability for free
    on large ones).
    """
    nx, ny = geometry.nx, geometry.ny
    n = nx * ny
    fluid_rows = geometry.fluid_rows()
    hx, hy = geometry.hx, geometry.hy

    is_fluid = np.zeros((ny, nx), dtype=bool)
    for j in fluid_rows:
        is_fluid[j, :] = True

    kappa = np.where(is_fluid, materials.kappa_f, materials.kappa_m)
    vol_heat = np.where(
        is_fluid,
        materials.rho_f * materials.cp_f,
        materials.rho_m * materials.cp_m,
    )

    def k_of(j, i):
        return j * nx + i

    rows, cols, vals = [], [], []
    b = np.zeros((n, 2))

    def add(k, kk, v):
        rows.append(k)
        cols.append(kk)
        vals.append(v)

    v_flow = boundary.v_flow
    for j in range(ny):
        for i in range(nx):
            k = k_of(j, i)
            rc = vol_heat[j, i]
            kap = kappa[j, i]

            # x-direction conduction
            if i > 0:
                kf = _harmonic(kap, kappa[j, i - 1])
                c = kf / (rc * hx * hx)
                add(k, k, -c)
                add(k, k_of(j, i - 1), c)
            if i < nx - 1:
                kf = _harmonic(kap, kappa[j, i + 1])
                c = kf / (rc * hx * hx)
                add(k, k, -c)
                add(k, k_of(j, i + 1), c)

            # y-direction conduction
            if j > 0:
                kf = _harmonic(kap, kappa[j - 1, i])
                c = kf / (rc * hy * hy)
                add(k, k, -c)
                add(k, k_of(j - 1, i), c)
            if j < ny - 1:
                kf = _harmonic(kap, kappa[j + 1, i])
                c = kf / (rc * hy * hy)
                add(k, k, -c)
                add(k, k_of(j + 1, i), c)

            if is_fluid[j, i]:
                # upwind advection (+x flow)
                if v_flow > 0:
                    add(k, k, -v_flow / hx)
                    if i > 0:
                        add(k, k_of(j, i - 1), v_flow / hx)
                if i == 0:
                    # inlet: Dirichlet diffusive flux through the half cell
                    # plus advective influx; both ride on input channel 0
                    c_dir = 2.0 * kap / (rc * hx * hx)
                    add(k, k, -c_dir)
                    b[k, 0] += c_dir
                    if v_flow > 0:
                        b[k, 0] += v_flow / hx
                # i == nx-1: do-nothing outlet (no diffusive term through the
                # right face; advective outflow already on the diagonal)

            if j == 0:
                # Robin bottom: ground coupling in series with half-cell conduction
                if boundary.lambda_ground > 0:
                    u = 1.0 / (1.0 / boundary.lambda_ground + hy / (2.0 * kap))
                    c = u / (rc * hy)
                    add(k, k, -c)
                    b[k, 1] += c

    a_charge = sp.csr_matrix(
        sp.coo_matrix((vals, (rows, cols)), shape=(n, n))
    )

    flat_fluid = is_fluid.reshape(-1)
    c_medium = np.where(~flat_fluid, 1.0, 0.0)
    c_medium /= c_medium.sum()
    c_fluid = np.where(flat_fluid, 1.0, 0.0)
    c_fluid /= c_fluid.sum()
    c_outlet = np.zeros(n)
    for j in fluid_rows:
        c_outlet[k_of(j, nx - 1)] = 1.0
    c_outlet /= c_outlet.sum()

    system = FullOrderSystem(
        geometry=geometry,
        materials=materials,
        boundary=boundary,
        a_charge=a_charge,
        b=b,
        c_medium=c_medium,
        c_fluid=c_fluid,
        c_outlet=c_outlet,
        is_fluid=flat_fluid,
    )

    if check_stability:
        for mode in MODES:
            lam = np.linalg.eigvals(system.a_mode(mode).toarray())
            if np.max(lam.real) >= 0:
                raise GesModelError(
                    f"mode {mode!r} matrix is not strictly stable "
                    f"(max Re λ = {np.max(lam.real):.3e})"
                )
    return system


def aggregate_output_rows(system, include_outlet=True):
    """Averaging output rows, recomputed from the cell classification.

    Returns the stacked array ``[medium; fluid(; outlet)]`` of shape
    ``(2 or 3, n)``.  Row sums are exactly 1 by construction — they are plain
    cell averages over the respective regions.
    """
    rows = [system.c_medium, system.c_fluid]
    if include_outlet:
        rows.append(system.c_outlet)
    return np.vstack(rows)


def dump_matrix_triplets(system, path, mode="charge"):
    """Write the mode matrix as '<row> <col> <value>' text triplets."""
    a = system.a_mode(mode).tocoo()
    with open(path, "w") as fh:
        fh.write(f"# {a.shape[0]} x {a.shape[1]} matrix, mode={mode}, nnz={a.nnz}\n")
        for r, c, v in zip(a.row, a.col, a.data):
            fh.write(f"{r} {c} {v:.17g}\n")


@dataclass
class SimResult:
    """Trajectory of the aggregate outputs plus the final full state."""

    times_h: np.ndarray
    q_medium: np.ndarray
    q_fluid: np.ndarray
    q_outlet: np.ndarray
    modes: np.ndarray  # mode label per recorded time
    x_final: np.ndarray


def simulate_full_order(system, schedule, x0, dt_step=10.0):
    """Integrate the full-order model over a piecewise-constant mode schedule.

    Parameters
    ----------
    schedule : sequence of (mode, duration_hours)
    x0 : float or (n,) array
        Uniform initial temperature or a full initial state.
    dt_step : float
        Implicit-Euler step in seconds (upper bound; each segment divides its
        duration into equal steps no longer than this).

    The integrator is backward Euler on the charge-mode matrix with a
    Sherman–Morrison correction for the rank-1 inlet feedback of the
    idle/discharge loops, so a single sparse LU covers all modes with the same
    step size.  Outputs are recorded after every step.
    """
    n = system.n
    x = np.full(n, float(x0)) if np.isscalar(x0) else np.asarray(x0, dtype=float).copy()
    if x.shape != (n,):
        raise GesModelError(f"x0 must be scalar or shape ({n},)")

    lu_cache = {}

    times = [0.0]
    qm = [float(system.c_medium @ x)]
    qf = [float(system.c_fluid @ x)]
    qo = [float(system.c_outlet @ x)]
    mode_log = [schedule[0][0] if schedule else "idle"]
    t_sec = 0.0

    eye = sp.identity(n, format="csc")
    for mode, duration_h in schedule:
        if mode not in MODES:
            raise GesModelError(f"unknown mode {mode!r}")
        duration_s = float(duration_h) * 3600.0
        if duration_s <= 0:
            continue
        n_steps = max(1, int(math.ceil(duration_s / dt_step - 1e-9)))
        h = duration_s / n_steps
        if h not in lu_cache:
            lu_cache[h] = splu((eye - h * system.a_charge).tocsc())
        lu = lu_cache[h]
        w = lu.solve(h * system.b[:, 0])  # Sherman–Morrison helper column

        row = system.feedback_row(mode)
        g = system.input_values(mode)
        bg = h * (system.b @ g)
        for _ in range(n_steps):
            y = lu.solve(x + bg)
            if row is not None:
                # solve (M - h b_in rowᵀ) x⁺ = rhs via Sherman–Morrison
                denom = 1.0 - row @ w
                if abs(denom) < 1e-12:
                    raise GesModelError("feedback closure is singular at this step size")
                y = y + (row @ y) / denom * w
            x = y
            t_sec += h
            times.append(t_sec / 3600.0)
            qm.append(float(system.c_medium @ x))
            qf.append(float(system.c_fluid @ x))
            qo.append(float(system.c_outlet @ x))
            mode_log.append(mode)

    return SimResult(
        times_h=np.array(times),
        q_medium=np.array(qm),
        q_fluid=np.array(qf),
        q_outlet=np.array(qo),
        modes=np.array(mode_log),
        x_final=x,
    )


_SYSTEM_FORMAT = 1


def save_full_order(system, path):
    """Write the assembled system to ``path`` (NumPy zip archive).

    Scalar blocks carry the geometry/material/boundary parameters so the
    file is self-contained; arrays mirror the CSR structure of the charge
    matrix plus the input and output rows.  Mode closures are rebuilt on
    demand after loading, so only the open-loop matrix is stored.
    """
    import io

    geo, mat, bnd = system.geometry, system.materials, system.boundary
    payload = {
        "format": np.array(_SYSTEM_FORMAT),
        "geometry": np.array([geo.lx, geo.ly, geo.lz, geo.hx, geo.hy,
                              geo.phx_height, geo.phx_center, float(geo.n_phx)]),
        "materials": np.array([mat.rho_m, mat.cp_m, mat.kappa_m,
                               mat.rho_f, mat.cp_f, mat.kappa_f]),
        "boundary": np.array([bnd.lambda_ground, bnd.q_ground, bnd.v_flow,
                              bnd.q_in_charge, bnd.dt_heat_pump]),
        "a_data": system.a_charge.data,
        "a_indices": system.a_charge.indices,
        "a_indptr": system.a_charge.indptr,
        "a_shape": np.array(system.a_charge.shape),
        "b": system.b,
        "c_medium": system.c_medium,
        "c_fluid": system.c_fluid,
        "c_outlet": system.c_outlet,
        "is_fluid": system.is_fluid,
    }
    buf = io.BytesIO()
    np.savez_compressed(buf, **payload)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_full_order(path):
    """Read a system written by :func:`save_full_order`."""
    with np.load(path, allow_pickle=False) as data:
        if int(data["format"]) != _SYSTEM_FORMAT:
            raise GesModelError(f"unsupported system format {int(data['format'])}")
        geo = data["geometry"]
        mat = data["materials"]
        bnd = data["boundary"]
        a = sp.csr_matrix(
            (data["a_data"], data["a_indices"], data["a_indptr"]),
            shape=tuple(int(v) for v in data["a_shape"]))
        return FullOrderSystem(
            geometry=Geometry(*(float(v) for v in geo[:7]), n_phx=int(geo[7])),
            materials=MaterialParams(*(float(v) for v in mat)),
            boundary=BoundaryParams(*(float(v) for v in bnd)),
            a_charge=a,
            b=data["b"],
            c_medium=data["c_medium"],
            c_fluid=data["c_fluid"],
            c_outlet=data["c_outlet"],
            is_fluid=data["is_fluid"].astype(bool),
        )
