"""Staged build pipeline with content-hash caching.

Order: assemble -> reduce -> kernel -> solve -> simulate -> validate.  Each
stage is keyed by the sha256 of exactly the config sections it reads plus
the byte hashes of its upstream artifacts, all recorded in
``manifest.json``.  A stage is reused when every input hash matches and its
artifact bytes are intact; otherwise it is rebuilt and a notice is
recorded.  Wall-clock times are logged but never hashed, so manifests are
portable across machines.

The section -> stage map is deliberately narrow: cost and fuel prices feed
only the solve and later stages, so retuning prices reuses the assembled
model, the reduced model and the transition kernels from cache.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import mdp, sim, validate as checks_mod
from .config import ExperimentConfig, config_hash, dump_config
from .gesmodel import (
    BoundaryParams,
    Geometry,
    MaterialParams,
    assemble_full_order,
    load_full_order,
    save_full_order,
)
from .grid import build_axes, load_kernel, save_kernel
from .mor import balanced_truncation, load_reduced, save_reduced
from .processes import OUParams
from .solver import (
    kernels_time_invariant,
    load_tables,
    prepare_kernels,
    save_tables,
    solve_bellman,
)


class PipelineError(RuntimeError):
    pass


MANIFEST_NAME = "manifest.json"
_MANIFEST_FORMAT = "gesopt-manifest-1"

STAGE_ORDER = ("assemble", "reduce", "kernel", "solve", "simulate", "validate")

_ALL_SECTIONS = tuple(f.name for f in dataclasses.fields(ExperimentConfig))

# config sections each stage actually reads (hash inputs, not build plumbing)
_SECTION_DEPS = {
    "assemble": ("geometry", "materials", "boundary"),
    "reduce": ("reduction",),
    "kernel": ("boundary", "demand", "ies", "constraints", "time", "grid"),
    "solve": ("boundary", "materials", "demand", "fuel", "ies",
              "constraints", "costs", "time", "grid"),
    "simulate": ("boundary", "materials", "demand", "fuel", "ies",
                 "constraints", "costs", "time", "grid", "sim"),
    "validate": _ALL_SECTIONS,
}

_STAGE_DEPS = {
    "assemble": (),
    "reduce": ("assemble",),
    "kernel": ("reduce",),
    "solve": ("reduce", "kernel"),
    "simulate": ("reduce", "solve"),
    "validate": ("assemble", "reduce", "kernel", "solve", "simulate"),
}

_KERNEL_FILES = tuple(f"kernel_{sim.ACTION_NAMES[a]}.npz" for a in mdp.ACTIONS)

_ARTIFACTS = {
    "assemble": ("full_order.npz",),
    "reduce": ("reduced.txt",),
    "kernel": _KERNEL_FILES,
    "solve": ("tables.npz",),
    "simulate": ("summary.csv", "sample_path.csv", "mc.json"),
    "validate": ("report.txt",),
}


# ---------------------------------------------------------------------------
# config -> domain objects


def build_geometry(cfg):
    g = cfg.geometry
    return Geometry(lx=g.lx, ly=g.ly, lz=g.lz, hx=g.hx, hy=g.hy,
                    phx_height=g.phx_height)


def build_materials(cfg):
    m = cfg.materials
    return MaterialParams(rho_m=m.rho_m, cp_m=m.cp_m, kappa_m=m.kappa_m,
                          rho_f=m.rho_f, cp_f=m.cp_f, kappa_f=m.kappa_f)


def build_boundary(cfg):
    b = cfg.boundary
    return BoundaryParams(lambda_ground=b.lambda_ground, q_ground=b.q_ground,
                          v_flow=b.v_flow, q_in_charge=b.q_in_charge,
                          dt_heat_pump=b.dt_heat_pump)


def build_ies(cfg):
    i = cfg.ies
    return mdp.IesParams.from_exchange_rates(
        m_p=i.m_p, cp_w=i.cp_w, l_c=i.l_c, l_f=i.l_f, l_d=i.l_d,
        kappa_p=i.kappa_p, a_p=i.a_p, p_in=i.p_in, p_out=i.p_out,
        p_amb=i.p_amb, gamma_per_s=i.gamma)


def build_constraints(cfg):
    c = cfg.constraints
    return mdp.ConstraintParams(p_lo=c.p_lo, p_hi=c.p_hi, q_lo=c.q_lo,
                                q_hi=c.q_hi, r_lo=c.r_lo, r_hi=c.r_hi,
                                epsilon=c.epsilon)


def build_costs(cfg):
    c = cfg.costs
    return mdp.CostParams(xi_f=c.xi_f, xi_hp=c.xi_hp, xi_p=c.xi_p,
                          xi_pen_p=c.xi_pen_p, xi_pen_q=c.xi_pen_q,
                          xi_liq_p=c.xi_liq_p, xi_liq_q=c.xi_liq_q,
                          p_ref=c.p_ref, q_ref=c.q_ref, m_q=c.m_q,
                          cp_m=cfg.materials.cp_m, delta=c.delta)


def build_transition_context(cfg, reduced):
    return mdp.build_context(
        reduced,
        OUParams(beta=cfg.demand.beta, sigma=cfg.demand.sigma),
        OUParams(beta=cfg.fuel.beta, sigma=cfg.fuel.sigma),
        build_ies(cfg), build_constraints(cfg), build_costs(cfg),
        dt=cfg.time.dt, n_periods=cfg.time.n_periods,
        q_ground=cfg.boundary.q_ground,
        mu_r=cfg.demand.mu0, mu_f=cfg.fuel.f0)


def build_grid(cfg, reduced):
    return build_axes(build_constraints(cfg), reduced,
                      tuple(cfg.grid.counts), dt=cfg.time.dt,
                      q_ground=cfg.boundary.q_ground)


def initial_state(cfg, reduced):
    """Path start: residual deviation r0, tank at p0, storage uniform at qm0."""
    return mdp.State(cfg.sim.r0, 0.0, cfg.sim.p0,
                     reduced.uniform_state(cfg.sim.qm0))


# ---------------------------------------------------------------------------
# hashing


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _section_text(cfg, name):
    """Canonical dump restricted to one section block."""
    out, inside = [], False
    for line in dump_config(cfg).splitlines():
        if line == f"{name} {{":
            inside = True
        if inside:
            out.append(line)
            if line == "}":
                break
    if not out:
        raise PipelineError(f"unknown config section {name!r}")
    return "\n".join(out) + "\n"


def _section_hash(cfg, name):
    return _sha256(_section_text(cfg, name).encode())


def _hash_files(workdir, names):
    h = hashlib.sha256()
    for name in names:
        path = workdir / name
        h.update(name.encode())
        h.update(b"\0")
        h.update(path.read_bytes())
        h.update(b"\0")
    return h.hexdigest()


def _stage_inputs(cfg, manifest, stage):
    inputs = {f"config:{s}": _section_hash(cfg, s)
              for s in _SECTION_DEPS[stage]}
    for dep in _STAGE_DEPS[stage]:
        entry = manifest["stages"].get(dep)
        if entry is None:
            raise PipelineError(f"stage {stage} scheduled before its "
                                f"dependency {dep} was built")
        inputs[f"artifact:{dep}"] = entry["output"]
    return inputs


def _is_fresh(entry, inputs, workdir, names):
    if entry is None:
        return False, "no cached artifacts"
    if entry.get("inputs") != inputs:
        prev = entry.get("inputs", {})
        changed = sorted(k for k in set(prev) | set(inputs)
                         if prev.get(k) != inputs.get(k))
        return False, "stale inputs: " + ", ".join(changed)
    missing = [n for n in names if not (workdir / n).exists()]
    if missing:
        return False, "missing artifacts: " + ", ".join(missing)
    if _hash_files(workdir, names) != entry.get("output"):
        return False, "artifact bytes changed on disk"
    return True, ""


# ---------------------------------------------------------------------------
# in-memory workspace shared by the stage runners


@dataclass
class _Workspace:
    cfg: ExperimentConfig
    workdir: Path
    full: object = None
    reduced: object = None
    ctx: object = None
    grid: object = None
    kernels: dict | None = None
    tables: tuple | None = None
    mc: dict | None = None
    checks: list | None = None

    def get_full(self):
        if self.full is None:
            self.full = load_full_order(self.workdir / "full_order.npz")
        return self.full

    def get_reduced(self):
        if self.reduced is None:
            self.reduced = load_reduced(self.workdir / "reduced.txt")
        return self.reduced

    def get_ctx(self):
        if self.ctx is None:
            self.ctx = build_transition_context(self.cfg, self.get_reduced())
        return self.ctx

    def get_grid(self):
        if self.grid is None:
            self.grid = build_grid(self.cfg, self.get_reduced())
        return self.grid

    def get_kernels(self):
        if self.kernels is None:
            grid = self.get_grid()
            loaded = {}
            for name in _KERNEL_FILES:
                ker = load_kernel(self.workdir / name, grid)
                loaded[int(ker.action)] = ker
            self.kernels = loaded
        return self.kernels

    def get_tables(self):
        if self.tables is None:
            self.tables = load_tables(self.workdir / "tables.npz",
                                      self.get_grid())
        return self.tables

    def get_mc(self):
        if self.mc is None:
            with open(self.workdir / "mc.json") as fh:
                self.mc = json.load(fh)
        return self.mc


def open_workspace(config, workdir):
    """Lazy accessor over the artifacts under ``workdir`` for this config."""
    return _Workspace(config, Path(workdir))


# ---------------------------------------------------------------------------
# stage runners


def _run_assemble(ws):
    full = assemble_full_order(build_geometry(ws.cfg),
                               build_materials(ws.cfg),
                               build_boundary(ws.cfg))
    save_full_order(full, ws.workdir / "full_order.npz")
    ws.full = full


def _run_reduce(ws):
    reduced = balanced_truncation(ws.get_full(), ws.cfg.reduction.ell)
    save_reduced(reduced, ws.workdir / "reduced.txt")
    ws.reduced = reduced


def _run_kernel(ws):
    ctx = ws.get_ctx()
    if not kernels_time_invariant(ctx):
        raise PipelineError("time-varying kernel sets are not supported "
                            "by the cached pipeline")
    kernels = prepare_kernels(ctx, ws.get_grid())
    for action, name in zip(mdp.ACTIONS, _KERNEL_FILES):
        save_kernel(kernels[action], ws.workdir / name)
    ws.kernels = kernels


def _run_solve(ws):
    ctx = ws.get_ctx()
    vt, pt = solve_bellman(ctx, ws.get_grid(), ws.get_kernels(),
                           config_hash=config_hash(ws.cfg))
    save_tables(vt, pt, ws.workdir / "tables.npz")
    ws.tables = (vt, pt)


def _run_simulate(ws):
    cfg = ws.cfg
    ctx, grid = ws.get_ctx(), ws.get_grid()
    _, pt = ws.get_tables()
    x0 = initial_state(cfg, ctx.reduced)
    paths = sim.simulate_paths(pt, ctx, x0, cfg.sim.n_paths, cfg.sim.seed,
                               grid=grid)
    sim.write_summary_csv(sim.summarize(paths), ws.workdir / "summary.csv")
    sim.write_path_csv(paths[0], ws.workdir / "sample_path.csv")
    costs = np.array([p.total_cost for p in paths])
    freq = sim.violation_frequency(paths, ctx.cons)
    min_step = min(float(np.diff(p.cum_costs).min()) if p.n_periods > 1
                   else 0.0 for p in paths)
    stats = {
        "n_paths": int(cfg.sim.n_paths),
        "seed": int(cfg.sim.seed),
        "start": {"r": cfg.sim.r0, "p": cfg.sim.p0, "qm": cfg.sim.qm0},
        "mean_cost_eur": float(costs.mean()),
        "se_cost_eur": float(costs.std(ddof=1) / np.sqrt(len(costs)))
                       if len(costs) > 1 else 0.0,
        "fallbacks": int(sum(p.fallbacks for p in paths)),
        "violation_freq": {k: float(v) for k, v in freq.items()},
        "min_cost_step_eur": min_step,
    }
    with open(ws.workdir / "mc.json", "w") as fh:
        json.dump(stats, fh, indent=2, sort_keys=True)
        fh.write("\n")
    ws.mc = stats


def _run_validate(ws):
    ctx, grid = ws.get_ctx(), ws.get_grid()
    vt, pt = ws.get_tables()
    checks = checks_mod.run_property_checks(ctx, grid, ws.get_kernels(),
                                            vt, pt, mc_stats=ws.get_mc())
    report = checks_mod.render_report(checks, vt)
    (ws.workdir / "report.txt").write_text(report)
    ws.checks = checks


_RUNNERS = {
    "assemble": _run_assemble,
    "reduce": _run_reduce,
    "kernel": _run_kernel,
    "solve": _run_solve,
    "simulate": _run_simulate,
    "validate": _run_validate,
}


# ---------------------------------------------------------------------------
# orchestration


@dataclass
class PipelineResult:
    status: int
    manifest: dict
    messages: list
    workdir: Path

    def artifact(self, name):
        return self.workdir / name


def _load_manifest(workdir):
    path = workdir / MANIFEST_NAME
    if path.exists():
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError:
            data = None
        if isinstance(data, dict) and data.get("format") == _MANIFEST_FORMAT:
            return data
    return {"format": _MANIFEST_FORMAT, "config_hash": "", "stages": {}}


def _write_manifest(workdir, manifest):
    text = json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    (workdir / MANIFEST_NAME).write_text(text)


def _closure(stages):
    needed = set()
    frontier = list(stages)
    while frontier:
        stage = frontier.pop()
        if stage in needed:
            continue
        needed.add(stage)
        frontier.extend(_STAGE_DEPS[stage])
    return tuple(s for s in STAGE_ORDER if s in needed)


def run_pipeline(config, stages=None, workdir="."):
    """Run the requested stages (and their dependency closure) under workdir.

    Returns a :class:`PipelineResult`; ``status`` is nonzero when the
    validate stage ran and reported a failing check.
    """
    requested = tuple(stages) if stages else STAGE_ORDER
    unknown = sorted(set(requested) - set(STAGE_ORDER))
    if unknown:
        raise PipelineError(f"unknown stages: {', '.join(unknown)}; "
                            f"choose from {', '.join(STAGE_ORDER)}")
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    manifest = _load_manifest(workdir)
    manifest["config_hash"] = config_hash(config)
    ws = _Workspace(config, workdir)
    messages = []
    for stage in _closure(requested):
        inputs = _stage_inputs(config, manifest, stage)
        entry = manifest["stages"].get(stage)
        names = _ARTIFACTS[stage]
        fresh, reason = _is_fresh(entry, inputs, workdir, names)
        if fresh:
            messages.append(f"{stage}: reused cached artifacts")
            continue
        note = f" ({reason})" if entry is not None else ""
        messages.append(f"{stage}: rebuilding{note}" if entry is not None
                        else f"{stage}: building")
        t0 = time.perf_counter()
        try:
            _RUNNERS[stage](ws)
        except PipelineError:
            raise
        except Exception as exc:
            raise PipelineError(f"stage {stage} failed: {exc}") from exc
        wall = time.perf_counter() - t0
        manifest["stages"][stage] = {
            "inputs": inputs,
            "output": _hash_files(workdir, names),
            "artifacts": list(names),
            "wall_s": round(wall, 3),
        }
        _write_manifest(workdir, manifest)
    status = 0
    if "validate" in requested or "validate" in _closure(requested):
        report = (workdir / "report.txt").read_text()
        n_fail = sum(line.startswith("FAIL ")
                     for line in report.splitlines())
        if n_fail:
            status = 1
            messages.append(f"validation result: {n_fail} failing check(s), "
                            f"see report.txt")
        else:
            messages.append("validation result: all checks passed")
    return PipelineResult(status, manifest, messages, workdir)
