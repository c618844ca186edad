"""Experiment configuration: parsing, unit conversion, validation, hashing.

The file format is nested key–value text::

    section {
      key = value [unit]
      counts = [9, 12, 5, 5, 5, 9]
      # comments run to end of line
    }

Each field has one canonical unit in which the loaded value is stored; raw
per-second SI spellings are accepted and converted at load (e.g. a demand
level in J/s becomes MJ/h, a mean-reversion rate in 1/s becomes 1/h).  This
keeps the file free to quote instrument-sheet values verbatim while the rest
of the package sees a single unit regime (hours, °C, EUR, MJ).

Validation is not fail-fast: every schema, unit, and cross-field violation is
collected with its field path and reported in one :class:`ConfigError`.  The
canonical dump is deterministic — fixed section and key order, shortest
round-trip float reprs, canonical units, no timestamps — so its SHA-256 is a
machine-independent content hash, usable as a cache key.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, fields
from pathlib import Path

__all__ = [
    "ConfigError",
    "ConfigViolation",
    "ExperimentConfig",
    "load_config",
    "parse_config",
    "dump_config",
    "config_hash",
    "reference_config_path",
]


@dataclass(frozen=True)
class ConfigViolation:
    """One schema, unit, or cross-field problem at a field path."""

    field: str
    message: str

    def __str__(self):
        return f"{self.field}: {self.message}"


class ConfigError(ValueError):
    """Carries the complete list of violations found in one load."""

    def __init__(self, violations):
        self.violations = tuple(violations)
        super().__init__(
            "invalid configuration:\n"
            + "\n".join(f"  - {v}" for v in self.violations))


# ---------------------------------------------------------------------------
# unit registry: canonical spelling + accepted spellings with conversion
# factors into the canonical unit.  Spellings are compared after lowercasing
# and removing whitespace.

_H_PER_S = 1.0 / 3600.0
_MJ_H_PER_W = 3600.0 * 1e-6  # J/s -> MJ/h
_MJ_H15_PER_SI = 3600.0 ** 1.5 * 1e-6  # J/sqrt(s^3) -> MJ/h^1.5

_UNITS = {
    "length": ("m", {"m": 1.0}),
    "area": ("m^2", {"m^2": 1.0, "m2": 1.0}),
    "speed": ("m/s", {"m/s": 1.0}),
    "mass": ("kg", {"kg": 1.0}),
    "density": ("kg/m^3", {"kg/m^3": 1.0, "kg/m3": 1.0}),
    "specific_heat": ("J/(kg K)", {"j/(kgk)": 1.0}),
    "conductivity": ("J/(s m K)", {"j/(smk)": 1.0, "w/(mk)": 1.0}),
    "film": ("J/(s m^2 K)", {"j/(sm^2k)": 1.0, "w/(m^2k)": 1.0}),
    "power": ("J/s", {"j/s": 1.0, "w": 1.0}),
    "exchange": ("J/(K s)", {"j/(ks)": 1.0, "j/(sk)": 1.0, "w/k": 1.0}),
    "per_second": ("1/s", {"1/s": 1.0, "1/h": _H_PER_S}),
    "per_hour": ("1/h", {"1/h": 1.0, "1/s": 3600.0}),
    "temperature": ("c", {"c": 1.0, "degc": 1.0, "°c": 1.0}),
    "temperature_diff": ("K", {"k": 1.0}),
    "demand": ("MJ/h", {"mj/h": 1.0, "mj": 1.0, "j/s": _MJ_H_PER_W,
                        "w": _MJ_H_PER_W}),
    "demand_vol": ("MJ/h^1.5", {"mj/h^1.5": 1.0,
                                "j/sqrt(s^3)": _MJ_H15_PER_SI,
                                "j/s^1.5": _MJ_H15_PER_SI}),
    "fuel_price": ("EUR/l", {"eur/l": 1.0}),
    "fuel_vol": ("EUR/(l sqrt(h))", {"eur/(lsqrt(h))": 1.0,
                                     "eur/(lh^0.5)": 1.0}),
    "fuel_rate": ("l/h", {"l/h": 1.0}),
    "eur_per_k": ("EUR/K", {"eur/k": 1.0}),
    "eur_per_h": ("EUR/h", {"eur/h": 1.0}),
    "eur_per_kwh": ("EUR/kWh", {"eur/kwh": 1.0}),
    "hours": ("h", {"h": 1.0}),
    "bare": ("", {"": 1.0}),
}


@dataclass(frozen=True)
class _Field:
    kind: str  # "float" | "int" | "ints"
    unit: str = "bare"


_F = _Field

_SCHEMA = {
    "geometry": {
        "lx": _F("float", "length"), "ly": _F("float", "length"),
        "lz": _F("float", "length"), "hx": _F("float", "length"),
        "hy": _F("float", "length"), "phx_height": _F("float", "length"),
    },
    "materials": {
        "rho_m": _F("float", "density"), "cp_m": _F("float", "specific_heat"),
        "kappa_m": _F("float", "conductivity"),
        "rho_f": _F("float", "density"), "cp_f": _F("float", "specific_heat"),
        "kappa_f": _F("float", "conductivity"),
    },
    "boundary": {
        "lambda_ground": _F("float", "film"),
        "q_ground": _F("float", "temperature"),
        "v_flow": _F("float", "speed"),
        "q_in_charge": _F("float", "temperature"),
        "dt_heat_pump": _F("float", "temperature_diff"),
    },
    "demand": {
        "beta": _F("float", "per_hour"), "sigma": _F("float", "demand_vol"),
        "mu0": _F("float", "demand"),
    },
    "fuel": {
        "beta": _F("float", "per_hour"), "sigma": _F("float", "fuel_vol"),
        "f0": _F("float", "fuel_price"),
    },
    "ies": {
        "m_p": _F("float", "mass"), "cp_w": _F("float", "specific_heat"),
        "l_c": _F("float", "exchange"), "l_f": _F("float", "power"),
        "l_d": _F("float", "exchange"), "kappa_p": _F("float", "film"),
        "a_p": _F("float", "area"), "p_in": _F("float", "temperature"),
        "p_out": _F("float", "temperature"),
        "p_amb": _F("float", "temperature"),
        "gamma": _F("float", "per_second"),
    },
    "constraints": {
        "p_lo": _F("float", "temperature"), "p_hi": _F("float", "temperature"),
        "q_lo": _F("float", "temperature"), "q_hi": _F("float", "temperature"),
        "r_lo": _F("float", "demand"), "r_hi": _F("float", "demand"),
        "epsilon": _F("float"),
    },
    "costs": {
        "xi_f": _F("float", "fuel_rate"), "xi_hp": _F("float", "eur_per_k"),
        "xi_p": _F("float", "eur_per_h"),
        "xi_pen_p": _F("float", "eur_per_kwh"),
        "xi_pen_q": _F("float", "eur_per_kwh"),
        "xi_liq_p": _F("float", "eur_per_kwh"),
        "xi_liq_q": _F("float", "eur_per_kwh"),
        "p_ref": _F("float", "temperature"),
        "q_ref": _F("float", "temperature"),
        "m_q": _F("float", "mass"), "delta": _F("float", "per_hour"),
    },
    "time": {"n_periods": _F("int"), "dt": _F("float", "hours")},
    "reduction": {"ell": _F("int")},
    "grid": {"counts": _F("ints")},
    "sim": {
        "n_paths": _F("int"), "seed": _F("int"),
        "r0": _F("float", "demand"), "p0": _F("float", "temperature"),
        "qm0": _F("float", "temperature"),
    },
}


# ---------------------------------------------------------------------------
# typed section containers


@dataclass(frozen=True)
class GeometrySection:
    lx: float
    ly: float
    lz: float
    hx: float
    hy: float
    phx_height: float


@dataclass(frozen=True)
class MaterialSection:
    rho_m: float
    cp_m: float
    kappa_m: float
    rho_f: float
    cp_f: float
    kappa_f: float


@dataclass(frozen=True)
class BoundarySection:
    lambda_ground: float
    q_ground: float
    v_flow: float
    q_in_charge: float
    dt_heat_pump: float


@dataclass(frozen=True)
class DemandSection:
    beta: float
    sigma: float
    mu0: float


@dataclass(frozen=True)
class FuelSection:
    beta: float
    sigma: float
    f0: float


@dataclass(frozen=True)
class IesSection:
    m_p: float
    cp_w: float
    l_c: float
    l_f: float
    l_d: float
    kappa_p: float
    a_p: float
    p_in: float
    p_out: float
    p_amb: float
    gamma: float


@dataclass(frozen=True)
class ConstraintSection:
    p_lo: float
    p_hi: float
    q_lo: float
    q_hi: float
    r_lo: float
    r_hi: float
    epsilon: float


@dataclass(frozen=True)
class CostSection:
    xi_f: float
    xi_hp: float
    xi_p: float
    xi_pen_p: float
    xi_pen_q: float
    xi_liq_p: float
    xi_liq_q: float
    p_ref: float
    q_ref: float
    m_q: float
    delta: float


@dataclass(frozen=True)
class TimeSection:
    n_periods: int
    dt: float


@dataclass(frozen=True)
class ReductionSection:
    ell: int


@dataclass(frozen=True)
class GridSection:
    counts: tuple


@dataclass(frozen=True)
class SimSection:
    n_paths: int
    seed: int
    r0: float
    p0: float
    qm0: float


_SECTION_TYPES = {
    "geometry": GeometrySection, "materials": MaterialSection,
    "boundary": BoundarySection, "demand": DemandSection,
    "fuel": FuelSection, "ies": IesSection,
    "constraints": ConstraintSection, "costs": CostSection,
    "time": TimeSection, "reduction": ReductionSection,
    "grid": GridSection, "sim": SimSection,
}


@dataclass(frozen=True)
class ExperimentConfig:
    """One fully validated experiment; all values in canonical units."""

    geometry: GeometrySection
    materials: MaterialSection
    boundary: BoundarySection
    demand: DemandSection
    fuel: FuelSection
    ies: IesSection
    constraints: ConstraintSection
    costs: CostSection
    time: TimeSection
    reduction: ReductionSection
    grid: GridSection
    sim: SimSection


# ---------------------------------------------------------------------------
# parsing

_SECTION_RE = re.compile(r"^([A-Za-z_][A-Za-z0-9_]*)\s*\{$")
_KEY_RE = re.compile(r"^([A-Za-z_][A-Za-z0-9_]*)\s*=\s*(.*)$")
_NUM_RE = re.compile(r"^[+-]?(\d+\.?\d*|\.\d+)([eE][+-]?\d+)?$")
_INT_RE = re.compile(r"^[+-]?\d+$")


def _norm_unit(text):
    return "".join(text.split()).lower()


def _parse_scalar(raw, spec, path, violations):
    """Parse ``value [unit]`` for one field; returns None on any problem."""
    parts = raw.split(None, 1)
    if not parts:
        violations.append(ConfigViolation(path, "missing value"))
        return None
    token, unit_text = parts[0], parts[1] if len(parts) > 1 else ""
    if spec.kind == "int":
        if not _INT_RE.match(token):
            violations.append(ConfigViolation(
                path, f"expected an integer, got {token!r}"))
            return None
        if unit_text:
            violations.append(ConfigViolation(
                path, f"integer field takes no unit, got {unit_text!r}"))
            return None
        return int(token)
    if not _NUM_RE.match(token):
        violations.append(ConfigViolation(
            path, f"expected a number, got {token!r}"))
        return None
    value = float(token)
    canonical, accepted = _UNITS[spec.unit]
    factor = accepted.get(_norm_unit(unit_text))
    if factor is None:
        expect = canonical if canonical else "no unit"
        violations.append(ConfigViolation(
            path, f"unit {unit_text!r} not accepted (expected form: {expect})"))
        return None
    return value * factor


def _parse_int_list(raw, path, violations):
    raw = raw.strip()
    if not (raw.startswith("[") and raw.endswith("]")):
        violations.append(ConfigViolation(
            path, f"expected a bracketed integer list, got {raw!r}"))
        return None
    items = [s.strip() for s in raw[1:-1].split(",") if s.strip()]
    if not items or not all(_INT_RE.match(s) for s in items):
        violations.append(ConfigViolation(
            path, f"expected a bracketed integer list, got {raw!r}"))
        return None
    return tuple(int(s) for s in items)


def parse_config(text) -> ExperimentConfig:
    """Parse and validate configuration text; raises ConfigError with the
    complete violation list on any problem."""
    violations = []
    data = {}
    section = None
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        where = f"line {lineno}"
        if line == "}":
            if section is None:
                violations.append(ConfigViolation(where, "unmatched '}'"))
            section = None
            continue
        m = _SECTION_RE.match(line)
        if m:
            if section is not None:
                violations.append(ConfigViolation(
                    where, f"section {m.group(1)!r} opened inside "
                           f"{section!r}; nesting stops at one level"))
                continue
            section = m.group(1)
            if section not in _SCHEMA:
                violations.append(ConfigViolation(
                    section, "unknown section"))
            else:
                data.setdefault(section, {})
            continue
        m = _KEY_RE.match(line)
        if not m:
            violations.append(ConfigViolation(
                where, f"cannot parse {line!r}"))
            continue
        if section is None:
            violations.append(ConfigViolation(
                where, f"key {m.group(1)!r} outside any section"))
            continue
        if section not in _SCHEMA:
            continue  # already reported the unknown section once
        key, raw_value = m.group(1), m.group(2)
        path = f"{section}.{key}"
        spec = _SCHEMA[section].get(key)
        if spec is None:
            violations.append(ConfigViolation(path, "unknown key"))
            continue
        if key in data[section]:
            violations.append(ConfigViolation(path, "duplicate key"))
            continue
        if spec.kind == "ints":
            value = _parse_int_list(raw_value, path, violations)
        else:
            value = _parse_scalar(raw_value, spec, path, violations)
        if value is not None:
            data[section][key] = value
    if section is not None:
        violations.append(ConfigViolation(section, "unclosed section"))

    sections = {}
    for name, schema in _SCHEMA.items():
        got = data.get(name)
        if got is None:
            violations.append(ConfigViolation(name, "missing section"))
            continue
        missing = [k for k in schema if k not in got]
        for k in missing:
            violations.append(ConfigViolation(f"{name}.{k}", "missing key"))
        if not missing:
            sections[name] = _SECTION_TYPES[name](**got)

    if len(sections) == len(_SCHEMA):
        violations.extend(_cross_checks(sections))
    if violations:
        raise ConfigError(violations)
    return ExperimentConfig(**sections)


def _cross_checks(s):
    """All cross-field consistency rules, reported together."""
    out = []
    geo, cons, ies = s["geometry"], s["constraints"], s["ies"]

    for name in ("lx", "ly", "lz", "hx", "hy", "phx_height"):
        if getattr(geo, name) <= 0:
            out.append(ConfigViolation(f"geometry.{name}",
                                       "must be positive"))
    if s["time"].dt <= 0:
        out.append(ConfigViolation("time.dt", "must be positive"))
    if s["time"].n_periods < 1:
        out.append(ConfigViolation("time.n_periods", "must be at least 1"))
    if s["reduction"].ell < 1:
        out.append(ConfigViolation("reduction.ell", "must be at least 1"))
    if s["sim"].n_paths < 2:
        out.append(ConfigViolation(
            "sim.n_paths", "must be at least 2 (standard errors)"))

    gamma_per_h = ies.gamma * 3600.0
    if s["demand"].beta == gamma_per_h:
        out.append(ConfigViolation(
            "demand.beta", "must differ from ies.gamma (the closed-form "
            "transition moments are singular at beta_R = gamma)"))
    if ies.p_in <= ies.p_out:
        out.append(ConfigViolation(
            "ies.p_in", "heat-pump loop needs p_in > ies.p_out"))

    if not cons.p_lo < cons.p_hi:
        out.append(ConfigViolation("constraints.p_lo",
                                   "band needs p_lo < p_hi"))
    if not cons.q_lo < cons.q_hi:
        out.append(ConfigViolation("constraints.q_lo",
                                   "band needs q_lo < q_hi"))
    if not cons.r_lo < cons.r_hi:
        out.append(ConfigViolation("constraints.r_lo",
                                   "band needs r_lo < r_hi"))
    if not 0.0 < cons.epsilon < 1.0:
        out.append(ConfigViolation("constraints.epsilon",
                                   "must lie strictly between 0 and 1"))
    qg = s["boundary"].q_ground
    if not (cons.q_lo <= qg <= cons.q_hi):
        out.append(ConfigViolation(
            "boundary.q_ground", f"ground temperature {qg!r} must lie inside "
            "the storage band [constraints.q_lo, constraints.q_hi]"))

    counts = s["grid"].counts
    want = 2 + s["reduction"].ell
    if len(counts) != want:
        out.append(ConfigViolation(
            "grid.counts", f"needs {want} entries (demand, tank, and one per "
            f"reduced coordinate), got {len(counts)}"))
    elif any(c < 1 for c in counts):
        out.append(ConfigViolation("grid.counts",
                                   "every axis needs at least one point"))
    return out


def load_config(path) -> ExperimentConfig:
    """Load and validate a configuration file."""
    return parse_config(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# canonical dump and hashing


def _fmt_value(value):
    if isinstance(value, tuple):
        return "[" + ", ".join(str(v) for v in value) + "]"
    if isinstance(value, bool):  # pragma: no cover - no bool fields today
        raise TypeError("no boolean fields in the schema")
    if isinstance(value, int):
        return str(value)
    return repr(float(value))


def dump_config(cfg) -> str:
    """Serialize in canonical form: fixed order, canonical units, shortest
    round-trip floats.  ``parse_config(dump_config(c)) == c`` exactly."""
    lines = []
    for name, schema in _SCHEMA.items():
        lines.append(f"{name} {{")
        sec = getattr(cfg, name)
        for key, spec in schema.items():
            value = getattr(sec, key)
            unit = _UNITS[spec.unit][0]
            suffix = f" {unit}" if unit and spec.kind != "ints" else ""
            lines.append(f"  {key} = {_fmt_value(value)}{suffix}")
        lines.append("}")
        lines.append("")
    return "\n".join(lines)


def config_hash(cfg) -> str:
    """SHA-256 of the canonical dump: stable across machines and reruns."""
    return hashlib.sha256(dump_config(cfg).encode("utf-8")).hexdigest()


def reference_config_path() -> Path:
    """Path of the shipped reference parameter file."""
    return Path(__file__).with_name("data") / "paper_table1.cfg"


def _section_names():  # pragma: no cover - introspection helper
    return tuple(_SCHEMA)


def describe_schema() -> str:
    """Human-readable schema listing (field path, type, canonical unit)."""
    rows = []
    for name, schema in _SCHEMA.items():
        for key, spec in schema.items():
            unit = _UNITS[spec.unit][0] or "-"
            rows.append(f"{name}.{key}  {spec.kind}  [{unit}]")
    return "\n".join(rows)


def _check_dataclass_schema_match():  # pragma: no cover - import-time guard
    for name, cls in _SECTION_TYPES.items():
        expect = tuple(_SCHEMA[name])
        got = tuple(f.name for f in fields(cls))
        if expect != got:
            raise RuntimeError(f"schema/dataclass mismatch in {name}")


_check_dataclass_schema_match()
