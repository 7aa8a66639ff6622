"""Sectioned ``key = value`` experiment configuration.

Example::

    [experiment]
    kind = run-flow
    seed = 3

    [grid]
    base = 32
    fiber = 16

Keys are addressed as ``section.key``.  ``#`` and ``;`` start comments.
Parsing collects every violation before failing.
"""

from __future__ import annotations

import difflib
import hashlib
from dataclasses import dataclass, field
from typing import Any, Callable, Optional

from .fibration import MODEL_KINDS

EXPERIMENT_KINDS = ("solve-base", "run-flow", "k3-family", "density-fit", "wp-check", "schwarz-check")
TORUS_MODEL = "torus"
IB_KINDS = ("Ib", "mIb", "IbStar")


class ConfigError(ValueError):
    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("invalid configuration:\n" + "\n".join(f"  - {v}" for v in self.violations))


def _positive(v):
    return None if v > 0 else "must be > 0"


def _at_least(n):
    def check(v):
        return None if v >= n else f"must be >= {n}"
    return check


def _even_at_least(n):
    def check(v):
        if v < n:
            return f"must be >= {n}"
        return None if v % 2 == 0 else "must be even"
    return check


def _unit_interval(v):
    return None if 0 < v <= 1 else "must lie in (0, 1]"


def _nonneg(v):
    return None if v >= 0 else "must be >= 0"


@dataclass(frozen=True)
class Param:
    kind: type
    default: Any = None
    check: Optional[Callable] = None
    choices: tuple = ()
    required: bool = False


SCHEMA = {
    "experiment.kind": Param(str, None, choices=EXPERIMENT_KINDS, required=True),
    "experiment.seed": Param(int, 0, _nonneg),
    "experiment.out": Param(str, "out"),
    "model.kind": Param(str, TORUS_MODEL, choices=(TORUS_MODEL,) + MODEL_KINDS),
    "model.m": Param(int, 1, _at_least(1)),
    "model.b": Param(int, None, _at_least(1)),
    "model.tau0": Param(complex, 1j),
    "model.c": Param(float, 0.3),
    "model.area": Param(float, 1.0, _positive),
    "model.amplitude": Param(float, 0.02, _nonneg),
    "model.eps_h": Param(float, 0.45, _positive),
    "grid.base": Param(int, 32, _even_at_least(8)),
    "grid.fiber": Param(int, 16, _even_at_least(4)),
    "grid.angular": Param(int, 32, _even_at_least(8)),
    "grid.rho_min": Param(float, -3.0),
    "grid.rho_max": Param(float, -0.2),
    "solver.tol": Param(float, 1e-10, _positive),
    "solver.max_iter": Param(int, 50, _at_least(1)),
    "solver.continuity_steps": Param(int, 8, _at_least(1)),
    "flow.t_max": Param(float, 12.0, _positive),
    "flow.dt": Param(float, 0.05, _positive),
    "flow.monitor_every": Param(float, 0.25, _positive),
    "flow.scheme": Param(str, "implicit", choices=("implicit", "rk4")),
    "flow.seed_kind": Param(str, "fiber", choices=("zero", "random", "fiber")),
    "flow.seed_amplitude": Param(float, 0.2, _nonneg),
    "family.t_min": Param(float, 1e-3, _unit_interval),
    "family.per_decade": Param(int, 3, _at_least(1)),
    "schwarz.beta": Param(float, 0.1, _positive),
    "schwarz.patch": Param(float, 0.5),
}


@dataclass
class ExperimentConfig:
    """Validated configuration; ``values`` maps ``section.key`` to typed values."""

    values: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.values[key]

    @property
    def kind(self) -> str:
        return self.values["experiment.kind"]

    def canonical(self) -> str:
        return "\n".join(f"{k} = {_render(self.values[k])}" for k in sorted(self.values)) + "\n"

    def hash(self) -> str:
        """First 16 hex digits of the SHA-256 of the canonical text."""
        return hashlib.sha256(self.canonical().encode("utf-8")).hexdigest()[:16]

    def with_overrides(self, **overrides) -> "ExperimentConfig":
        """Copy with ``section_key=value`` overrides (re-validated)."""
        vals = dict(self.values)
        for k, v in overrides.items():
            key = k.replace("__", ".")
            if key not in SCHEMA:
                raise ConfigError([f"unknown key {key!r}"])
            vals[key] = v
        errors = _validate(vals, {})
        if errors:
            raise ConfigError(errors)
        return ExperimentConfig(vals)


def _render(v) -> str:
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, complex):
        return repr(v)
    return str(v)


def _convert(raw: str, kind: type):
    if kind is str:
        return raw
    if kind is int:
        return int(raw)
    if kind is float:
        return float(raw)
    if kind is complex:
        return complex(raw.replace(" ", "").replace("i", "j"))
    raise TypeError(kind)


def _validate(vals: dict, lines: dict) -> list:
    errors = []

    def where(key):
        return f" (line {lines[key]})" if key in lines else ""

    for key, p in SCHEMA.items():
        v = vals.get(key)
        if v is None:
            if p.required:
                errors.append(f"missing required key {key!r}")
            continue
        if p.choices and v not in p.choices:
            errors.append(f"{key} = {v!r}{where(key)}: must be one of {', '.join(p.choices)}")
        if p.check is not None:
            msg = p.check(v)
            if msg:
                errors.append(f"{key} = {v!r}{where(key)}: {msg}")
    mk = vals.get("model.kind")
    if mk in IB_KINDS and vals.get("model.b") is None:
        errors.append(f"model.b is required when model.kind = {mk}")
    if mk in ("mI0", "mIb") and (vals.get("model.m") or 1) < 2:
        errors.append(f"model.m must be >= 2 when model.kind = {mk}")
    if complex(vals.get("model.tau0", 1j)).imag <= 0:
        errors.append(f"model.tau0{where('model.tau0')}: imaginary part must be > 0")
    rmin, rmax = vals.get("grid.rho_min"), vals.get("grid.rho_max")
    if rmin is not None and rmax is not None and not rmin < rmax:
        errors.append("grid.rho_min must be < grid.rho_max")
    if mk in IB_KINDS and rmax is not None and rmax >= 0:
        errors.append(f"grid.rho_max{where('grid.rho_max')}: Ib-type models need rho_max < 0")
    kind = vals.get("experiment.kind")
    if kind in ("run-flow", "k3-family", "schwarz-check") and mk not in (None, TORUS_MODEL):
        errors.append(f"experiment {kind} runs on product torus models (model.kind = torus)")
    if kind in ("density-fit", "wp-check") and mk == TORUS_MODEL:
        errors.append(f"experiment {kind} needs a Kodaira model kind (model.kind)")
    dt, mon = vals.get("flow.dt"), vals.get("flow.monitor_every")
    if dt and mon and dt > mon:
        errors.append("flow.dt must not exceed flow.monitor_every")
    return errors


def parse_config(text: str, defaults: Optional[dict] = None) -> ExperimentConfig:
    """Parse and validate; raises :class:`ConfigError` listing every violation.

    ``defaults`` supplies ``section.key`` values used when the text omits them.
    """
    errors = []
    raw = {}
    lines = {}
    section = None
    valid_keys = list(SCHEMA)
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].split(";", 1)[0].strip()
        if not stripped:
            continue
        if stripped.startswith("["):
            if not stripped.endswith("]") or len(stripped) < 3:
                errors.append(f"line {lineno}: malformed section header {stripped!r}")
                section = None
                continue
            section = stripped[1:-1].strip()
            if not any(k.startswith(section + ".") for k in SCHEMA):
                sections = sorted({k.split(".")[0] for k in SCHEMA})
                near = difflib.get_close_matches(section, sections, n=1)
                hint = f" (did you mean [{near[0]}]?)" if near else ""
                errors.append(f"line {lineno}: unknown section [{section}]{hint}")
            continue
        if "=" not in stripped:
            errors.append(f"line {lineno}: expected 'key = value', got {stripped!r}")
            continue
        key, value = (s.strip() for s in stripped.split("=", 1))
        if section is None and "." not in key:
            errors.append(f"line {lineno}: key {key!r} outside any section")
            continue
        full = key if "." in key and section is None else f"{section}.{key}"
        if full not in SCHEMA:
            near = difflib.get_close_matches(full, valid_keys, n=1)
            hint = f"; nearest valid key is {near[0]!r}" if near else ""
            errors.append(f"line {lineno}: unknown key {full!r}{hint}")
            continue
        if full in lines:
            errors.append(f"duplicate key {full!r} on lines {lines[full]} and {lineno}")
            continue
        lines[full] = lineno
        p = SCHEMA[full]
        try:
            raw[full] = _convert(value, p.kind)
        except ValueError:
            errors.append(f"line {lineno}: {full} = {value!r} is not a valid {p.kind.__name__}")
    vals = {k: p.default for k, p in SCHEMA.items()}
    vals.update(defaults or {})
    vals.update(raw)
    errors.extend(_validate(vals, lines))
    if errors:
        raise ConfigError(errors)
    return ExperimentConfig(vals)
