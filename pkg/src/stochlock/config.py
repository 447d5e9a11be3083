"""YAML run configuration: parsing, validation and canonical digests.

Numbers may be written as ints, floats, exponent strings ("1e4") or exact
rationals ("1/64").  Every validation error names the offending field.

Example::

    seed: 7
    system:
      builtin: ex1
      params: {p: 1, s0: 1, a0: "1/64", b0: -0.1, c1: 0.5}
    averaging: {N: 2}
    classify: {mu: 0.5}
    simulate: {t0: 1, t_end: 1e4, dt: 0.05, n_paths: 5, x0: [0.3, 0.0]}
    ensemble: {n_paths: 400, dt: 0.05, t_s: 1, horizon: 1e4, delta: 0.05, eps1: 0.5,
               distance: norm}
    sweep: {parameter: b0, grid: [-1, -0.5, 0, 0.5], n_bisect: 3}
    monitor: {variant: auto, n_bins: 40}
"""

from __future__ import annotations

import hashlib
import json
from fractions import Fraction
from pathlib import Path
from typing import Any, Dict

import yaml

from .core import builtin
from .errors import ConfigError

SECTIONS = {
    "seed": None,
    "system": {"builtin", "params", "domain_radius", "truncation_order"},
    "averaging": {"N", "theta_modes", "s_modes", "v_max", "n_v", "ell"},
    "classify": {"mu", "p"},
    "truncated": {"u0", "phi0", "t_start", "t_end", "n_out"},
    "simulate": {"t0", "t_end", "dt", "n_paths", "x0", "scheme", "record", "plot"},
    "ensemble": {"n_paths", "dt", "t_s", "horizon", "delta", "eps1", "eps2", "distance",
                 "weight_exponent", "scheme", "horizon_cap", "C0", "ref_eps"},
    "sweep": {"parameter", "grid", "n_bisect", "level", "analytic"},
    "monitor": {"variant", "n_bins", "constants", "tilde_energy"},
}


def parse_number(value, where: str):
    """int/float/Fraction from YAML scalars; strings may be 'p/q' or float literals."""
    if isinstance(value, bool):
        raise ConfigError(f"{where}: expected a number, got {value!r}")
    if isinstance(value, (int, float, Fraction)):
        return value
    if isinstance(value, str):
        s = value.strip()
        try:
            if "/" in s:
                return Fraction(s)
            f = float(s)
            return int(f) if f.is_integer() and "." not in s and "e" not in s.lower() else f
        except (ValueError, ZeroDivisionError):
            pass
    raise ConfigError(f"{where}: expected a number, got {value!r}")


def _float(value, where):
    return float(parse_number(value, where))


def load_config(path) -> Dict[str, Any]:
    """Read and validate a YAML file; raises ConfigError with line/field diagnostics."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, str(path))


def parse_config(text: str, name: str = "<config>") -> Dict[str, Any]:
    try:
        raw = yaml.safe_load(text)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark
        loc = f"line {mark.line + 1}, column {mark.column + 1}" if mark else "unknown position"
        raise ConfigError(f"{name}: YAML error at {loc}: {exc.problem}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"{name}: YAML error: {exc}") from exc
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{name}: top level must be a mapping")
    return validate_config(raw, name)


def validate_config(raw: Dict[str, Any], name: str = "<config>") -> Dict[str, Any]:
    cfg: Dict[str, Any] = {}
    for key, val in raw.items():
        if key not in SECTIONS:
            raise ConfigError(f"{name}: unknown section {key!r} "
                              f"(allowed: {', '.join(sorted(SECTIONS))})")
        allowed = SECTIONS[key]
        if allowed is None:
            cfg[key] = val
            continue
        if val is None:
            val = {}
        if not isinstance(val, dict):
            raise ConfigError(f"{name}: section {key!r} must be a mapping")
        bad = set(val) - allowed
        if bad:
            raise ConfigError(f"{name}: {key}: unknown field(s) {sorted(bad)} "
                              f"(allowed: {sorted(allowed)})")
        cfg[key] = dict(val)
    seed = cfg.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ConfigError(f"{name}: seed must be a non-negative integer, got {seed!r}")
    cfg["seed"] = seed
    if "system" in cfg:
        sysc = cfg["system"]
        if "builtin" not in sysc:
            raise ConfigError(f"{name}: system.builtin is required")
        params = sysc.get("params") or {}
        if not isinstance(params, dict):
            raise ConfigError(f"{name}: system.params must be a mapping")
        sysc["params"] = {k: parse_number(v, f"system.params.{k}") for k, v in params.items()}
        if "domain_radius" in sysc:
            sysc["domain_radius"] = _float(sysc["domain_radius"], "system.domain_radius")
    for sec in ("simulate", "ensemble"):
        if sec in cfg:
            s = cfg[sec]
            for k in list(s):
                if k in ("t0", "t_end", "dt", "t_s", "delta", "eps1", "eps2", "weight_exponent",
                         "horizon_cap", "C0", "ref_eps"):
                    s[k] = None if s[k] is None else _float(s[k], f"{sec}.{k}")
            if "horizon" in s and s["horizon"] != "auto":
                s["horizon"] = _float(s["horizon"], f"{sec}.horizon")
            if "n_paths" in s:
                n = s["n_paths"]
                if isinstance(n, bool) or not isinstance(n, int) or n < 1:
                    raise ConfigError(f"{name}: {sec}.n_paths must be a positive integer, "
                                      f"got {n!r}")
            if "x0" in s:
                x0 = s["x0"]
                if not (isinstance(x0, (list, tuple)) and len(x0) == 2):
                    raise ConfigError(f"{name}: {sec}.x0 must be a pair of numbers")
                s["x0"] = [_float(v, f"{sec}.x0") for v in x0]
    if "sweep" in cfg:
        sw = cfg["sweep"]
        grid = sw.get("grid")
        if not isinstance(grid, (list, tuple)) or len(grid) == 0:
            raise ConfigError(f"{name}: sweep.grid must be a non-empty list")
        sw["grid"] = [_float(v, "sweep.grid") for v in grid]
    if "classify" in cfg and "mu" in cfg["classify"]:
        cfg["classify"]["mu"] = _float(cfg["classify"]["mu"], "classify.mu")
    return cfg


def system_from_config(cfg: Dict[str, Any], overrides=None):
    """Builtin SystemSpec described by the ``system`` section."""
    if "system" not in cfg:
        raise ConfigError("config has no 'system' section")
    sysc = cfg["system"]
    params = dict(sysc.get("params", {}))
    params.update(overrides or {})
    kw = {}
    if "domain_radius" in sysc:
        kw["domain_radius"] = sysc["domain_radius"]
    return builtin(sysc["builtin"], **kw, **params)


def _canonical(obj):
    if isinstance(obj, Fraction):
        return f"{obj.numerator}/{obj.denominator}"
    if isinstance(obj, dict):
        return {str(k): _canonical(v) for k, v in sorted(obj.items(), key=lambda kv: str(kv[0]))}
    if isinstance(obj, (list, tuple)):
        return [_canonical(v) for v in obj]
    return obj


def canonical_json(cfg) -> str:
    return json.dumps(_canonical(cfg), sort_keys=True, separators=(",", ":"))


def config_digest(cfg) -> str:
    """SHA-256 of the canonical JSON serialization of a validated config."""
    return hashlib.sha256(canonical_json(cfg).encode()).hexdigest()
