"""JSON experiment configuration.

A configuration describes one optimization run::

    {
      "name": "frank10_ev",
      "risks": [
        {"marginal": {"kind": "exponential", "rate": 1.0},
         "premium": {"kind": "expected_value", "theta": 0.3}},
        {"marginal": {"kind": "pareto", "scale": 4.0, "shape": 5.0},
         "premium": {"kind": "expected_value", "theta": 0.5}}
      ],
      "copula": {"kind": "frank", "alpha": 10.0},
      "utility": {"kind": "exponential", "R": 1.0},
      "c": 4.0,
      "solver": {"outer_tol": 1e-9},
      "quadrature": {"mesh_points": 256},
      "outputs": {"dir": "out/frank10_ev", "figures": true}
    }

Everything except ``risks`` has a default.  A suite file lists runs, either
inline or as paths relative to the suite, and may give a ``base`` object
that every inline run is merged onto.
"""

from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass, fields

from .copula import FGM, Checkerboard, Frank, Independence
from .dist import Empirical, Exponential, Pareto
from .errors import ConfigError, DomainError
from .market import ExpectedValue, ExponentialUtility, StdDev, Variance
from .quad import QuadratureSpec
from .solver import SolverConfig
from .treaty import MarketModel

DEFAULT_R = 1.0
DEFAULT_C = 4.0


@dataclass
class ExperimentConfig:
    name: str
    market: MarketModel
    solver: SolverConfig
    quadrature: QuadratureSpec
    out_dir: str | None
    figures: bool
    raw: dict


def _num(obj, key, where, default=None):
    if key not in obj:
        if default is None:
            raise ConfigError(f"{where}: missing key '{key}'")
        return default
    val = obj[key]
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        raise ConfigError(f"{where}.{key}: expected a number, got {val!r}")
    return float(val)


def _kind(obj, where):
    if not isinstance(obj, dict):
        raise ConfigError(f"{where}: expected an object")
    kind = obj.get("kind")
    if not isinstance(kind, str):
        raise ConfigError(f"{where}: missing string key 'kind'")
    return kind.lower()


def _marginal(obj, where):
    kind = _kind(obj, where)
    if kind == "exponential":
        return Exponential(_num(obj, "rate", where, 1.0))
    if kind == "pareto":
        return Pareto(_num(obj, "scale", where, 4.0), _num(obj, "shape", where, 5.0))
    if kind == "empirical":
        data = obj.get("data")
        if not isinstance(data, list) or not data:
            raise ConfigError(f"{where}.data: expected a nonempty list of losses")
        return Empirical(tuple(float(v) for v in data))
    raise ConfigError(f"{where}.kind: unknown marginal '{kind}'")


def _premium(obj, where):
    kind = _kind(obj, where)
    theta = _num(obj, "theta", where)
    if theta < 0:
        raise ConfigError(f"{where}.theta: loading must be >= 0, got {theta}")
    if kind in ("expected_value", "ev"):
        return ExpectedValue(theta)
    if kind in ("std_dev", "sd", "standard_deviation"):
        return StdDev(theta)
    if kind == "variance":
        return Variance.linear(theta)
    raise ConfigError(f"{where}.kind: unknown premium principle '{kind}'")


def _copula(obj, where):
    if obj is None:
        return Independence()
    kind = _kind(obj, where)
    if kind == "independence":
        return Independence()
    if kind == "frank":
        return Frank(_num(obj, "alpha", where))
    if kind == "fgm":
        return FGM(_num(obj, "alpha", where))
    if kind == "checkerboard":
        if "grid" not in obj:
            raise ConfigError(f"{where}: missing key 'grid'")
        try:
            return Checkerboard(obj["grid"])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{where}.grid: {exc}") from exc
    raise ConfigError(f"{where}.kind: unknown copula '{kind}'")


def _utility(obj, where):
    if obj is None:
        return ExponentialUtility(DEFAULT_R)
    kind = _kind(obj, where)
    if kind != "exponential":
        raise ConfigError(f"{where}.kind: only exponential utility can be configured from JSON")
    R = _num(obj, "R", where, DEFAULT_R)
    if R <= 0:
        raise ConfigError(f"{where}.R: risk aversion must be positive")
    return ExponentialUtility(R)


def _overrides(cls, obj, where):
    if obj is None:
        return cls()
    if not isinstance(obj, dict):
        raise ConfigError(f"{where}: expected an object")
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(obj) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in obj.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def parse_config(raw, base_dir="."):
    """Build an ExperimentConfig from a parsed JSON object.

    Every validation failure surfaces as ConfigError naming the offending key.
    """
    try:
        return _parse(raw, base_dir)
    except ConfigError:
        raise
    except (DomainError, TypeError, ValueError) as exc:
        raise ConfigError(f"config: {exc}") from exc


def _parse(raw, base_dir):
    if not isinstance(raw, dict):
        raise ConfigError("config: expected a JSON object at top level")
    risks = raw.get("risks")
    if not isinstance(risks, list) or not risks:
        raise ConfigError("config.risks: expected a nonempty list")
    marginals, principles = [], []
    for k, r in enumerate(risks):
        where = f"risks[{k}]"
        if not isinstance(r, dict):
            raise ConfigError(f"{where}: expected an object")
        try:
            marginals.append(_marginal(r.get("marginal"), where + ".marginal"))
            principles.append(_premium(r.get("premium"), where + ".premium"))
        except DomainError as exc:
            raise ConfigError(f"{where}: {exc}") from exc
    try:
        copula = _copula(raw.get("copula"), "copula")
        utility = _utility(raw.get("utility"), "utility")
    except DomainError as exc:
        raise ConfigError(str(exc)) from exc
    c = _num(raw, "c", "config", DEFAULT_C)
    solver_raw = dict(raw.get("solver") or {})
    if "init" in raw:
        solver_raw["init"] = raw["init"]
    solver = _overrides(SolverConfig, solver_raw, "solver")
    quadrature = _overrides(QuadratureSpec, raw.get("quadrature"), "quadrature")
    market = MarketModel(tuple(marginals), tuple(principles), utility, c, copula)
    outputs = raw.get("outputs") or {}
    if not isinstance(outputs, dict):
        raise ConfigError("outputs: expected an object")
    out_dir = outputs.get("dir")
    if out_dir is not None and not os.path.isabs(out_dir):
        out_dir = os.path.join(base_dir, out_dir)
    name = str(raw.get("name", "run"))
    return ExperimentConfig(name, market, solver, quadrature, out_dir, bool(outputs.get("figures", True)), raw)


def read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"{path}: file not found") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc


def load_config(path):
    return parse_config(read_json(path), os.path.dirname(os.path.abspath(path)))


def merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_suite(path):
    """Raw run objects of a suite, each merged onto the suite's base."""
    raw = read_json(path)
    if not isinstance(raw, dict):
        raise ConfigError("suite: expected a JSON object")
    runs = raw.get("runs")
    if not isinstance(runs, list) or not runs:
        raise ConfigError("suite.runs: expected a nonempty list")
    base = raw.get("base") or {}
    here = os.path.dirname(os.path.abspath(path))
    out = []
    for k, r in enumerate(runs):
        if isinstance(r, str):
            out.append(read_json(os.path.join(here, r)))
        elif isinstance(r, dict):
            out.append(merge(base, r))
        else:
            raise ConfigError(f"suite.runs[{k}]: expected a path or an object")
        out[-1].setdefault("name", f"run{k + 1}")
    return raw.get("name", "suite"), out, here
