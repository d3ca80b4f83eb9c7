"""Run configuration: YAML sections, validation, and safe drive expressions.

A configuration has five sections::

    model:      {preset: ssep}            # or an explicit rate/decomposition
    drive:      {alpha0: "0.4 + 0.1*t", epsilon: 0.3, ell: 1.0}
    lattice:    {N: 64}
    solver:     {M: 256, T: 1.0, report: 0.1}
    experiment: {R: 200, seed: 0}

All times are macroscopic. The microscopic clock runs ``ell N^2`` times
faster; ``ell`` lives in the drive section and is logged in every manifest.
Drive entries are numbers or arithmetic expressions in ``t`` (reservoirs)
or ``t, x`` (field, profiles) built from a fixed set of functions.
"""
from __future__ import annotations

import ast
import copy
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
import yaml

from .errors import ConfigError
from .model import DriveSchedule, RateModel, rate_model_from_dict

SECTIONS = ("model", "drive", "lattice", "solver", "experiment")

# allowed keys and defaults per section (None: no default, key optional)
SCHEMA: dict[str, dict] = {
    "model": {"preset": None, "rate": None, "decomposition": None, "name": None},
    "drive": {
        "alpha0": None, "alpha1": None, "lambda0": None, "lambda1": None,
        "field": None, "field_bound": None, "epsilon": 1.0, "ell": 1.0,
    },
    "lattice": {"N": None, "initial": None, "method": "tree"},
    "solver": {
        "M": 256, "dt": None, "newton_tol": 1e-11, "startup_steps": 2,
        "t0": 0.0, "T": 1.0, "report": 0.1,
    },
    "experiment": {
        "Ns": None, "R": 20, "seed": 0, "checkpoints": None, "K": None,
        "C_fit": 0.05, "gamma": None, "workers": None, "nus": None, "times": None,
    },
}

DEFAULT_MODEL = {"preset": "ssep"}


# ----------------------------------------------------------------------------
# Expressions

_FUNCS = {
    "sin": np.sin, "cos": np.cos, "tan": np.tan, "exp": np.exp, "log": np.log,
    "sqrt": np.sqrt, "tanh": np.tanh, "sinh": np.sinh, "cosh": np.cosh, "abs": np.abs,
}
_CONSTS = {"pi": math.pi, "e": math.e}
_NODES = (
    ast.Expression, ast.BinOp, ast.UnaryOp, ast.Call, ast.Name, ast.Load, ast.Constant,
    ast.Add, ast.Sub, ast.Mult, ast.Div, ast.Pow, ast.USub, ast.UAdd,
)


def _check_expr(src: str, variables: tuple[str, ...]) -> None:
    try:
        tree = ast.parse(src, mode="eval")
    except SyntaxError as exc:
        raise ConfigError(f"cannot parse expression {src!r}: {exc.msg}") from None
    for node in ast.walk(tree):
        if not isinstance(node, _NODES):
            raise ConfigError(f"expression {src!r} uses unsupported syntax {type(node).__name__}")
        if isinstance(node, ast.Constant) and not isinstance(node.value, (int, float)):
            raise ConfigError(f"expression {src!r} contains a non-numeric constant")
        if isinstance(node, ast.Call):
            if not isinstance(node.func, ast.Name) or node.func.id not in _FUNCS or node.keywords:
                raise ConfigError(f"expression {src!r} calls an unknown function")
        if isinstance(node, ast.Name) and node.id not in variables and node.id not in _FUNCS \
                and node.id not in _CONSTS:
            raise ConfigError(f"expression {src!r} uses unknown name {node.id!r}; allowed: {list(variables)}")


def compile_expression(src, variables: tuple[str, ...] = ("t",)) -> Callable:
    """Turn a number or whitelisted expression into a plain function of ``variables``.

    The result is an ordinary Python function so the kinetic Monte Carlo
    kernels can compile it.
    """
    if isinstance(src, bool):
        raise ConfigError(f"expected a number or expression, got {src!r}")
    if isinstance(src, (int, float)):
        src = repr(float(src))
    if not isinstance(src, str):
        raise ConfigError(f"expected a number or expression, got {src!r}")
    _check_expr(src, variables)
    scope = {"__builtins__": {}, **_FUNCS, **_CONSTS}
    code = f"def _f({', '.join(variables)}):\n    return ({src}) + 0.0\n"
    exec(compile(code, "<config>", "exec"), scope)
    return scope["_f"]


def _is_constant(src) -> bool:
    return isinstance(src, (int, float)) and not isinstance(src, bool)


# ----------------------------------------------------------------------------
# Config object


@dataclass
class Config:
    model: dict = field(default_factory=lambda: dict(DEFAULT_MODEL))
    drive: dict = field(default_factory=dict)
    lattice: dict = field(default_factory=dict)
    solver: dict = field(default_factory=dict)
    experiment: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {s: copy.deepcopy(getattr(self, s)) for s in SECTIONS}

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.as_dict(), sort_keys=True, default_flow_style=False)

    def get(self, dotted: str):
        section, key = dotted.split(".", 1)
        return getattr(self, section).get(key)

    def require(self, dotted: str):
        value = self.get(dotted)
        if value is None:
            raise ConfigError(f"missing required key '{dotted}'")
        return value

    def override(self, dotted: str, value) -> None:
        """Set ``section.key``, as used for command-line flags."""
        if "." not in dotted:
            raise ConfigError(f"override {dotted!r} must look like section.key")
        section, key = dotted.split(".", 1)
        if section not in SCHEMA:
            raise ConfigError(f"unknown config section {section!r}; allowed: {list(SECTIONS)}")
        if section != "model" and key not in SCHEMA[section]:
            raise ConfigError(f"unknown keys in '{section}': {[key]}")
        if section == "model" and key == "preset":
            self.model = {"preset": value}
            return
        getattr(self, section)[key] = value

    # builders

    def rate_model(self) -> RateModel:
        try:
            return rate_model_from_dict(self.model)
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"invalid model section: {exc}") from exc

    def drive_schedule(self) -> DriveSchedule:
        return drive_from_dict(self.drive)


def _normalize(section: str, body) -> dict:
    if body is None:
        body = {}
    if not isinstance(body, Mapping):
        raise ConfigError(f"section '{section}' must be a mapping")
    body = dict(body)
    if section == "model":
        if not body:
            return dict(DEFAULT_MODEL)
        unknown = sorted(set(body) - set(SCHEMA["model"]))
        if unknown:
            raise ConfigError(f"unknown keys in 'model': {unknown}")
        return body
    unknown = sorted(set(body) - set(SCHEMA[section]))
    if unknown:
        raise ConfigError(f"unknown keys in '{section}': {unknown}")
    out = {k: v for k, v in SCHEMA[section].items() if v is not None}
    out.update(body)
    return out


def from_dict(data: Mapping | None) -> Config:
    data = {} if data is None else data
    if not isinstance(data, Mapping):
        raise ConfigError("configuration must be a mapping of sections")
    unknown = sorted(set(data) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown config sections: {unknown}")
    return Config(**{s: _normalize(s, data.get(s)) for s in SECTIONS})


def parse(text: str) -> Config:
    """Parse YAML (or JSON). A run manifest is accepted and yields its recorded config."""
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML: {exc}") from None
    if isinstance(data, Mapping) and "config" in data and "config_sha256" in data:
        data = {k: v for k, v in data["config"].items() if k != "command"}
    return from_dict(data)


def load(path: str | Path) -> Config:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {str(path)!r} not found")
    return parse(path.read_text())


def drive_from_dict(d: Mapping) -> DriveSchedule:
    """Reservoirs from ``alpha0/alpha1`` (densities) or ``lambda0/lambda1`` (potentials)."""
    has_alpha = d.get("alpha0") is not None or d.get("alpha1") is not None
    has_lambda = d.get("lambda0") is not None or d.get("lambda1") is not None
    if has_alpha and has_lambda:
        raise ConfigError("drive takes either alpha0/alpha1 or lambda0/lambda1, not both")
    if not has_alpha and not has_lambda:
        raise ConfigError("missing required key 'drive.alpha0'")
    field_fn = None
    if d.get("field") is not None and not (_is_constant(d["field"]) and float(d["field"]) == 0.0):
        field_fn = compile_expression(d["field"], ("t", "x"))
    kw = {"epsilon": float(d.get("epsilon", 1.0)), "ell": float(d.get("ell", 1.0))}
    if d.get("field_bound") is not None:
        kw["field_bound"] = float(d["field_bound"])
    try:
        if has_alpha:
            key0 = "alpha0" if d.get("alpha0") is not None else "alpha1"
            a0, a1 = d[key0], d.get("alpha1", d[key0])
            if a1 is None:
                a1 = a0
            if _is_constant(a0) and _is_constant(a1):
                return DriveSchedule.constant(float(a0), float(a1), field_fn, **kw)
            f0 = compile_expression(a0)
            f1 = f0 if a1 == a0 else compile_expression(a1)
            return DriveSchedule.from_alpha(f0, f1, field_fn, **kw)
        key0 = "lambda0" if d.get("lambda0") is not None else "lambda1"
        l0, l1 = d[key0], d.get("lambda1", d[key0])
        if l1 is None:
            l1 = l0
        f0 = compile_expression(l0)
        f1 = f0 if l1 == l0 else compile_expression(l1)
        return DriveSchedule(f0, f1, field_fn, **kw)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"invalid drive section: {exc}") from exc
