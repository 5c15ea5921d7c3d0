"""Experiment configuration: one YAML (or JSON) document with named sections.

Every section is validated eagerly; errors name the offending key as a dotted
path, e.g. ``harvest.phi``.
"""

from __future__ import annotations

import copy
import math
import os
from dataclasses import dataclass
from pathlib import Path

import yaml

from .aging import OBJECTIVES, AgingBounds, BatteryConstants, CostSpec, build_costs, illustrative_constants
from .cmdp import config_hash
from .markov import BurstParams, EmissionDist, build_burst_chain, burst_emissions
from .system import HarvestingSystem, Source, SystemConfig

OUT_ENV = "EHSAGING_OUT"

DEFAULTS = {
    "system": {
        "q_max": 8,
        "w_max": 8,
        "actions": [0, 1],
        "y_levels": 9,
        "delta_q": 1.0,
        "serve_requires_charge": True,
    },
    "harvest": {"phi": 0.9, "b": 10.0, "units": 1, "emissions": None},
    "load": {"phi": 0.8, "b": 12.0, "units": 1, "emissions": None},
    "battery": {"profile": "illustrative"},
    "bounds": {},
    "theta": 0.1,
    "objective": "square",
    "normalize_cycles": True,
    "solver": "simplex",
    "horizon": 10_000,
    "runs": 1000,
    "seed": 0,
    "out": None,
    "walk": {"p": [0.5, 0.7, 0.9], "delta_max": [1, 3], "tau": 10_000, "samples": 100_000, "checkpoint": 100},
}

_SOURCE_KEYS = {"phi", "b", "units", "emissions"}
_BATTERY_KEYS = {"profile", "a_coef", "b_coef", "c_coef", "d_coef", "t_life", "q_nom"}
# sections that fix the state space and kernel; a policy is tied to these
MODEL_SECTIONS = ("system", "harvest", "load", "theta")


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


def _merge(base: dict, override: dict, prefix: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        path = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(path, "unknown key")
        if isinstance(base[key], dict) and key not in ("bounds", "battery"):
            if not isinstance(val, dict):
                raise ConfigError(path, "expected a mapping")
            out[key] = _merge(base[key], val, path + ".")
        else:
            out[key] = copy.deepcopy(val)
    return out


def _number(raw: dict, key: str, path: str, kind=float):
    val = raw[key]
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        raise ConfigError(f"{path}.{key}" if path else key, f"expected a number, got {val!r}")
    if kind is int:
        if int(val) != val:
            raise ConfigError(f"{path}.{key}" if path else key, f"expected an integer, got {val!r}")
        return int(val)
    return float(val)


def _source(raw: dict, name: str) -> tuple[BurstParams, Source]:
    if not isinstance(raw, dict):
        raise ConfigError(name, "expected a mapping")
    for key in raw:
        if key not in _SOURCE_KEYS:
            raise ConfigError(f"{name}.{key}", "unknown key")
    try:
        params = BurstParams(_number(raw, "phi", name), _number(raw, "b", name))
    except KeyError as exc:
        raise ConfigError(f"{name}.{exc.args[0]}", "missing") from None
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{name}.phi/b", str(exc)) from None
    if raw.get("emissions") is not None:
        em = raw["emissions"]
        if not isinstance(em, list) or len(em) != 2 or not all(isinstance(m, dict) for m in em):
            raise ConfigError(f"{name}.emissions", "expected a list of two {units: probability} mappings")
        try:
            emission = EmissionDist.from_mappings([{int(k): float(v) for k, v in m.items()} for m in em])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{name}.emissions", str(exc)) from None
    else:
        units = _number(raw, "units", name, int)
        if units < 1:
            raise ConfigError(f"{name}.units", "must be >= 1")
        emission = burst_emissions(units)
    return params, Source(build_burst_chain(params), emission)


def _battery(raw, q_max: int) -> BatteryConstants:
    if not isinstance(raw, dict):
        raise ConfigError("battery", "expected a mapping")
    for key in raw:
        if key not in _BATTERY_KEYS:
            raise ConfigError(f"battery.{key}", "unknown key")
    profile = raw.get("profile")
    if profile not in (None, "illustrative"):
        raise ConfigError("battery.profile", f"unknown profile {profile!r}")
    fields = {k: v for k, v in raw.items() if k != "profile"}
    if profile == "illustrative":
        base = illustrative_constants(q_nom=float(q_max))
        merged = {f: getattr(base, f) for f in _BATTERY_KEYS - {"profile"}}
        merged.update(fields)
        fields = merged
    missing = sorted(_BATTERY_KEYS - {"profile"} - set(fields))
    if missing:
        raise ConfigError(f"battery.{missing[0]}", "missing (or set profile: illustrative)")
    vals = {k: _number(fields, k, "battery") for k in fields}
    try:
        return BatteryConstants(**vals)
    except ValueError as exc:
        raise ConfigError("battery", str(exc)) from None


def _bounds(raw) -> AgingBounds:
    if raw is None:
        return AgingBounds()
    if not isinstance(raw, dict):
        raise ConfigError("bounds", "expected a mapping")
    vals = {}
    for key, val in raw.items():
        if key not in AgingBounds.__dataclass_fields__:
            raise ConfigError(f"bounds.{key}", "unknown key")
        if val is None or (isinstance(val, str) and val.lower() in ("inf", "none")):
            vals[key] = math.inf
        else:
            vals[key] = _number(raw, key, "bounds")
    try:
        return AgingBounds(**vals)
    except ValueError as exc:
        raise ConfigError("bounds", str(exc)) from None


@dataclass(frozen=True, eq=False)
class ExperimentConfig:
    raw: dict
    system: HarvestingSystem
    harvest_params: BurstParams
    load_params: BurstParams
    battery: BatteryConstants
    bounds: AgingBounds
    objective: str
    normalize_cycles: bool
    solver: str
    horizon: int
    runs: int
    seed: int
    out: str | None
    walk: dict

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError("<root>", "config must be a mapping")
        raw = _merge(DEFAULTS, data)
        sysraw = raw["system"]
        try:
            cfg = SystemConfig(
                q_max=_number(sysraw, "q_max", "system", int),
                w_max=_number(sysraw, "w_max", "system", int),
                theta=_number(raw, "theta", ""),
                actions=tuple(sysraw["actions"]),
                y_levels=_number(sysraw, "y_levels", "system", int),
                delta_q=_number(sysraw, "delta_q", "system"),
                serve_requires_charge=bool(sysraw["serve_requires_charge"]),
            )
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            key = "theta" if "theta" in str(exc) else "system"
            raise ConfigError(key, str(exc)) from None
        hp, harvest = _source(raw["harvest"], "harvest")
        lp_, load = _source(raw["load"], "load")
        if raw["objective"] not in OBJECTIVES:
            raise ConfigError("objective", f"expected one of {sorted(OBJECTIVES)}, got {raw['objective']!r}")
        if raw["solver"] not in ("simplex", "highs"):
            raise ConfigError("solver", f"expected 'simplex' or 'highs', got {raw['solver']!r}")
        horizon = _number(raw, "horizon", "", int)
        runs = _number(raw, "runs", "", int)
        if horizon < 2:
            raise ConfigError("horizon", "must be at least 2 slots")
        if runs < 1:
            raise ConfigError("runs", "must be >= 1")
        walk = raw["walk"]
        return cls(
            raw=raw,
            system=HarvestingSystem(cfg, harvest, load),
            harvest_params=hp,
            load_params=lp_,
            battery=_battery(raw["battery"], cfg.q_max),
            bounds=_bounds(raw["bounds"]),
            objective=raw["objective"],
            normalize_cycles=bool(raw["normalize_cycles"]),
            solver=raw["solver"],
            horizon=horizon,
            runs=runs,
            seed=_number(raw, "seed", "", int),
            out=raw["out"],
            walk=walk,
        )

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError("--config", f"cannot read {path}: {exc.strerror}") from None
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError("<syntax>", str(exc)) from None
        return cls.from_dict(data or {})

    def with_overrides(self, **sections) -> "ExperimentConfig":
        """A copy with top-level keys replaced, re-validated."""
        data = copy.deepcopy(self.raw)
        for key, val in sections.items():
            data[key] = val
        return ExperimentConfig.from_dict(data)

    @property
    def config_hash(self) -> str:
        """Hash of everything except the output directory."""
        return config_hash({k: v for k, v in self.raw.items() if k != "out"})

    @property
    def model_hash(self) -> str:
        """Hash of the sections that fix the state space and kernel."""
        return config_hash({k: self.raw[k] for k in MODEL_SECTIONS})

    def costs(self) -> CostSpec:
        return build_costs(
            self.system.kernel(),
            self.system.harvest,
            self.battery.q_nom,
            OBJECTIVES[self.objective],
            self.normalize_cycles,
        )

    def output_dir(self, cli_value: str | None = None) -> Path:
        """``--out`` wins, then the environment variable, then the config, then ./out."""
        chosen = cli_value or os.environ.get(OUT_ENV) or self.out or "out"
        path = Path(chosen)
        try:
            path.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise ConfigError("out", f"cannot create {path}: {exc.strerror}") from None
        if not os.access(path, os.W_OK):
            raise ConfigError("out", f"{path} is not writable")
        return path
