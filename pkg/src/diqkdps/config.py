"""Run configuration: a single JSON file, schema-checked before any work.

The schema is strict on purpose: unknown keys are rejected and every value
is range-checked with the offending field named, so a reproduction recipe
either runs exactly as written or fails loudly. All angles are radians.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import npa


class ConfigError(ValueError):
    """Invalid or malformed run configuration."""


@dataclass(frozen=True)
class ScanSettings:
    eta_min: float = 0.66
    eta_max: float = 0.75
    bracket: float = 0.002


@dataclass(frozen=True)
class RunConfig:
    """Validated inputs for the rate / scan / curve commands."""

    theta: float = 0.394
    angles_alice: tuple[float, float] = (2.084, -2.853)
    angles_bob: tuple[float, float, float] = (-2.272, 2.926, -1.905)
    p: float = 0.00527
    key_x: int = 1
    key_y: int = 3
    eta: float = 0.80
    dark: float = 0.0
    visibility: float = 1.0
    mean_photon_pairs: float = 0.0
    level: str = "2"
    tol: float = 1e-8
    budget: int = 2000
    restarts: int = 6
    rate_tol: float = 1e-7
    seed: int = 0
    parallel: int = 1
    scan: ScanSettings = field(default_factory=ScanSettings)
    eta_grid: tuple[float, ...] = ()


_SCHEMA = {
    "protocol": {
        "theta": (float, lambda v: 0.0 <= v <= np.pi / 2, "in [0, pi/2]"),
        "angles_alice": ("angles", 2),
        "angles_bob": ("angles", 3),
        "p": (float, lambda v: 0.0 <= v <= 1.0, "in [0, 1]"),
        "key_x": (int, lambda v: v in (1, 2), "1 or 2"),
        "key_y": (int, lambda v: v in (1, 2, 3), "1, 2 or 3"),
    },
    "detector": {
        "eta": (float, lambda v: 0.0 <= v <= 1.0, "in [0, 1]"),
        "dark": (float, lambda v: 0.0 <= v < 1.0, "in [0, 1)"),
    },
    "source": {
        "visibility": (float, lambda v: 0.0 <= v <= 1.0, "in [0, 1]"),
        "mean_photon_pairs": (float, lambda v: v == 0.0,
                              "0 (multi-pair sources are not modeled)"),
    },
    "solver": {
        "level": (str, lambda v: _level_ok(v), "one of 1, 2, 3, 4, 2ab"),
        "tol": (float, lambda v: 0.0 < v <= 1e-4, "in (0, 1e-4]"),
    },
    "optimizer": {
        "budget": (int, lambda v: v > 0, "positive"),
        "restarts": (int, lambda v: v > 0, "positive"),
        "rate_tol": (float, lambda v: v > 0, "positive"),
        "seed": (int, lambda v: v >= 0, "non-negative"),
        "parallel": (int, lambda v: v >= 1, "at least 1"),
    },
    "scan": {
        "eta_min": (float, lambda v: 0.0 <= v < 1.0, "in [0, 1)"),
        "eta_max": (float, lambda v: 0.0 < v <= 1.0, "in (0, 1]"),
        "bracket": (float, lambda v: 0.0 < v <= 0.1, "in (0, 0.1]"),
    },
    "curve": {
        "eta_grid": ("grid", None),
    },
}

_FIELD_BY_SECTION = {
    "protocol": {"theta": "theta", "angles_alice": "angles_alice",
                 "angles_bob": "angles_bob", "p": "p",
                 "key_x": "key_x", "key_y": "key_y"},
    "detector": {"eta": "eta", "dark": "dark"},
    "source": {"visibility": "visibility", "mean_photon_pairs": "mean_photon_pairs"},
    "solver": {"level": "level", "tol": "tol"},
    "optimizer": {"budget": "budget", "restarts": "restarts",
                  "rate_tol": "rate_tol", "seed": "seed", "parallel": "parallel"},
    "scan": {"eta_min": "eta_min", "eta_max": "eta_max", "bracket": "bracket"},
}


def _level_ok(v: str) -> bool:
    try:
        npa.parse_level(v)
        return True
    except ValueError:
        return False


def _check_scalar(path: str, value, kind, ok, expect) -> float | int | str:
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        value = float(value)
    elif kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
    elif kind is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
    if not ok(value):
        raise ConfigError(f"{path}: value {value!r} must be {expect}")
    return value


def _check_angles(path: str, value, count: int) -> tuple[float, ...]:
    if (not isinstance(value, (list, tuple)) or len(value) != count
            or any(isinstance(v, bool) or not isinstance(v, (int, float))
                   for v in value)):
        raise ConfigError(f"{path}: expected a list of {count} numbers, got {value!r}")
    angles = tuple(float(v) for v in value)
    for v in angles:
        if not -np.pi <= v <= np.pi:
            raise ConfigError(f"{path}: angle {v} outside [-pi, pi] (radians only)")
    return angles


def _check_grid(path: str, value) -> tuple[float, ...]:
    if (not isinstance(value, (list, tuple)) or not value
            or any(isinstance(v, bool) or not isinstance(v, (int, float))
                   for v in value)):
        raise ConfigError(f"{path}: expected a non-empty list of numbers, got {value!r}")
    grid = tuple(float(v) for v in value)
    for v in grid:
        if not 0.0 <= v <= 1.0:
            raise ConfigError(f"{path}: efficiency {v} outside [0, 1]")
    return grid


def validate_config(data: dict) -> RunConfig:
    """Check a parsed mapping against the schema and build a RunConfig."""
    if not isinstance(data, dict):
        raise ConfigError(f"config root must be a mapping, got {type(data).__name__}")
    fields: dict = {}
    for section, content in data.items():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown config section {section!r}")
        if not isinstance(content, dict):
            raise ConfigError(f"{section}: expected a mapping, got {content!r}")
        for key, value in content.items():
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown config key {section}.{key}")
            rule = _SCHEMA[section][key]
            path = f"{section}.{key}"
            if rule[0] == "angles":
                fields[key] = _check_angles(path, value, rule[1])
            elif rule[0] == "grid":
                fields["eta_grid"] = _check_grid(path, value)
            else:
                fields[_FIELD_BY_SECTION[section][key]] = _check_scalar(
                    path, value, *rule)
    scan_fields = {k: fields.pop(k) for k in ("eta_min", "eta_max", "bracket")
                   if k in fields}
    cfg = RunConfig(**fields, scan=ScanSettings(**scan_fields))
    if cfg.scan.eta_min >= cfg.scan.eta_max:
        raise ConfigError(
            f"scan.eta_min ({cfg.scan.eta_min}) must be below scan.eta_max "
            f"({cfg.scan.eta_max})")
    return cfg


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return validate_config(data)


def config_to_dict(cfg: RunConfig) -> dict:
    """Mapping form of a config; inverse of validate_config."""
    out = {
        "protocol": {"theta": cfg.theta, "angles_alice": list(cfg.angles_alice),
                     "angles_bob": list(cfg.angles_bob), "p": cfg.p,
                     "key_x": cfg.key_x, "key_y": cfg.key_y},
        "detector": {"eta": cfg.eta, "dark": cfg.dark},
        "source": {"visibility": cfg.visibility,
                   "mean_photon_pairs": cfg.mean_photon_pairs},
        "solver": {"level": cfg.level, "tol": cfg.tol},
        "optimizer": {"budget": cfg.budget, "restarts": cfg.restarts,
                      "rate_tol": cfg.rate_tol, "seed": cfg.seed,
                      "parallel": cfg.parallel},
        "scan": dict(asdict(cfg.scan)),
    }
    if cfg.eta_grid:
        out["curve"] = {"eta_grid": list(cfg.eta_grid)}
    return out


def save_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(config_to_dict(cfg), indent=2) + "\n")
