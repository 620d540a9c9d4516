"""Flat JSON run configuration covering every tunable constant.

Keys are ``section.field``; a config file may set any subset of them and
unknown keys are rejected. Tuple-valued fields are written as JSON lists.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, fields, replace
from typing import Optional

from .ballistics import AeroParams, RacketImpactParams, TableBounceParams, WorldGeometry
from .curation import CurationThresholds
from .errors import ConfigError
from .racket import MonteCarloRanges, SolverConfig
from .rallygen import PoolRanges
from .segmentation import HitHeuristics
from .trajectory import write_json
from .trajectory_fit import FitConfig


@dataclass(frozen=True)
class GenSettings:
    pool_size: int = 500
    max_segments: Optional[int] = None
    max_attempts: int = 10
    sample_rate_hz: float = 120.0
    broadcast_rate_hz: float = 30.0
    simulate_duration: float = 2.0
    simulate_dt: float = 1.0 / 240.0

    def __post_init__(self):
        if self.pool_size < 1 or self.max_attempts < 1:
            raise ValueError("pool_size and max_attempts must be at least 1")
        if self.max_segments is not None and self.max_segments < 1:
            raise ValueError("max_segments must be at least 1 or null")
        if not (self.sample_rate_hz > 0 and self.broadcast_rate_hz > 0):
            raise ValueError("sample rates must be positive")
        if not (self.simulate_duration > 0 and self.simulate_dt > 0):
            raise ValueError("simulate_duration and simulate_dt must be positive")


SECTIONS = {
    "world": WorldGeometry,
    "aero": AeroParams,
    "table": TableBounceParams,
    "racket": RacketImpactParams,
    "fit": FitConfig,
    "hits": HitHeuristics,
    "curation": CurationThresholds,
    "solver": SolverConfig,
    "mc": MonteCarloRanges,
    "pools": PoolRanges,
    "gen": GenSettings,
}


def _plain(value):
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    return value


def _coerce(default, value, key):
    """Convert a JSON value to the type of the field's default."""
    if isinstance(default, tuple):
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected a list")
        if default and len(value) != len(default) and key != "solver.penalty_schedule":
            raise ConfigError(f"{key}: expected {len(default)} values")
        return tuple(float(v) for v in value)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true or false")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number")
        return float(value)
    if default is None:
        # optional integer or float fields default to null
        if value is not None and (isinstance(value, bool) or not isinstance(value, (int, float))):
            raise ConfigError(f"{key}: expected a number or null")
        return value
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string")
        return value
    raise ConfigError(f"{key}: unsupported value")


@dataclass(frozen=True)
class RunConfig:
    world: WorldGeometry = WorldGeometry()
    aero: AeroParams = AeroParams()
    table: TableBounceParams = TableBounceParams()
    racket: RacketImpactParams = RacketImpactParams()
    fit: FitConfig = FitConfig()
    hits: HitHeuristics = HitHeuristics()
    curation: CurationThresholds = CurationThresholds()
    solver: SolverConfig = SolverConfig()
    mc: MonteCarloRanges = MonteCarloRanges()
    pools: PoolRanges = PoolRanges()
    gen: GenSettings = GenSettings()

    def to_flat(self) -> dict:
        out = {}
        for section in SECTIONS:
            obj = getattr(self, section)
            for f in fields(obj):
                out[f"{section}.{f.name}"] = _plain(getattr(obj, f.name))
        return out

    def fingerprint(self) -> str:
        text = json.dumps(self.to_flat(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]

    @classmethod
    def from_flat(cls, flat: dict) -> "RunConfig":
        if not isinstance(flat, dict):
            raise ConfigError("config must be a JSON object")
        defaults = cls()
        known = defaults.to_flat()
        updates = {s: {} for s in SECTIONS}
        for key, value in flat.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            section, name = key.split(".", 1)
            default = getattr(getattr(defaults, section), name)
            updates[section][name] = _coerce(default, value, key)
        built = {}
        for section, kw in updates.items():
            try:
                built[section] = replace(getattr(defaults, section), **kw)
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"{section}: {exc}") from exc
        return cls(**built)

    def with_overrides(self, flat: dict) -> "RunConfig":
        merged = self.to_flat()
        merged.update(flat)
        return RunConfig.from_flat(merged)


def load_config(path=None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        with open(path, "r", encoding="utf-8") as fh:
            flat = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}: {exc.msg}") from exc
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from exc
    try:
        return RunConfig.from_flat(flat)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def save_config(cfg: RunConfig, path) -> None:
    write_json(path, cfg.to_flat())
