"""Run configuration: every stage's settings in one JSON-round-trippable object."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, is_dataclass, replace
from pathlib import Path

from .augment import AugmentationSpec
from .clusterkit import SwkConfig
from .harness.bench import FixtureConfig
from .rotr import RotrConfig
from .scu import ScuConfig
from .stod import AnomalyConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    data_ratio: float = 1.0
    swk: SwkConfig = field(default_factory=SwkConfig)
    rotr: RotrConfig = field(default_factory=RotrConfig)
    anomaly: AnomalyConfig = field(default_factory=AnomalyConfig)
    scu: ScuConfig = field(default_factory=ScuConfig)
    fixture: FixtureConfig = field(default_factory=FixtureConfig)

    def validate(self) -> None:
        if not 0 < self.data_ratio <= 1:
            raise ConfigError(f"data_ratio must lie in (0, 1], got {self.data_ratio}")
        try:
            self.swk.validate()
            self.rotr.validate()
            self.scu.validate()
            self.fixture.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        return dump(self)

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        cfg = load_into(cls(), d, "config")
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path: str | Path) -> RunConfig:
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
        return cls.from_dict(d)


def dump(obj):
    """Plain JSON-able view of a (nested) config object."""
    if isinstance(obj, AugmentationSpec):
        return obj.to_dict()
    if is_dataclass(obj):
        return {f.name: dump(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [dump(v) for v in obj]
    return obj


def load_into(base, d, path: str):
    """Copy of ``base`` with the entries of ``d`` applied; unknown keys are errors."""
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: expected an object, got {type(d).__name__}")
    known = {f.name for f in fields(base)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"{path}: unknown key(s) {', '.join(unknown)}")
    updates = {}
    for key, value in d.items():
        cur = getattr(base, key)
        where = f"{path}.{key}"
        try:
            if isinstance(cur, AugmentationSpec):
                updates[key] = AugmentationSpec.from_dict(value)
            elif is_dataclass(cur):
                updates[key] = load_into(cur, value, where)
            elif isinstance(cur, tuple):
                updates[key] = tuple(value)
            elif isinstance(cur, list):
                updates[key] = [type(cur[0])(v) for v in value] if cur else list(value)
            elif isinstance(cur, bool):
                if not isinstance(value, bool):
                    raise TypeError("expected true/false")
                updates[key] = value
            else:
                updates[key] = type(cur)(value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{where}: {exc}") from exc
    try:
        return replace(base, **updates)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
