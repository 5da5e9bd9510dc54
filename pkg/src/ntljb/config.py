"""Run configuration: one YAML document, strictly validated, with a stable digest."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import yaml

from .attack import AttackConfig
from .victim import VictimConfig
from .whitebox import FinetuneConfig

DATA_ROOT_ENV = "NTLJB_DATA_ROOT"


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    pair: str = "digits_small"
    resolution: int = 32
    data_root: str | None = None
    download: bool = False
    fraction: float = 0.01
    subset_seed: int | None = None  # falls back to the global seed
    pool_test: bool = True


@dataclass
class DiagnosticsConfig:
    log_density: bool = False


@dataclass
class RunConfig:
    seed: int = 0
    output_root: str = "runs"
    data: DataConfig = field(default_factory=DataConfig)
    victim: VictimConfig = field(default_factory=VictimConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    diagnostics: DiagnosticsConfig = field(default_factory=DiagnosticsConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    def canonical(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()

    def resolved_data_root(self, override: str | None = None) -> str | None:
        return override or self.data.data_root or os.environ.get(DATA_ROOT_ENV) or None

    def seeded(self) -> "RunConfig":
        """Propagate the global seed into sections that carry their own."""
        return replace(self, victim=replace(self.victim, seed=self.seed),
                       attack=replace(self.attack, seed=self.seed),
                       finetune=replace(self.finetune, seed=self.seed))


SECTIONS = {"data": DataConfig, "victim": VictimConfig, "attack": AttackConfig,
            "finetune": FinetuneConfig, "diagnostics": DiagnosticsConfig}


def _coerce(value: Any, current: Any, where: str):
    if isinstance(current, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false", "1", "0", "yes", "no"):
            return value.lower() in ("true", "1", "yes")
        raise ConfigError(f"{where}: expected a boolean, got {value!r}")
    if isinstance(current, int) and not isinstance(value, bool):
        try:
            return int(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{where}: expected an integer, got {value!r}") from None
    if isinstance(current, float):
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{where}: expected a number, got {value!r}") from None
    if current is None and isinstance(value, str):
        # optional fields: try numeric first, keep strings otherwise
        if value.lower() in ("none", "null", ""):
            return None
        for cast in (int, float):
            try:
                return cast(value)
            except ValueError:
                pass
    return value


def _build(cls, raw: dict, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected a mapping")
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    default = cls()
    kwargs = {}
    for k, v in raw.items():
        kwargs[k] = _coerce(v, getattr(default, k), f"{where}.{k}")
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"{where}: {err}") from err


def config_from_dict(raw: dict | None) -> RunConfig:
    raw = dict(raw or {})
    top = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(raw) - top)
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {', '.join(unknown)}")
    kwargs = {}
    for k, v in raw.items():
        if k in SECTIONS:
            kwargs[k] = _build(SECTIONS[k], v or {}, k)
        else:
            kwargs[k] = _coerce(v, getattr(RunConfig(), k), k)
    return RunConfig(**kwargs)


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as err:
        raise ConfigError(f"cannot parse {path}: {err}") from err
    return config_from_dict(raw)


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply ``section.key=value`` (or top-level ``key=value``) assignments."""
    raw = cfg.to_dict()
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        parts = key.strip().split(".")
        if len(parts) == 1:
            raw[parts[0]] = yaml.safe_load(value) if value else value
        elif len(parts) == 2 and parts[0] in SECTIONS:
            section = raw.get(parts[0])
            if parts[1] not in section:
                raise ConfigError(f"{parts[0]}: unknown key {parts[1]}")
            section[parts[1]] = yaml.safe_load(value) if value else value
        else:
            raise ConfigError(f"unknown override key {key!r}")
    return config_from_dict(raw)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)


__all__ = ["RunConfig", "DataConfig", "DiagnosticsConfig", "ConfigError", "load_config", "config_from_dict",
           "apply_overrides", "dump_config", "DATA_ROOT_ENV"]
