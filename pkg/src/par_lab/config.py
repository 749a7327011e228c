"""Run configuration: a nested YAML file validated against dataclass schemas.

Unknown keys are rejected with the offending line number.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .dpo import TrainConfig
from .lvlm import ModelConfig, PretrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    n_train: int = 20000
    n_eval: int = 500
    n_pref: int = 2000
    n_router_eval: int = 200


@dataclass
class RouterSection:
    n_heads: int = 4
    d_ff: int = 256
    init_std: float = 0.02
    n_slots: int | None = None  # default: half the host layers


@dataclass
class BudgetConfig:
    K: int = 2
    M: int = 48
    drop_at_layer: int = 2


@dataclass
class PrefSection:
    n_actions: int = 5
    noise_std: float | None = 10.0  # None: empirical attention-score std
    margin: float = 0.01
    rank_layer: int = 2


@dataclass
class SeedConfig:
    data: int = 0
    model: int = 0
    prefs: int = 0
    router: int = 0
    analysis: int = 0


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    router: RouterSection = field(default_factory=RouterSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    budgets: BudgetConfig = field(default_factory=BudgetConfig)
    prefs: PrefSection = field(default_factory=PrefSection)
    seeds: SeedConfig = field(default_factory=SeedConfig)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:12]

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    def replace(self, section: str, **kw) -> RunConfig:
        return dataclasses.replace(self, **{section: dataclasses.replace(getattr(self, section), **kw)})


def _build(cls, node: yaml.MappingNode | None, data: dict, where: str):
    known = {f.name: f for f in fields(cls)}
    keys = {}
    if node is not None:
        keys = {k.value: (k, v) for k, v in node.value}
    kw = {}
    for key, value in data.items():
        if key not in known:
            line = keys[key][0].start_mark.line + 1 if key in keys else "?"
            raise ConfigError(f"line {line}: unknown key '{where}{key}' (allowed: {', '.join(sorted(known))})")
        sub_node = keys.get(key, (None, None))[1]
        default = known[key].default_factory() if known[key].default_factory is not dataclasses.MISSING else None
        if dataclasses.is_dataclass(default):
            if not isinstance(value, dict):
                line = sub_node.start_mark.line + 1 if sub_node is not None else "?"
                raise ConfigError(f"line {line}: '{where}{key}' must be a mapping")
            kw[key] = _build(type(default), sub_node, value, f"{where}{key}.")
        else:
            if isinstance(value, list):
                value = tuple(value)
            kw[key] = value
    try:
        return cls(**kw)
    except (TypeError, ValueError) as e:
        line = node.start_mark.line + 1 if node is not None else "?"
        raise ConfigError(f"line {line}: invalid section '{where.rstrip('.') or 'root'}': {e}") from e


def parse_config(text: str) -> RunConfig:
    node = yaml.compose(text)
    data = yaml.safe_load(text) or {}
    if not isinstance(data, dict):
        raise ConfigError("line 1: top level must be a mapping")
    return _build(RunConfig, node, data, "")


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    return parse_config(Path(path).read_text())
