"""JSON config files whose keys mirror dataclass field names exactly."""
from __future__ import annotations

import dataclasses
import json
from pathlib import Path
from typing import Any, Type, TypeVar

from .types import LevelConfig, ModelConfig, ValidationError

T = TypeVar("T")


class ConfigKeyError(ValidationError):
    """Config file keys do not match the expected field names."""


def strict_from_dict(cls: Type[T], d: dict, where: str = "") -> T:
    """Build a dataclass from ``d``, rejecting unknown keys and missing required ones."""
    if not isinstance(d, dict):
        raise ConfigKeyError(f"{where or cls.__name__}: expected a mapping, got {type(d).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - set(fields))
    if unknown:
        raise ConfigKeyError(f"{where or cls.__name__}: unknown keys {unknown}; allowed {sorted(fields)}")
    missing = [n for n, f in fields.items()
               if n not in d and f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING]
    if missing:
        raise ConfigKeyError(f"{where or cls.__name__}: missing required keys {missing}")
    return cls(**d)


def model_config_to_dict(cfg: ModelConfig) -> dict:
    return {
        "k": cfg.k,
        "levels": [dataclasses.asdict(lv) for lv in cfg.levels],
        "freq_mode": cfg.freq_mode,
        "condition_mode": cfg.condition_mode,
    }


def model_config_from_dict(d: dict) -> ModelConfig:
    d = dict(d)
    levels = d.pop("levels", None)
    if levels is None:
        raise ConfigKeyError("ModelConfig: missing required keys ['levels']")
    lvls = tuple(strict_from_dict(LevelConfig, lv, f"levels[{i}]") for i, lv in enumerate(levels))
    return strict_from_dict(ModelConfig, {**d, "levels": lvls})


def dump_json(obj: Any, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def load_json(path) -> Any:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    return json.loads(path.read_text())
