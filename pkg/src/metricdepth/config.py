"""Run configuration: every sub-config in one JSON file, strictly parsed."""
from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

from .codec import DepthCodecConfig
from .metrics import EvalProtocol
from .model import DenoiserConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    codec: DepthCodecConfig = field(default_factory=DepthCodecConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalProtocol = field(default_factory=EvalProtocol)
    train_data: Optional[str] = None
    eval_data: Optional[str] = None
    out_dir: str = "runs/default"

    def train_config(self) -> TrainConfig:
        # the codec lives at the top level; the training copy always follows it
        return dataclasses.replace(self.train, codec=self.codec)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train"].pop("codec")
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True, default=str)


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    for key, value in data.items():
        tp = hints[key]
        if dataclasses.is_dataclass(tp):
            value = _build(tp, value, f"{where}.{key}")
        elif isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from e


def run_config_from_dict(data: dict) -> RunConfig:
    data = dict(data)
    train = dict(data.get("train", {}))
    if "codec" in train:
        raise ConfigError("train.codec: set the codec at the top level")
    if "fov_aug" in data:
        if "fov_aug" in train:
            raise ConfigError("fov_aug given both at the top level and under train")
        train["fov_aug"] = data.pop("fov_aug")
    data["train"] = train
    return _build(RunConfig, data, "config")


def load_run_config(path) -> RunConfig:
    p = Path(path)
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{p}: invalid JSON ({e})") from e
    return run_config_from_dict(data)


def apply_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    """Dotted-key overrides such as {"train.steps": 100}; None values are skipped."""
    data = json.loads(cfg.to_json())
    for key, value in overrides.items():
        if value is None:
            continue
        node = data
        *parents, leaf = key.split(".")
        for part in parents:
            node = node.setdefault(part, {})
        node[leaf] = value
    return run_config_from_dict(data)
