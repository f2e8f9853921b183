"""Experiment documents for the command line.

A config is one JSON object with optional sections::

    {
      "model": {"bands": 16, "width": 16, "num_residual_blocks": 2, "seed": 0},
      "train": {"max_steps": 300, "loss_weights": {"mse": 2.0}},
      "data": {"manifest": "pairs/manifest.json", "out_dir": "runs/smoke"},
      "scale": 2,
      "patch_size": 48
    }

Every field falls back to the default of the dataclass that owns it. Unknown
keys are rejected with the dotted path of the offending key.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from .losses import LossWeights
from .model import ModelConfig
from .train import TrainConfig


class ConfigError(ValueError):
    """Invalid experiment document; ``key`` is the dotted path at fault."""

    def __init__(self, key: str, msg: str):
        super().__init__(f"{key}: {msg}" if key else msg)
        self.key = key


@dataclass(frozen=True)
class DataConfig:
    manifest: str | None = None
    out_dir: str = "run"


def _field_names(cls) -> set[str]:
    return {f.name for f in fields(cls)}


def _check_keys(doc: Any, cls, prefix: str) -> dict:
    if not isinstance(doc, dict):
        raise ConfigError(prefix, "expected an object")
    for key in doc:
        if key not in _field_names(cls):
            raise ConfigError(f"{prefix}.{key}" if prefix else key, "unknown key")
    return doc


def _build(cls, doc: dict, prefix: str):
    try:
        return cls(**doc)
    except (TypeError, ValueError) as exc:
        # name the first field mentioned in the message when possible
        key = next((f"{prefix}.{n}" for n in sorted(doc, key=len, reverse=True) if n in str(exc)), prefix)
        raise ConfigError(key, str(exc)) from None


@dataclass(frozen=True)
class CliConfig:
    model: ModelConfig | None = None
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    scale: int = 2
    patch_size: int = 48

    @classmethod
    def from_dict(cls, doc: Any) -> "CliConfig":
        doc = _check_keys(doc, cls, "")
        kw: dict[str, Any] = {}
        if "model" in doc:
            m = _check_keys(doc["model"], ModelConfig, "model")
            if "bands" not in m:
                raise ConfigError("model.bands", "required")
            kw["model"] = _build(ModelConfig, m, "model")
        if "train" in doc:
            t = dict(_check_keys(doc["train"], TrainConfig, "train"))
            if "loss_weights" in t:
                t["loss_weights"] = _build(LossWeights, _check_keys(t["loss_weights"], LossWeights,
                                                                    "train.loss_weights"), "train.loss_weights")
            kw["train"] = _build(TrainConfig, t, "train")
        if "data" in doc:
            kw["data"] = _build(DataConfig, _check_keys(doc["data"], DataConfig, "data"), "data")
        for key in ("scale", "patch_size"):
            if key in doc:
                v = doc[key]
                if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                    raise ConfigError(key, "must be a positive integer")
                kw[key] = v
        return cls(**kw)

    def to_dict(self) -> dict:
        out = {
            "train": asdict(self.train),
            "data": asdict(self.data),
            "scale": self.scale,
            "patch_size": self.patch_size,
        }
        if self.model is not None:
            out["model"] = self.model.to_dict()
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "CliConfig":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError("", f"not valid JSON ({exc})") from None
        return cls.from_dict(doc)

    @classmethod
    def load(cls, path) -> "CliConfig":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


__all__ = ["CliConfig", "ConfigError", "DataConfig"]
