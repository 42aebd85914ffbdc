"""Run configuration: strict JSON schema over nested dataclasses."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .model import EncoderConfig
from .synthdata import SceneConfig


class ConfigError(ValueError):
    pass


@dataclass
class OptimConfig:
    optimizer: str = "sgd"  # "sgd" | "adam"
    lr: float = 0.05
    lr_warmup_frac: float = 0.05
    steps: int = 1500
    batch_size: int = 32
    momentum: float = 0.9
    grad_clip: float = 1.0
    log_every: int = 50

    def __post_init__(self):
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"optim.optimizer: unknown optimizer {self.optimizer!r}")
        if not self.lr > 0:
            raise ConfigError("optim.lr: must be positive")
        if self.steps < 1:
            raise ConfigError("optim.steps: must be positive")
        if self.batch_size < 2:
            raise ConfigError("optim.batch_size: contrastive loss needs at least 2")
        if not 0 <= self.lr_warmup_frac < 1:
            raise ConfigError("optim.lr_warmup_frac: must lie in [0, 1)")
        if self.grad_clip < 0 or self.log_every < 1:
            raise ConfigError("optim.grad_clip/log_every: out of range")


@dataclass
class RunConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    scene: SceneConfig = field(default_factory=SceneConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    seed: int = 0
    n_train: int = 2000
    n_eval: int = 200
    eval_seed_offset: int = 1_000_000

    def __post_init__(self):
        if self.encoder.d_raw != self.scene.d_raw:
            raise ConfigError("encoder.d_raw: must equal scene.d_raw")
        if self.encoder.vocab < self.scene.num_classes + 1:
            raise ConfigError("encoder.vocab: must cover every class id plus background")
        if self.n_train < self.optim.batch_size:
            raise ConfigError("n_train: smaller than optim.batch_size")
        if self.n_eval < 1:
            raise ConfigError("n_eval: must be positive")

    def to_dict(self) -> dict:
        return {
            "encoder": self.encoder.to_dict(),
            "scene": self.scene.to_dict(),
            "optim": dataclasses.asdict(self.optim),
            "seed": self.seed,
            "n_train": self.n_train,
            "n_eval": self.n_eval,
            "eval_seed_offset": self.eval_seed_offset,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


_SECTIONS = {"encoder": EncoderConfig, "scene": SceneConfig, "optim": OptimConfig}


def _build(cls, raw: dict, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"{where}.{unknown[0]}: unknown key")
    try:
        return cls(**raw)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def from_dict(raw: dict[str, Any]) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config: expected a JSON object")
    top = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(raw) - top)
    if unknown:
        raise ConfigError(f"{unknown[0]}: unknown key")
    kwargs = {}
    for key, value in raw.items():
        if key in _SECTIONS:
            kwargs[key] = _build(_SECTIONS[key], value, key)
        else:
            if not isinstance(value, int) or isinstance(value, bool):
                raise ConfigError(f"{key}: expected an integer")
            kwargs[key] = value
    try:
        return RunConfig(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    """Apply ``section.key=value`` strings; values parse as JSON, else as plain strings."""
    raw = json.loads(json.dumps(raw))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r}: expected KEY=VALUE")
        key, text = item.split("=", 1)
        try:
            value = json.loads(text)
        except json.JSONDecodeError:
            value = text
        parts = key.split(".")
        node = raw
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key}: {part} is not a section")
        node[parts[-1]] = value
    return raw


def load(path=None, overrides: list[str] | None = None) -> RunConfig:
    raw: dict = {}
    if path is not None:
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return from_dict(apply_overrides(raw, overrides or []))
