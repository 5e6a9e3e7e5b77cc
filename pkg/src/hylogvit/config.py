"""Run configuration: model and training fields, read from flat ``key=value``
text or JSON. Every field of both dataclasses is addressable by name."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Union, get_args, get_origin, get_type_hints

from .network import ModelConfig


@dataclass
class TrainConfig:
    epochs: int = 1
    max_steps: Optional[int] = None
    batch_size: int = 4
    lr: float = 1e-4
    lr_schedule: str = "constant"
    seed: int = 0
    lambda_r: float = 1.0
    lambda_s: float = 1.0
    lambda_d: float = 1.5
    augment: bool = False
    log_every: int = 1

    def __post_init__(self):
        if self.lr_schedule != "constant":
            raise ValueError(f"lr_schedule {self.lr_schedule!r} is reserved; only 'constant' is implemented")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> dict:
        return {"model": asdict(self.model), "train": asdict(self.train)}

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return cls(ModelConfig(**d.get("model", {})), TrainConfig(**d.get("train", {})))

    def to_text(self) -> str:
        lines = []
        for section in (self.model, self.train):
            for f in fields(section):
                v = getattr(section, f.name)
                lines.append(f"{f.name}={'none' if v is None else v}")
        return "\n".join(lines) + "\n"


def _coerce(raw: str, hint):
    if get_origin(hint) is Union:
        args = [a for a in get_args(hint) if a is not type(None)]
        if raw.strip().lower() in ("none", "null", ""):
            return None
        hint = args[0]
    if hint is bool:
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if hint is int:
        return int(raw)
    if hint is float:
        return float(raw)
    return raw.strip()


_MODEL_HINTS = get_type_hints(ModelConfig)
_TRAIN_HINTS = get_type_hints(TrainConfig)


def parse_flat(text: str) -> RunConfig:
    model, train = {}, {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {n}: expected key=value, got {line!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key in _MODEL_HINTS:
            model[key] = _coerce(val, _MODEL_HINTS[key])
        elif key in _TRAIN_HINTS:
            train[key] = _coerce(val, _TRAIN_HINTS[key])
        else:
            raise ValueError(f"line {n}: unknown config key {key!r}")
    return RunConfig(ModelConfig(**model), TrainConfig(**train))


def parse_json(text: str) -> RunConfig:
    d = json.loads(text)
    if "model" in d or "train" in d:
        return RunConfig.from_dict(d)
    model = {k: v for k, v in d.items() if k in _MODEL_HINTS}
    train = {k: v for k, v in d.items() if k in _TRAIN_HINTS}
    unknown = set(d) - set(model) - set(train)
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    return RunConfig(ModelConfig(**model), TrainConfig(**train))


def load_config(path) -> RunConfig:
    text = Path(path).read_text(encoding="utf-8")
    if text.lstrip().startswith("{"):
        return parse_json(text)
    return parse_flat(text)
