"""Run configuration: ``key = value`` text with ``#`` comments and command-line overrides."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

from .evaluation import METHODS, RECOMMENDERS, RecommenderConfig
from .training import TrainConfig


class ConfigError(ValueError):
    """Unknown key or unparsable value in a run configuration."""


@dataclass
class RunConfig:
    # data
    input: str = ""
    max_users: int = 0  # 0 means no cap
    max_records: int = 0
    interval: float = 10800.0
    max_gap: float = 86400.0
    max_len: int = 64
    min_checkins: int = 5
    train_frac: float = 0.8
    val_frac: float = 0.1
    # training
    stage_epochs: tuple[int, int, int] = (5, 10, 50)
    lr: float = 0.008
    mask_start: float = 0.10
    mask_end: float = 0.50
    mask_end_epoch: int = 50
    zoneout_h: float = 0.1
    zoneout_c: float = 0.1
    window: int = 10
    batch_size: int = 1
    clip_norm: float = 5.0
    val_mask: float = 0.3
    seed: int = 0
    # augmentation and evaluation
    methods: tuple[str, ...] = METHODS
    recommenders: tuple[str, ...] = RECOMMENDERS
    rec_epochs: int = 10
    rec_lr: float = 0.008
    pop_k: int = 10
    marker: str = ""
    checkpoint: str = ""
    output: str = ""

    def validate(self) -> None:
        self.train_config().validate()
        for m in self.methods:
            if m not in METHODS:
                raise ConfigError(f"unknown method {m!r}; choose from {', '.join(METHODS)}")
        for r in self.recommenders:
            if r not in RECOMMENDERS:
                raise ConfigError(f"unknown recommender {r!r}; choose from {', '.join(RECOMMENDERS)}")
        if self.interval <= 0 or self.max_gap <= 0 or self.max_len < 2:
            raise ConfigError("interval and max_gap must be positive and max_len >= 2")
        if self.pop_k < 1 or self.rec_epochs < 0:
            raise ConfigError("pop_k must be >= 1 and rec_epochs >= 0")

    def train_config(self) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{k: getattr(self, k) for k in names if hasattr(self, k)})

    def recommender_config(self) -> RecommenderConfig:
        return RecommenderConfig(epochs=self.rec_epochs, lr=self.rec_lr, clip_norm=self.clip_norm, seed=self.seed)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            elif isinstance(value, float):
                value = repr(value)
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"

    def with_overrides(self, pairs: dict[str, str]) -> "RunConfig":
        return dataclasses.replace(self, **{k: _coerce(k, v) for k, v in pairs.items()})

    @classmethod
    def from_text(cls, text: str, base: "RunConfig | None" = None) -> "RunConfig":
        return (base or cls()).with_overrides(parse_pairs(text.splitlines()))

    @classmethod
    def load(cls, path, overrides: dict[str, str] | None = None) -> "RunConfig":
        cfg = cls.from_text(Path(path).read_text(encoding="utf-8")) if path else cls()
        cfg = cfg.with_overrides(overrides or {})
        cfg.validate()
        return cfg


_FIELDS = {f.name: f for f in fields(RunConfig)}


def parse_pairs(lines) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw.strip()!r}")
        out[key.strip()] = value.strip()
    return out


def _coerce(key: str, text: str):
    if key not in _FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    default = _FIELDS[key].default
    try:
        if key == "stage_epochs":
            parts = tuple(int(p) for p in text.split(","))
            if len(parts) != 3:
                raise ValueError("need three comma-separated counts")
            return parts
        if isinstance(default, tuple):
            return tuple(p.strip() for p in text.split(",") if p.strip())
        if isinstance(default, bool):
            return text.lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        return text
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {text!r} ({exc})") from None
