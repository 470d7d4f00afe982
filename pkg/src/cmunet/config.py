"""Run configuration stored as flat ``key = value`` lines with ``#`` comments."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Mapping

from cmunet.errors import ConfigError
from cmunet.model import ModelConfig

_MODEL_FIELDS = tuple(f.name for f in fields(ModelConfig))


@dataclass(frozen=True)
class RunConfig:
    # architecture
    in_channels: int = 3
    channels: tuple[int, ...] = (64, 128, 256, 512, 1024)
    convmixer_depth: int = 7
    convmixer_kernel: int = 7
    use_convmixer: bool = True
    use_msag: bool = True
    input_size: int = 256
    # optimization
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    dice_smooth: float = 1.0
    bce_weight: float = 0.5
    epochs: int = 300
    batch_size: int = 8
    # run
    seed: int = 0
    train_fraction: float = 0.8
    augment: bool = True
    dtype: str = "float32"
    threshold: float = 0.5
    data: str = ""
    out: str = "runs/cmunet"

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError(f"need epochs >= 0 and batch_size >= 1, got {self.epochs}, {self.batch_size}")

    def model_config(self) -> ModelConfig:
        return ModelConfig(**{k: getattr(self, k) for k in _MODEL_FIELDS})

    def replace(self, **changes: Any) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_model_config(cls, model: ModelConfig, **rest: Any) -> "RunConfig":
        return cls(**{k: getattr(model, k) for k in _MODEL_FIELDS}, **rest)


_FIELD_TYPES = {f.name: type(f.default) for f in fields(RunConfig)}


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(key: str, raw: str) -> Any:
    kind = _FIELD_TYPES[key]
    try:
        if kind is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind is tuple:
            return tuple(int(v) for v in raw.split(",") if v.strip())
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def format_config(config: RunConfig) -> str:
    lines = ["# cmunet run configuration"]
    lines += [f"{f.name} = {_format_value(getattr(config, f.name))}" for f in fields(RunConfig)]
    return "\n".join(lines) + "\n"


def parse_overrides(pairs: Mapping[str, str]) -> dict[str, Any]:
    out = {}
    for key, raw in pairs.items():
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        out[key] = _parse_value(key, raw.strip())
    return out


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    pairs: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, raw = line.split("=", 1)
        pairs[key.strip()] = raw
    return (base or RunConfig()).replace(**parse_overrides(pairs))


def load_config(path: str | Path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


def save_config(config: RunConfig, path: str | Path) -> None:
    Path(path).write_text(format_config(config), encoding="utf-8")
