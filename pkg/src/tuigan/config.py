"""Training configuration and its flat key/value manifest form."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .imaging import MIN_SIZE
from .losses import LossWeights


@dataclass(frozen=True)
class TrainConfig:
    N: int = 4
    s: float = 4.0 / 3.0
    iters_per_scale: int = 4000
    lr_initial: float = 0.0005
    lr_decay_interval: int = 1600
    lr_decay_factor: float = 0.1
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    d_steps: int = 1
    g_steps: int = 1
    min_size: int = MIN_SIZE
    channels: int = 32
    attention: bool = True
    tv_reduction: str = "mean"
    adam_betas: tuple[float, float] = (0.5, 0.999)

    def __post_init__(self):
        if self.N < 0:
            raise ValueError("N must be >= 0")
        if self.s <= 1:
            raise ValueError("s must be > 1")
        if self.iters_per_scale < 0 or self.d_steps < 0 or self.g_steps < 0:
            raise ValueError("iteration and step counts must be >= 0")
        if self.lr_decay_interval <= 0:
            raise ValueError("lr_decay_interval must be positive")
        if self.tv_reduction not in ("sum", "mean"):
            raise ValueError("tv_reduction must be 'sum' or 'mean'")
        if self.channels < 1:
            raise ValueError("channels must be positive")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_flat(self) -> dict[str, object]:
        flat: dict[str, object] = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if f.name == "weights":
                for wf in dataclasses.fields(value):
                    flat[f"weights.{wf.name}"] = getattr(value, wf.name)
            elif f.name == "adam_betas":
                flat["adam_beta1"], flat["adam_beta2"] = value
            else:
                flat[f.name] = value
        return flat

    @classmethod
    def from_flat(cls, flat: dict[str, object]) -> "TrainConfig":
        kwargs: dict[str, object] = {}
        weights: dict[str, float] = {}
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        for key, value in flat.items():
            if key.startswith("weights."):
                weights[key.split(".", 1)[1]] = float(value)
            elif key in ("adam_beta1", "adam_beta2"):
                continue
            elif key in types:
                kwargs[key] = value
        if "adam_beta1" in flat:
            kwargs["adam_betas"] = (float(flat["adam_beta1"]), float(flat["adam_beta2"]))
        for key in ("N", "iters_per_scale", "lr_decay_interval", "seed", "d_steps", "g_steps", "min_size", "channels"):
            if key in kwargs:
                kwargs[key] = int(kwargs[key])
        for key in ("s", "lr_initial", "lr_decay_factor"):
            if key in kwargs:
                kwargs[key] = float(kwargs[key])
        if "attention" in kwargs:
            kwargs["attention"] = bool(kwargs["attention"])
        return cls(weights=LossWeights(**weights), **kwargs)


def format_value(value: object) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    return '"' + str(value).replace("\\", "\\\\").replace('"', '\\"') + '"'


def parse_value(text: str) -> object:
    text = text.strip()
    if text in ("true", "false"):
        return text == "true"
    if text.startswith('"') and text.endswith('"'):
        return text[1:-1].replace('\\"', '"').replace("\\\\", "\\")
    try:
        return int(text)
    except ValueError:
        return float(text)


def write_manifest(path: str | Path, values: dict[str, object]) -> None:
    """Write a flat ``key = value`` file (a TOML subset), atomically."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    lines = [f"{key} = {format_value(value)}" for key, value in values.items()]
    tmp.write_text("\n".join(lines) + "\n")
    tmp.replace(path)


def read_manifest(path: str | Path) -> dict[str, object]:
    values: dict[str, object] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        values[key.strip()] = parse_value(value)
    return values
