"""Flat `key = value` training configuration.

One dataclass holds every tunable; files and command-line overrides share the
same syntax, and every key must be a known field so typos fail loudly.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from .imaging import DOWNSCALE_METHODS
from .nets import ModelSpec


@dataclass(frozen=True)
class TrainConfig:
    # geometry and model size
    y_size: int = 4
    x_size: int = 32
    channels: int = 3
    width: int = 32
    blocks: int = 4
    latent_n: int = 16
    latent_p: int = 64
    # optimizer
    lr: float = 2e-4
    beta1: float = 0.0
    beta2: float = 0.99
    eps: float = 1e-8
    # loss weights
    gp_weight: float = 10.0
    center_weight: float = 1.0
    # loop and schedule
    batch: int = 16
    critic_steps: int = 1
    fade_steps: int = 2000
    hold_steps: int = 2000
    total_steps: int = 12000
    progressive: bool = True
    # data
    downscale_method: str = "average-pool"
    toy: bool = True
    toy_count: int = 256
    dataset: str = ""
    # bookkeeping
    seed: int = 0
    out: str = "runs/default"
    checkpoint_every: int = 1000
    sample_every: int = 0
    sample_k: int = 3

    @property
    def factor(self):
        return self.x_size // self.y_size

    def model_spec(self) -> ModelSpec:
        return ModelSpec(channels=self.channels, y_size=self.y_size,
                         x_size=self.x_size, width=self.width,
                         blocks=self.blocks, latent_n=self.latent_n,
                         latent_p=self.latent_p)


_FIELDS = {f.name: f.type for f in dataclasses.fields(TrainConfig)}


def parse_items(text) -> dict[str, str]:
    """`key = value` lines to a raw string map; `#` starts a comment."""
    items = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected `key = value`, got {raw!r}")
        key, _, value = line.partition("=")
        items[key.strip()] = value.strip()
    return items


def _coerce(key, value):
    if key not in _FIELDS:
        raise ValueError(f"unknown config key {key!r}")
    kind = _FIELDS[key]
    if kind in ("int", int):
        return int(value)
    if kind in ("float", float):
        return float(value)
    if kind in ("bool", bool):
        if value not in ("true", "false"):
            raise ValueError(f"{key} must be `true` or `false`, got {value!r}")
        return value == "true"
    return value


def config_from_items(items, base=None) -> TrainConfig:
    cfg = base if base is not None else TrainConfig()
    updates = {k: _coerce(k, v) for k, v in items.items()}
    return dataclasses.replace(cfg, **updates)


def apply_overrides(cfg: TrainConfig, overrides) -> TrainConfig:
    """`key=value` strings from the command line, applied in order."""
    for ov in overrides:
        if "=" not in ov:
            raise ValueError(f"override must look like key=value, got {ov!r}")
        key, _, value = ov.partition("=")
        cfg = config_from_items({key.strip(): value.strip()}, base=cfg)
    return cfg


def load_config(path, overrides=()) -> TrainConfig:
    with open(path, "r", encoding="utf-8") as fh:
        cfg = config_from_items(parse_items(fh.read()))
    cfg = apply_overrides(cfg, overrides)
    validate_config(cfg)
    return cfg


def format_config(cfg: TrainConfig) -> str:
    """Canonical text form; parsing it back reproduces cfg exactly."""
    lines = []
    for f in dataclasses.fields(TrainConfig):
        v = getattr(cfg, f.name)
        if isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def validate_config(cfg: TrainConfig) -> list[str]:
    """Raise on hard violations; return human-readable warnings for soft ones."""
    cfg.model_spec()  # geometry checks live there
    if cfg.downscale_method not in DOWNSCALE_METHODS:
        raise ValueError(f"downscale_method must be one of {DOWNSCALE_METHODS}")
    for key in ("batch", "critic_steps", "total_steps", "toy_count"):
        if getattr(cfg, key) < 1:
            raise ValueError(f"{key} must be >= 1")
    for key in ("lr", "eps", "gp_weight", "center_weight"):
        if getattr(cfg, key) < 0:
            raise ValueError(f"{key} must be >= 0")
    for key in ("beta1", "beta2"):
        b = getattr(cfg, key)
        if not 0.0 <= b < 1.0:
            raise ValueError(f"{key} must lie in [0, 1)")
    for key in ("fade_steps", "hold_steps", "checkpoint_every", "sample_every",
                "sample_k", "seed"):
        if getattr(cfg, key) < 0:
            raise ValueError(f"{key} must be >= 0")
    if not cfg.toy and not cfg.dataset:
        raise ValueError("dataset path required when toy = false")

    warnings = []
    spec = cfg.model_spec()
    need = spec.stages * (cfg.fade_steps + cfg.hold_steps)
    if cfg.progressive and cfg.total_steps < need:
        warnings.append(
            f"total_steps = {cfg.total_steps} ends before the final stage "
            f"(schedule reaches it at step {need})")
    return warnings
