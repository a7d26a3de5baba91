"""Run configuration: one JSON document holding every hyperparameter.

Unknown keys are rejected at every nesting level so typos fail loudly.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any

from .fields import FieldConfig

GEO_MODES = ("none", "sparse", "dense")


class ConfigError(ValueError):
    pass


@dataclass
class SamplerSection:
    n_coarse: int = 64
    n_importance: int = 32
    upsample_s: float = 64.0
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    grid_resolution: int = 64
    grid_dilation: int = 2
    grid_update_every: int = 5000
    grid_threshold: float | None = None  # None: 1.5 voxel diagonals

    def validate(self) -> None:
        if self.n_coarse < 2 or self.n_importance < 0:
            raise ConfigError("sampler.n_coarse must be >= 2 and n_importance >= 0")
        if self.grid_resolution < 4 or self.grid_dilation < 0 or self.grid_update_every < 1:
            raise ConfigError("invalid occupancy grid settings")


@dataclass
class LossSection:
    lam: float = 0.1
    lam_learnable: bool = False
    beta_eik: float = 0.1
    color_loss: bool = True
    geo: str = "dense"
    geo_points: int = 1024  # visible points drawn per step
    eik_points: int = 0  # extra uniform points for the eikonal term

    def validate(self) -> None:
        if self.geo not in GEO_MODES:
            raise ConfigError(f"loss.geo must be one of {GEO_MODES}, got {self.geo!r}")
        if self.lam < 0 or self.beta_eik < 0 or self.geo_points < 1 or self.eik_points < 0:
            raise ConfigError("loss weights and point counts must be non-negative")


@dataclass
class TrainSection:
    iterations: int = 5000
    batch_rays: int = 1024
    lr: float = 5e-4
    lr_schedule: str = "constant"
    s_init: float = 20.0
    seed: int = 0
    checkpoint_every: int = 1000
    max_bad_steps: int = 20
    image_long_side: int | None = 512

    def validate(self) -> None:
        if self.iterations < 0 or self.batch_rays < 1 or self.lr <= 0:
            raise ConfigError("train.iterations >= 0, batch_rays >= 1 and lr > 0 are required")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError("train.lr_schedule must be constant or cosine")
        if self.checkpoint_every < 1 or self.max_bad_steps < 1 or self.s_init <= 0:
            raise ConfigError("invalid checkpoint interval, failure budget or sharpness")
        if self.image_long_side is not None and self.image_long_side < 8:
            raise ConfigError("train.image_long_side must be >= 8")


@dataclass
class RunConfig:
    scene: str = ""
    out: str = "run"
    fields: FieldConfig = field(default_factory=FieldConfig)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    loss: LossSection = field(default_factory=LossSection)
    train: TrainSection = field(default_factory=TrainSection)

    def validate(self) -> "RunConfig":
        self.sampler.validate()
        self.loss.validate()
        self.train.validate()
        f = self.fields
        if min(f.sdf_width, f.sdf_depth, f.color_width, f.color_depth) < 1 or f.feature_dim < 0 or f.embed_dim < 1:
            raise ConfigError("field sizes must be positive")
        if any(not 0 < k < f.sdf_depth for k in f.sdf_skip):
            raise ConfigError("fields.sdf_skip layers must lie strictly inside the SDF network")
        return self

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return _build(cls, d, "").validate()

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from None
        return cls.from_dict(d)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")


def _plain(v: Any) -> Any:
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    return v


def _build(cls, d: Any, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where or 'config'} must be an object")
    known = {f.name: f for f in fields(cls)}
    unknown = set(d) - known.keys()
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'config'}: {', '.join(sorted(unknown))}")
    kwargs = {}
    defaults = cls()
    for name, value in d.items():
        current = getattr(defaults, name)
        path = f"{where}.{name}" if where else name
        if is_dataclass(current):
            kwargs[name] = _build(type(current), value, path)
        elif isinstance(current, tuple):
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"{path} must be a list")
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from None


def override(cfg: RunConfig, dotted: str, value: Any) -> RunConfig:
    """Return a copy with ``section.key`` set to ``value``."""
    d = cfg.to_dict()
    node = d
    parts = dotted.split(".")
    for p in parts[:-1]:
        if p not in node or not isinstance(node[p], dict):
            raise ConfigError(f"unknown config section {dotted!r}")
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key {dotted!r}")
    node[parts[-1]] = value
    return RunConfig.from_dict(d)
