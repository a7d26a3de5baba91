"""SDF and color networks plus the per-image appearance table."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .autodiff import (
    DimensionError,
    MlpParams,
    Tape,
    Tensor,
    concat,
    geometric_init,
    kaiming_uniform_init,
    mlp_forward,
    no_record,
    positional_encode,
)
from .autodiff.nn import encoded_dim, fit_readout


class FieldInputError(ValueError):
    pass


class DegenerateNormalError(ArithmeticError):
    pass


@dataclass
class FieldConfig:
    """Network sizes.  Defaults are the desk-scale configuration."""

    sdf_width: int = 128
    sdf_depth: int = 4
    sdf_skip: tuple[int, ...] = (2,)
    feature_dim: int = 64
    color_width: int = 64
    color_depth: int = 3
    embed_dim: int = 16
    pe_pos: int = 6
    pe_dir: int = 4
    init_radius: float = 0.5
    softplus_beta: float = 100.0

    @classmethod
    def full_scale(cls) -> "FieldConfig":
        return cls(sdf_width=512, sdf_depth=8, sdf_skip=(4,), feature_dim=256,
                   color_width=256, color_depth=4)


@dataclass
class SdfOutput:
    d: Tensor  # (N,)
    f: Tensor  # (N, feature_dim)


class SdfField:
    """Signed distance (negative inside) and a geometric feature per point."""

    def __init__(self, params: MlpParams, pe_pos: int, feature_dim: int):
        self.params = params
        self.pe_pos = pe_pos
        self.feature_dim = feature_dim

    @classmethod
    def create(cls, cfg: FieldConfig, rng: np.random.Generator) -> "SdfField":
        in_dim = encoded_dim(3, cfg.pe_pos)
        params = geometric_init(
            in_dim,
            3,
            [cfg.sdf_width] * cfg.sdf_depth,
            1 + cfg.feature_dim,
            cfg.init_radius,
            tuple(cfg.sdf_skip),
            rng,
            cfg.softplus_beta,
        )
        sdf = cls(params, cfg.pe_pos, cfg.feature_dim)
        # tighten the random-feature sphere with a least-squares readout
        q = rng.normal(size=(4096, 3))
        q /= np.linalg.norm(q, axis=1, keepdims=True)
        q *= 1.1 * rng.uniform(0.0, 1.0, (len(q), 1)) ** (1.0 / 3.0)
        q = np.vstack([q, rng.uniform(-0.05, 0.05, (256, 3))])
        r = np.linalg.norm(q, axis=1)
        fit_readout(
            params,
            lambda p: positional_encode(p, cfg.pe_pos).data,
            q,
            r - cfg.init_radius,
            q / np.maximum(r, 1e-9)[:, None],
        )
        return sdf

    def parameters(self) -> list[Tensor]:
        return self.params.parameters()

    def forward(self, x: Tensor) -> SdfOutput:
        if not np.all(np.isfinite(x.data)):
            raise FieldInputError("non-finite query point")
        out = mlp_forward(self.params, positional_encode(x, self.pe_pos))
        return SdfOutput(out[:, 0], out[:, 1:])

    def values(self, points: np.ndarray, chunk: int = 65536) -> np.ndarray:
        """Untracked signed distances for an (N, 3) array."""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        out = np.empty(len(points))
        with no_record():
            for lo in range(0, len(points), chunk):
                out[lo:lo + chunk] = self.forward(Tensor(points[lo:lo + chunk])).d.data
        return out


class AnalyticField:
    """Adapter exposing a closed-form SDF through the field interface.

    ``fn`` maps a Tensor of points (N, 3) to distances (N,) using tensor ops,
    so gradients still come from autodiff.
    """

    def __init__(self, fn: Callable[[Tensor], Tensor], feature_dim: int = 0):
        self.fn = fn
        self.feature_dim = feature_dim

    @classmethod
    def sphere(cls, radius: float = 0.5, center=(0.0, 0.0, 0.0), feature_dim: int = 0):
        c = np.asarray(center, dtype=np.float64)
        return cls(lambda x: (x - c).norm(axis=-1) - radius, feature_dim)

    @classmethod
    def constant(cls, value: float, feature_dim: int = 0):
        return cls(lambda x: x[:, 0] * 0.0 + value, feature_dim)

    def parameters(self) -> list[Tensor]:
        return []

    def forward(self, x: Tensor) -> SdfOutput:
        if not np.all(np.isfinite(x.data)):
            raise FieldInputError("non-finite query point")
        d = self.fn(x)
        f = Tensor(np.zeros((x.shape[0], self.feature_dim)))
        return SdfOutput(d, f)

    def values(self, points: np.ndarray, chunk: int = 65536) -> np.ndarray:
        with no_record():
            return self.forward(Tensor(np.asarray(points, dtype=np.float64).reshape(-1, 3))).d.data


def sdf_eval(sdf, x) -> SdfOutput:
    x = x if isinstance(x, Tensor) else Tensor(np.atleast_2d(x))
    return sdf.forward(x)


def sdf_gradient(sdf, points: np.ndarray) -> np.ndarray:
    """Autodiff gradient of the SDF at each row of ``points``."""
    x = Tensor(np.asarray(points, dtype=np.float64).reshape(-1, 3), requires_grad=True)
    with Tape() as tape:
        d = sdf.forward(x).d
    return tape.gradient(d, [x])[0].data


def sdf_normal(sdf, points: np.ndarray, min_norm: float = 1e-12) -> np.ndarray:
    """Unit normals ``grad d / |grad d|``; raises on vanishing gradients."""
    grad = sdf_gradient(sdf, points)
    norm = np.linalg.norm(grad, axis=-1, keepdims=True)
    if np.any(norm <= min_norm):
        raise DegenerateNormalError(f"{int(np.sum(norm <= min_norm))} points with vanishing gradient")
    out = grad / norm
    return out[0] if np.ndim(points) == 1 else out


class ColorField:
    """Color net ``(x, v, n, e, f) -> rgb`` with a sigmoid output."""

    def __init__(self, params: MlpParams, pe_dir: int, embed_dim: int, feature_dim: int):
        self.params = params
        self.pe_dir = pe_dir
        self.embed_dim = embed_dim
        self.feature_dim = feature_dim

    @classmethod
    def create(cls, cfg: FieldConfig, rng: np.random.Generator) -> "ColorField":
        in_dim = 3 + encoded_dim(3, cfg.pe_dir) + 3 + cfg.embed_dim + cfg.feature_dim
        params = kaiming_uniform_init(in_dim, [cfg.color_width] * (cfg.color_depth - 1), 3, rng)
        return cls(params, cfg.pe_dir, cfg.embed_dim, cfg.feature_dim)

    def parameters(self) -> list[Tensor]:
        return self.params.parameters()

    def forward(self, x, v, n, e, f) -> Tensor:
        x, v, n, e, f = (t if isinstance(t, Tensor) else Tensor(np.atleast_2d(t)) for t in (x, v, n, e, f))
        if e.shape[-1] != self.embed_dim:
            raise DimensionError(f"embedding width {e.shape[-1]} != {self.embed_dim}")
        if f.shape[-1] != self.feature_dim:
            raise DimensionError(f"feature width {f.shape[-1]} != {self.feature_dim}")
        h = concat([x, positional_encode(v, self.pe_dir), n, e, f], axis=-1)
        return mlp_forward(self.params, h)


def color_eval(color: ColorField, x, v, n, e, f) -> Tensor:
    return color.forward(x, v, n, e, f)


@dataclass
class AppearanceTable:
    """One trainable embedding row per training image."""

    embeddings: Tensor
    image_ids: list[int] = field(default_factory=list)

    @classmethod
    def create(cls, image_ids: list[int], embed_dim: int, rng: np.random.Generator, scale: float = 0.01):
        data = rng.normal(0.0, scale, (len(image_ids), embed_dim))
        return cls(Tensor(data, requires_grad=True), list(image_ids))

    @property
    def embed_dim(self) -> int:
        return self.embeddings.shape[1]

    def row_index(self, image_id: int) -> int:
        return self.image_ids.index(image_id)

    def lookup(self, rows: np.ndarray) -> Tensor:
        return self.embeddings[np.asarray(rows, dtype=np.int64)]


def average_embedding(table: AppearanceTable) -> np.ndarray:
    data = table.embeddings.data
    if data.shape[0] == 0:
        raise ValueError("appearance table is empty")
    return data.mean(axis=0)
