"""Occupancy-restricted stratified sampling, NeuS weights and SDF-guided
importance sampling along rays."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..autodiff import Tensor, concat
from .camera import RayBatch
from .occupancy import OccupancyGrid


@dataclass
class RenderConfig:
    n_coarse: int = 64
    n_importance: int = 32
    s_init: float = 20.0
    upsample_s: float = 64.0
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self) -> None:
        if self.n_coarse < 1 or self.n_importance < 0:
            raise ValueError("sample counts must be >= 1")
        if self.s_init <= 0:
            raise ValueError("sharpness must be positive")


@dataclass
class RaySampleSet:
    t: np.ndarray  # (R, S) strictly increasing along each row
    valid: np.ndarray  # (R,) rays that cross occupied space
    coarse_step: np.ndarray  # (R,) occupied length / n_coarse
    sdf: np.ndarray | None = None  # (R, S) when evaluated
    weights: np.ndarray | None = None  # (R, S-1)

    def points(self, rays: RayBatch) -> np.ndarray:
        return rays.origins[:, None, :] + self.t[..., None] * rays.dirs[:, None, :]


def grid_segments(rays: RayBatch, grid: OccupancyGrid) -> tuple[np.ndarray, np.ndarray]:
    """Split each ray's [near, far] at every voxel boundary.

    Returns segment end-points ``edges`` (R, K+1) and per-segment occupied
    length (R, K).  Exact: every segment lies inside a single voxel.
    """
    o, d = rays.origins, rays.dirs
    near, far = rays.near[:, None], rays.far[:, None]
    planes = [np.linspace(grid.lo[k], grid.hi[k], grid.resolution + 1) for k in range(3)]
    cross = []
    for k in range(3):
        with np.errstate(divide="ignore", invalid="ignore"):
            tk = (planes[k][None, :] - o[:, k:k + 1]) / d[:, k:k + 1]
        cross.append(tk)
    t = np.concatenate(cross, axis=1)
    t = np.where(np.isfinite(t) & (t > near) & (t < far), t, far)
    edges = np.sort(np.concatenate([near, t, far], axis=1), axis=1)
    length = np.diff(edges, axis=1)
    mid = 0.5 * (edges[:, :-1] + edges[:, 1:])
    pts = o[:, None, :] + mid[..., None] * d[:, None, :]
    occ = grid.query(pts.reshape(-1, 3)).reshape(mid.shape)
    return edges, length * occ


def _inverse_cdf(edges: np.ndarray, mass: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Map fractions ``u`` (R, n) to positions under a piecewise-uniform density.

    ``edges`` (R, K+1) bounds K bins carrying non-negative ``mass`` (R, K);
    rows with zero mass map onto their [first, last] edge linearly.
    """
    total = mass.sum(axis=1, keepdims=True)
    empty = total[:, 0] <= 0
    mass = np.where(empty[:, None], np.diff(edges, axis=1), mass)
    total = np.where(empty[:, None], np.maximum(mass.sum(axis=1, keepdims=True), 1e-300), total)
    cdf = np.concatenate([np.zeros((len(mass), 1)), np.cumsum(mass, axis=1) / total], axis=1)
    cdf[:, -1] = 1.0
    rows = np.arange(len(cdf))[:, None]
    # one global searchsorted over row-offset cdfs
    offset = 2.0 * rows
    k = np.searchsorted((cdf + offset).ravel(), (u + offset).ravel(), side="right").reshape(u.shape)
    k = k - rows * cdf.shape[1] - 1
    k = np.clip(k, 0, mass.shape[1] - 1)
    # skip zero-mass bins so samples never land in empty space
    c0 = np.take_along_axis(cdf, k, axis=1)
    c1 = np.take_along_axis(cdf, k + 1, axis=1)
    e0 = np.take_along_axis(edges, k, axis=1)
    e1 = np.take_along_axis(edges, k + 1, axis=1)
    frac = np.where(c1 > c0, (u - c0) / np.where(c1 > c0, c1 - c0, 1.0), 0.5)
    return e0 + np.clip(frac, 0.0, 1.0) * (e1 - e0)


def stratified_coarse(
    rays: RayBatch, grid: OccupancyGrid, n: int, rng: np.random.Generator | None
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``n`` stratified samples over the occupied part of each ray.

    Without ``rng`` each stratum is sampled at its centre.
    """
    edges, occ_len = grid_segments(rays, grid)
    total = occ_len.sum(axis=1)
    valid = total > 1e-12
    jitter = rng.uniform(size=(len(rays), n)) if rng is not None else np.full((len(rays), n), 0.5)
    u = (np.arange(n)[None, :] + jitter) / n
    t = _inverse_cdf(edges, occ_len, u)
    return t, valid, total / n


def neus_alpha(d: Tensor, s) -> Tensor:
    """Discrete opacity of each interval from SDF values at its ends."""
    d = d if isinstance(d, Tensor) else Tensor(d)
    phi = d * s
    phi = phi.sigmoid()
    prev, nxt = phi[:, :-1], phi[:, 1:]
    return ((prev - nxt) / (prev + 1e-12)).clamp_min(0.0)


def neus_weights(d, s) -> Tensor:
    """Unbiased, occlusion-aware interval weights ``w_i = T_i * alpha_i``.

    ``d`` is (R, S) or (S,); the result has one fewer column.
    """
    d = d if isinstance(d, Tensor) else Tensor(d)
    squeeze = d.ndim == 1
    if squeeze:
        d = d.reshape(1, -1)
    if d.shape[1] < 2:
        raise ValueError("need at least two samples per ray")
    alpha = neus_alpha(d, s)
    # floor of 1e-7 keeps the cumprod gradient finite; keep <= 1 bounds sum(w) by 1 + 1e-7
    keep = 1.0 - alpha * (1.0 - 1e-7)
    ones = Tensor(np.ones((d.shape[0], 1)))
    trans = concat([ones, keep.cumprod(axis=1)[:, :-1]], axis=1)
    w = trans * alpha
    return w.reshape(-1) if squeeze else w


def importance_samples(
    t: np.ndarray, d: np.ndarray, s: float, n: int, rng: np.random.Generator | None
) -> np.ndarray:
    """Draw ``n`` extra positions per ray from the NeuS weight distribution."""
    w = neus_weights(d, s).data
    w = w + 1e-5 * w.sum(axis=1, keepdims=True) / w.shape[1] + 1e-12
    jitter = rng.uniform(size=(len(t), n)) if rng is not None else np.full((len(t), n), 0.5)
    u = (np.arange(n)[None, :] + jitter) / n
    return _inverse_cdf(t, w, u)


def sample_rays(
    rays: RayBatch,
    grid: OccupancyGrid,
    sdf,
    cfg: RenderConfig,
    rng: np.random.Generator | None = None,
    s: float | None = None,
) -> RaySampleSet:
    """Coarse samples in occupied voxels, then importance samples near the
    first zero crossing of the SDF."""
    t, valid, step = stratified_coarse(rays, grid, cfg.n_coarse, rng)
    if cfg.n_importance > 0 and cfg.n_coarse > 1:
        pts = rays.origins[:, None, :] + t[..., None] * rays.dirs[:, None, :]
        d = sdf.values(pts.reshape(-1, 3)).reshape(t.shape)
        s_up = max(cfg.upsample_s, s or 0.0)
        extra = importance_samples(t, d, s_up, cfg.n_importance, rng)
        t = np.sort(np.concatenate([t, extra], axis=1), axis=1)
    # keep rows strictly increasing
    tiny = 1e-9 * np.arange(t.shape[1])[None, :]
    t = np.maximum.accumulate(t, axis=1) + tiny
    return RaySampleSet(t=t, valid=valid, coarse_step=step)


def sample_ray(ray: RayBatch, grid, sdf, cfg, rng=None, s=None) -> RaySampleSet:
    return sample_rays(ray, grid, sdf, cfg, rng, s)
