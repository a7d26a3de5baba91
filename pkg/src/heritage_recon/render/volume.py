"""Volumetric rendering of color, depth and normals from the two fields."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..autodiff import Tape, Tensor
from .camera import RayBatch
from .sampling import RaySampleSet, neus_weights


@dataclass
class RenderOutput:
    color: Tensor  # (R, 3)
    depth: Tensor  # (R,)
    normal: np.ndarray  # (R, 3) unit, zero where nothing was hit
    opacity: Tensor  # (R,)
    weights: Tensor  # (R, S-1)
    sdf: Tensor  # (R*S,)
    sdf_grad: Tensor  # (R*S, 3), differentiable when create_graph
    points: Tensor  # (R*S, 3)


def sharpness(log_s: Tensor) -> Tensor:
    """Logistic sharpness ``s = exp(10 * v)`` from its trainable log-parameter."""
    return (log_s * 10.0).exp()


def render_rays(
    sdf,
    color,
    rays: RayBatch,
    samples: RaySampleSet,
    embedding: Tensor | np.ndarray,
    s: Tensor | float,
    tape: Tape,
    background=(0.0, 0.0, 0.0),
    create_graph: bool = True,
) -> RenderOutput:
    """Composite per-interval colors with NeuS weights.

    ``embedding`` is one row per ray (R, E) or a single row (E,).  Every
    interval takes the mean of its two end-point colors, normals and depths.
    Rays without occupied samples render the background with zero opacity.
    """
    t = samples.t
    n_rays, n_s = t.shape
    pts = rays.origins[:, None, :] + t[..., None] * rays.dirs[:, None, :]
    x = Tensor(pts.reshape(-1, 3), requires_grad=True)
    dirs = np.repeat(rays.dirs, n_s, axis=0)
    with tape:
        out = sdf.forward(x)
        d = out.d
    grad = tape.gradient(d, [x], create_graph=create_graph)[0]
    with tape:
        gnorm = grad.norm(axis=-1, keepdims=True, eps=1e-24)
        normals = grad / gnorm
        if isinstance(embedding, Tensor) and embedding.requires_grad:
            emb = embedding[np.repeat(np.arange(n_rays), n_s)]
        else:
            e = embedding.data if isinstance(embedding, Tensor) else np.asarray(embedding, dtype=np.float64)
            e = np.broadcast_to(e, (n_rays, e.shape[-1]))
            emb = Tensor(np.repeat(e, n_s, axis=0))
        rgb = color.forward(x, Tensor(dirs), normals, emb, out.f).reshape(n_rays, n_s, 3)
        w = neus_weights(d.reshape(n_rays, n_s), s)
        valid = samples.valid.astype(np.float64)[:, None]
        w = w * valid
        rgb_mid = (rgb[:, :-1] + rgb[:, 1:]) * 0.5
        acc = w.sum(axis=1)
        bg = np.asarray(background, dtype=np.float64)
        col = (w.reshape(n_rays, n_s - 1, 1) * rgb_mid).sum(axis=1)
        col = col + (1.0 - acc).reshape(n_rays, 1) * bg
        t_mid = 0.5 * (t[:, :-1] + t[:, 1:])
        depth = (w * t_mid).sum(axis=1) / (acc + 1e-10)
    n_mid = 0.5 * (normals.data.reshape(n_rays, n_s, 3)[:, :-1] + normals.data.reshape(n_rays, n_s, 3)[:, 1:])
    nsum = np.einsum("rs,rsk->rk", w.data, n_mid)
    nlen = np.linalg.norm(nsum, axis=-1, keepdims=True)
    normal = np.where(nlen > 1e-12, nsum / np.maximum(nlen, 1e-12), 0.0)
    samples.sdf = d.data.reshape(n_rays, n_s)
    samples.weights = w.data
    return RenderOutput(col, depth, normal, acc, w, d, grad, x)


def render_image(
    sdf,
    color,
    camera,
    grid,
    embedding: np.ndarray,
    s: float,
    cfg,
    bound_radius: float = 1.0,
    chunk: int = 1024,
    pixels: np.ndarray | None = None,
) -> dict[str, np.ndarray]:
    """Render a whole view (or the given pixels) without training graph."""
    from .camera import generate_rays
    from .sampling import sample_rays

    pix = camera.pixel_centers() if pixels is None else pixels
    rays = generate_rays(camera, pix, bound_radius)
    out = {k: [] for k in ("color", "depth", "normal", "opacity")}
    for lo in range(0, len(rays), chunk):
        sub = rays.subset(slice(lo, lo + chunk))
        samples = sample_rays(sub, grid, sdf, cfg, rng=None, s=s)
        r = render_rays(sdf, color, sub, samples, embedding, s, Tape(), cfg.background, create_graph=False)
        out["color"].append(r.color.data)
        out["depth"].append(r.depth.data)
        out["normal"].append(r.normal)
        out["opacity"].append(r.opacity.data)
    res = {k: np.concatenate(v, axis=0) for k, v in out.items()}
    if pixels is None:
        h, w = camera.height, camera.width
        res = {k: v.reshape((h, w) + v.shape[1:]) for k, v in res.items()}
    return res


def render_ray(sdf, color, ray: RayBatch, samples: RaySampleSet, embedding, s, tape=None, background=(0, 0, 0)):
    return render_rays(sdf, color, ray, samples, embedding, s, tape or Tape(), background, create_graph=False)
