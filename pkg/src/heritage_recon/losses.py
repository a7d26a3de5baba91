"""Training objectives: gray-aware color loss, point-cloud geometry loss and
the eikonal regulariser, plus the single optimisation step combining them."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import OptimState, PoisonedGradientError, Tape, Tensor, concat, optimizer_step, where

log = logging.getLogger(__name__)

LUMA_WEIGHTS = (0.2126, 0.7152, 0.0722)


@dataclass
class LossConfig:
    lam: float = 0.1
    lam_learnable: bool = False
    beta_eik: float = 0.1
    luma: tuple[float, float, float] = LUMA_WEIGHTS
    color_loss: bool = True  # gray-aware branch; off treats gray rays as RGB

    def __post_init__(self) -> None:
        if self.lam < 0 or self.beta_eik < 0:
            raise ValueError("loss weights must be non-negative")
        if abs(sum(self.luma) - 1.0) > 1e-12:
            raise ValueError("luma weights must sum to 1")


def to_grayscale(c, weights=LUMA_WEIGHTS):
    """Perceptual luma of the last axis; accepts arrays or tensors.

    Evaluated as ``c_g + w_r (c_r - c_g) + w_b (c_b - c_g)``, which equals the
    weighted sum because the weights add up to one, and is exact on the gray
    axis and on pure primaries.
    """
    wr, _, wb = (float(v) for v in weights)
    if not isinstance(c, Tensor):
        c = np.asarray(c, dtype=np.float64)
    r, g, b = c[..., 0], c[..., 1], c[..., 2]
    return g + (r - g) * wr + (b - g) * wb


def color_loss(rendered, target, is_gray, weights=LUMA_WEIGHTS) -> Tensor:
    """Per-ray loss: ``0.5 (C - g(C'))^2`` on gray rays, ``0.5 |C - C'|^2`` otherwise.

    ``rendered`` and ``target`` are (R, 3); a gray ray's target luma is read
    from its first channel.  Returns an (R,) tensor.
    """
    rendered = rendered if isinstance(rendered, Tensor) else Tensor(np.atleast_2d(rendered))
    target = np.atleast_2d(np.asarray(target, dtype=np.float64))
    is_gray = np.atleast_1d(np.asarray(is_gray, dtype=bool))
    rgb_res = rendered - target
    rgb_term = (rgb_res * rgb_res).sum(axis=-1) * 0.5
    if not is_gray.any():
        return rgb_term
    gray_res = to_grayscale(rendered, weights) - target[:, 0]
    gray_term = gray_res * gray_res * 0.5
    return where(is_gray, gray_term, rgb_term)


def geometry_loss(sdf, points, lam) -> Tensor:
    """``lam * mean |d(x)|`` over points seen by the chosen image."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        raise ValueError("geometry loss needs at least one point")
    d = sdf.forward(Tensor(points)).d
    return d.abs().mean() * lam


def eikonal_from_gradients(grad: Tensor) -> Tensor:
    return ((grad.norm(axis=-1, eps=1e-24) - 1.0) ** 2).mean()


def eikonal_loss(sdf, points, tape: Tape | None = None) -> Tensor:
    """Mean ``(|grad d| - 1)^2``; differentiable w.r.t. the SDF parameters."""
    tape = tape if tape is not None else Tape()
    x = Tensor(np.asarray(points, dtype=np.float64).reshape(-1, 3), requires_grad=True)
    with tape:
        d = sdf.forward(x).d
    g = tape.gradient(d, [x], create_graph=True)[0]
    with tape:
        return eikonal_from_gradients(g)


@dataclass
class RayTargets:
    rgb: np.ndarray  # (R, 3); gray rays carry their luma in every channel
    is_gray: np.ndarray  # (R,)
    rows: np.ndarray  # (R,) appearance-table rows


@dataclass
class StepResult:
    l_color: float
    l_geo: float | None
    l_eik: float
    total: float
    s: float
    skipped: bool = False


def total_loss(
    colors: Tensor,
    targets: RayTargets,
    geo: Tensor | None,
    eik: Tensor,
    cfg: LossConfig,
) -> tuple[Tensor, Tensor]:
    gray = targets.is_gray if cfg.color_loss else np.zeros(len(targets.is_gray), bool)
    lc = color_loss(colors, targets.rgb, gray, cfg.luma).mean()
    total = lc + eik * cfg.beta_eik
    if geo is not None:
        total = total + geo
    return total, lc


def apply_gradients(params: list[Tensor], grads: list[np.ndarray], state: OptimState, lr: float | None = None) -> bool:
    """Optimizer step; returns False (and leaves parameters alone) on poisoned gradients."""
    try:
        optimizer_step(params, grads, state, lr)
    except PoisonedGradientError:
        log.warning("non-finite gradient at step %d; update skipped", state.step)
        return False
    return True


def train_step(model, rays, samples, targets: RayTargets, geo_points, cfg: LossConfig,
               state: OptimState, eik_points: np.ndarray | None = None, lr: float | None = None) -> StepResult:
    """One optimisation step over a ray batch.

    ``model`` bundles ``sdf``, ``color``, ``table``, ``log_s`` and optionally
    ``log_lam``.  ``geo_points`` is the subsampled visible set of the chosen
    image or None to skip the geometry term.
    """
    from .render.volume import render_rays, sharpness

    tape = Tape()
    with tape:
        s = sharpness(model.log_s)
        emb = model.table.lookup(targets.rows)
    out = render_rays(model.sdf, model.color, rays, samples, emb, s, tape, create_graph=True)
    grads_eik = [out.sdf_grad]
    if eik_points is not None and len(eik_points):
        x = Tensor(eik_points, requires_grad=True)
        with tape:
            d_extra = model.sdf.forward(x).d
        grads_eik.append(tape.gradient(d_extra, [x], create_graph=True)[0])
    with tape:
        eik = eikonal_from_gradients(concat(grads_eik, axis=0) if len(grads_eik) > 1 else grads_eik[0])
        geo = None
        if geo_points is not None:
            lam = model.lam_tensor(cfg)
            geo = geometry_loss(model.sdf, geo_points, lam)
        total, lc = total_loss(out.color, targets, geo, eik, cfg)
    result = StepResult(
        l_color=float(lc.data),
        l_geo=None if geo is None else float(geo.data),
        l_eik=float(eik.data),
        total=float(total.data),
        s=float(np.exp(10.0 * model.log_s.data)),
    )
    if not math.isfinite(result.total):
        log.warning("non-finite loss at step %d; step skipped", state.step)
        result.skipped = True
        return result
    params = model.parameters(cfg)
    grads = [g.data for g in tape.gradient(total, params)]
    if not apply_gradients(params, grads, state, lr):
        result.skipped = True
    return result
