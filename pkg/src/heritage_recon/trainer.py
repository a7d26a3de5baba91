"""Training loop: ray batches from one image per step, occupancy refreshes,
checkpoints with exact-resume state and an NDJSON metrics log."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import OptimState
from .autodiff.optim import cosine_lr
from .config import RunConfig
from .ingest.scene import Scene, sparse_visible_points, visible_points
from .losses import LossConfig, RayTargets, StepResult, train_step
from .model import NeuralScene
from .render.camera import generate_rays
from .render.occupancy import OccupancyGrid, build_occupancy_grid, update_occupancy_grid
from .render.sampling import RenderConfig, sample_rays

log = logging.getLogger(__name__)


class NumericalFailure(RuntimeError):
    """Too many consecutive steps produced non-finite losses or gradients."""


@dataclass
class ImageData:
    image_id: int
    row: int
    camera: object
    pixels: np.ndarray  # (H*W, 3)
    valid: np.ndarray  # flat indices of usable pixels
    is_gray: bool
    geo_points: np.ndarray  # (K, 3), possibly empty


def render_config(cfg: RunConfig) -> RenderConfig:
    s = cfg.sampler
    return RenderConfig(s.n_coarse, s.n_importance, cfg.train.s_init, s.upsample_s, tuple(s.background))


def loss_config(cfg: RunConfig) -> LossConfig:
    l = cfg.loss
    return LossConfig(lam=l.lam, lam_learnable=l.lam_learnable, beta_eik=l.beta_eik, color_loss=l.color_loss)


def grid_threshold(cfg: RunConfig, grid: OccupancyGrid) -> float:
    if cfg.sampler.grid_threshold is not None:
        return cfg.sampler.grid_threshold
    return 1.5 * float(np.linalg.norm(grid.voxel_size))


def initial_grid(cfg: RunConfig, scene: Scene) -> OccupancyGrid:
    r = scene.bounds.sampling_radius
    c = np.asarray(scene.bounds.center)
    pts = scene.sparse.xyz
    if len(pts) == 0 and scene.dense is not None:
        pts = scene.dense.xyz
    return build_occupancy_grid(pts, cfg.sampler.grid_resolution, cfg.sampler.grid_dilation, (c - r, c + r))


def _fmt(v):
    return None if v is None else float(v)


class Trainer:
    def __init__(self, cfg: RunConfig, scene: Scene, out_dir=None):
        self.cfg = cfg.validate()
        self.scene = scene
        self.out = Path(out_dir if out_dir is not None else cfg.out)
        self.rcfg = render_config(cfg)
        self.lcfg = loss_config(cfg)
        self.train_ids = scene.split_ids("train")
        if not self.train_ids:
            raise ValueError("scene has no training images")
        if cfg.loss.geo == "dense" and (scene.dense is None or len(scene.dense) == 0):
            raise ValueError("dense geometry prior requested but the scene has no dense cloud")
        self.model: NeuralScene | None = None
        self.state: OptimState | None = None
        self.grid: OccupancyGrid | None = None
        self.rng: np.random.Generator | None = None
        self.step = 0
        self.bad_steps = 0
        self.images: list[ImageData] = []

    # -- setup ---------------------------------------------------------------
    def _prepare_images(self) -> None:
        self.images = []
        for row, iid in enumerate(self.train_ids):
            rec = self.scene.images[iid]
            if rec.pixels is None:
                raise ValueError(f"training image {iid} has no pixels loaded")
            mask = rec.mask if rec.mask is not None else np.ones(rec.pixels.shape[:2], bool)
            if self.cfg.loss.geo == "dense":
                geo = visible_points(self.scene, iid)
            elif self.cfg.loss.geo == "sparse":
                geo = sparse_visible_points(self.scene, iid)
            else:
                geo = np.zeros((0, 3))
            self.images.append(ImageData(iid, row, self.scene.camera(iid), rec.pixels.reshape(-1, 3),
                                         np.flatnonzero(mask.ravel()), bool(rec.is_gray), geo))

    def initialize(self) -> "Trainer":
        self.rng = np.random.default_rng(self.cfg.train.seed)
        self.model = NeuralScene.create(self.cfg.fields, self.train_ids, self.rng,
                                        s_init=self.cfg.train.s_init, lam_init=max(self.cfg.loss.lam, 1e-12))
        self.state = OptimState.for_params(self.model.parameters(self.lcfg), lr=self.cfg.train.lr)
        self.grid = initial_grid(self.cfg, self.scene)
        self.step = 0
        self._prepare_images()
        return self

    # -- one iteration ---------------------------------------------------------
    def lr_at(self, step: int) -> float:
        if self.cfg.train.lr_schedule == "cosine":
            return cosine_lr(self.cfg.train.lr, step, self.cfg.train.iterations)
        return self.cfg.train.lr

    def train_one(self) -> StepResult:
        rng = self.rng
        img = self.images[int(rng.integers(len(self.images)))]
        pick = img.valid[rng.integers(len(img.valid), size=self.cfg.train.batch_rays)]
        w = img.camera.width
        pix = np.stack([pick % w + 0.5, pick // w + 0.5], axis=-1).astype(np.float64)
        rays = generate_rays(img.camera, pix, self.scene.bounds.sampling_radius)
        samples = sample_rays(rays, self.grid, self.model.sdf, self.rcfg, rng, s=self.model.s)
        targets = RayTargets(img.pixels[pick], np.full(len(pick), img.is_gray), np.full(len(pick), img.row))
        geo = None
        if self.cfg.loss.geo != "none" and len(img.geo_points):
            k = min(self.cfg.loss.geo_points, len(img.geo_points))
            geo = img.geo_points[rng.choice(len(img.geo_points), size=k, replace=False)]
        eik = None
        if self.cfg.loss.eik_points:
            r = self.scene.bounds.sampling_radius
            eik = rng.uniform(-r, r, size=(self.cfg.loss.eik_points, 3)) + np.asarray(self.scene.bounds.center)
        res = train_step(self.model, rays, samples, targets, geo, self.lcfg, self.state,
                         eik_points=eik, lr=self.lr_at(self.step))
        self.step += 1
        if res.skipped:
            self.bad_steps += 1
            if self.bad_steps >= self.cfg.train.max_bad_steps:
                raise NumericalFailure(f"{self.bad_steps} consecutive non-finite steps at step {self.step}")
        else:
            self.bad_steps = 0
        if self.step % self.cfg.sampler.grid_update_every == 0:
            self.grid = update_occupancy_grid(self.grid, self.model.sdf, grid_threshold(self.cfg, self.grid))
        return res

    @staticmethod
    def log_record(step: int, res: StepResult) -> dict:
        rec = {"step": step, "l_color": _fmt(res.l_color)}
        if res.l_geo is not None:
            rec["l_geo"] = _fmt(res.l_geo)
        rec.update({"l_eik": _fmt(res.l_eik), "total": _fmt(res.total), "s": _fmt(res.s)})
        if res.skipped:
            rec["skipped"] = True
        return rec

    def run(self, iterations: int | None = None, log_path=None, checkpoint_dir=None, callback=None) -> dict:
        """Train up to ``iterations`` total steps, appending to the metrics log."""
        total = self.cfg.train.iterations if iterations is None else iterations
        log_path = Path(log_path) if log_path is not None else self.out / "metrics.ndjson"
        ckpt_dir = Path(checkpoint_dir) if checkpoint_dir is not None else self.out / "checkpoints"
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        log_path.parent.mkdir(parents=True, exist_ok=True)
        last = None
        with open(log_path, "a", encoding="utf-8") as fh:
            while self.step < total:
                res = self.train_one()
                last = res
                fh.write(json.dumps(self.log_record(self.step, res)) + "\n")
                fh.flush()
                if callback is not None:
                    callback(self.step, res)
                if self.step % self.cfg.train.checkpoint_every == 0 and self.step < total:
                    self.save(ckpt_dir / f"step_{self.step:06d}.ckpt")
        final = ckpt_dir / "final.ckpt"
        self.save(final)
        return {"steps": self.step, "checkpoint": str(final),
                "last": None if last is None else self.log_record(self.step, last)}

    # -- persistence -------------------------------------------------------------
    def save(self, path) -> None:
        extra = {"grid.occupied": self.grid.occupied.astype(np.float64),
                 "grid.seed": self.grid.seed.astype(np.float64),
                 "grid.lo": self.grid.lo, "grid.hi": self.grid.hi}
        for k, (m, v) in enumerate(zip(self.state.m, self.state.v)):
            extra[f"opt.m.{k}"] = m
            extra[f"opt.v.{k}"] = v
        meta = {
            "step": self.step,
            "bad_steps": self.bad_steps,
            "optimizer": {"step": self.state.step, "lr": self.state.lr, "beta1": self.state.beta1,
                          "beta2": self.state.beta2, "eps": self.state.eps},
            "rng": _rng_state(self.rng),
            "config": self.cfg.to_dict(),
            "transform": self.scene.transform.to_json(),
            "bounds": {"center": list(self.scene.bounds.center), "object_radius": self.scene.bounds.object_radius,
                       "sampling_radius": self.scene.bounds.sampling_radius},
            "render": {"n_coarse": self.rcfg.n_coarse, "n_importance": self.rcfg.n_importance,
                       "upsample_s": self.rcfg.upsample_s, "background": list(self.rcfg.background)},
        }
        self.model.save(path, extra, meta)

    @classmethod
    def resume(cls, cfg: RunConfig, scene: Scene, checkpoint, out_dir=None) -> "Trainer":
        tr = cls(cfg, scene, out_dir)
        model, arrays, meta = NeuralScene.load(checkpoint)
        tr.model = model
        params = model.parameters(tr.lcfg)
        o = meta["optimizer"]
        tr.state = OptimState([arrays[f"opt.m.{k}"].copy() for k in range(len(params))],
                              [arrays[f"opt.v.{k}"].copy() for k in range(len(params))],
                              step=o["step"], lr=o["lr"], beta1=o["beta1"], beta2=o["beta2"], eps=o["eps"])
        tr.grid = grid_from_checkpoint(arrays)
        tr.rng = np.random.default_rng()
        tr.rng.bit_generator.state = meta["rng"]
        tr.step = int(meta["step"])
        tr.bad_steps = int(meta.get("bad_steps", 0))
        tr._prepare_images()
        return tr


def _rng_state(rng: np.random.Generator) -> dict:
    st = rng.bit_generator.state
    return json.loads(json.dumps(st, default=int))


def load_model(checkpoint) -> tuple[NeuralScene, dict, dict]:
    """Model plus the raw arrays and metadata of a training checkpoint."""
    return NeuralScene.load(checkpoint)


def grid_from_checkpoint(arrays: dict) -> OccupancyGrid:
    occ = arrays["grid.occupied"] > 0.5
    return OccupancyGrid(occ.shape[0], arrays["grid.lo"].copy(), arrays["grid.hi"].copy(), occ,
                         arrays["grid.seed"] > 0.5)
