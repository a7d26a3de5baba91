"""Analytic SDF scenes, a sphere-traced reference renderer and dataset synthesis.

Bundles written here use the same layout ``ingest.load_bundle`` reads, which
makes synthesis followed by ingestion a closed round trip.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ingest.colmap import CameraModel, ColmapModel, ImagePose, SparseCloud, rotmat_to_qvec, write_colmap_text
from .ingest.images import DEFAULT_GRAY_TOLERANCE, save_png
from .losses import LUMA_WEIGHTS
from .plyio import write_points_ply
from .render.camera import Camera, sphere_bounds


@dataclass
class Primitive:
    shape: str  # "sphere" or "box"
    center: tuple[float, float, float]
    size: tuple[float, ...]  # (radius,) for spheres, half extents for boxes
    albedo: tuple[float, float, float]
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))  # world-from-local

    def __post_init__(self) -> None:
        if self.shape not in ("sphere", "box"):
            raise ValueError(f"unknown primitive {self.shape!r}")
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        need = 1 if self.shape == "sphere" else 3
        if len(self.size) != need or min(self.size) <= 0:
            raise ValueError(f"{self.shape} needs {need} positive size values")

    def sdf(self, x: np.ndarray) -> np.ndarray:
        p = (np.asarray(x, dtype=np.float64) - np.asarray(self.center)) @ self.rotation
        if self.shape == "sphere":
            return np.linalg.norm(p, axis=-1) - self.size[0]
        q = np.abs(p) - np.asarray(self.size)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        return outside + np.minimum(q.max(axis=-1), 0.0)

    def area(self) -> float:
        if self.shape == "sphere":
            return 4.0 * np.pi * self.size[0] ** 2
        a, b, c = (2.0 * s for s in self.size)
        return 2.0 * (a * b + b * c + a * c)

    def sample_surface(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.shape == "sphere":
            v = rng.normal(size=(n, 3))
            p = self.size[0] * v / np.linalg.norm(v, axis=-1, keepdims=True)
        else:
            h = np.asarray(self.size)
            areas = np.array([h[1] * h[2], h[0] * h[2], h[0] * h[1]] * 2)
            face = rng.choice(6, size=n, p=areas / areas.sum())
            p = rng.uniform(-1.0, 1.0, size=(n, 3)) * h
            axis = face % 3
            sign = np.where(face < 3, 1.0, -1.0)
            p[np.arange(n), axis] = sign * h[axis]
        return p @ self.rotation.T + np.asarray(self.center)

    def to_json(self) -> dict:
        return {"shape": self.shape, "center": list(self.center), "size": list(self.size),
                "albedo": list(self.albedo), "rotation": self.rotation.tolist()}

    @classmethod
    def from_json(cls, d: dict) -> "Primitive":
        return cls(d["shape"], tuple(d["center"]), tuple(d["size"]), tuple(d["albedo"]),
                   np.asarray(d.get("rotation", np.eye(3))))


@dataclass
class AnalyticScene:
    primitives: list[Primitive]

    def __post_init__(self) -> None:
        if not self.primitives:
            raise ValueError("scene needs at least one primitive")

    def to_json(self) -> dict:
        return {"primitives": [p.to_json() for p in self.primitives]}

    @classmethod
    def from_json(cls, d: dict) -> "AnalyticScene":
        return cls([Primitive.from_json(p) for p in d["primitives"]])

    def bounding_radius(self) -> float:
        r = 0.0
        for p in self.primitives:
            ext = p.size[0] if p.shape == "sphere" else float(np.linalg.norm(p.size))
            r = max(r, float(np.linalg.norm(p.center)) + ext)
        return r


def _rot_y(deg: float) -> np.ndarray:
    a = np.deg2rad(deg)
    return np.array([[np.cos(a), 0.0, np.sin(a)], [0.0, 1.0, 0.0], [-np.sin(a), 0.0, np.cos(a)]])


def sphere_scene(radius: float = 0.5, albedo=(0.8, 0.8, 0.8)) -> AnalyticScene:
    return AnalyticScene([Primitive("sphere", (0.0, 0.0, 0.0), (radius,), albedo)])


def sphere_box_scene() -> AnalyticScene:
    """Red sphere overlapping a blue box; one connected object inside the unit sphere."""
    return AnalyticScene([
        Primitive("sphere", (-0.25, 0.0, 0.0), (0.35,), (0.85, 0.15, 0.10)),
        Primitive("box", (0.25, 0.0, 0.0), (0.25, 0.25, 0.25), (0.10, 0.20, 0.85), _rot_y(20.0)),
    ])


SCENES = {"sphere-box": sphere_box_scene, "sphere": sphere_scene}


def scene_sdf(scene: AnalyticScene, x: np.ndarray, return_index: bool = False):
    """Union distance and the albedo of the closest primitive at each point."""
    x = np.asarray(x, dtype=np.float64)
    ds = np.stack([p.sdf(x) for p in scene.primitives], axis=0)
    k = np.argmin(ds, axis=0)
    d = np.take_along_axis(ds, k[None], axis=0)[0]
    albedo = np.asarray([p.albedo for p in scene.primitives])[k]
    return (d, albedo, k) if return_index else (d, albedo)


def scene_normal(scene: AnalyticScene, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    g = np.empty_like(x)
    for k in range(3):
        e = np.zeros(3)
        e[k] = eps
        g[..., k] = (scene_sdf(scene, x + e)[0] - scene_sdf(scene, x - e)[0]) / (2 * eps)
    return g / np.maximum(np.linalg.norm(g, axis=-1, keepdims=True), 1e-12)


def sphere_trace(scene: AnalyticScene, origins: np.ndarray, dirs: np.ndarray, t0, t1,
                 eps: float = 1e-5, max_iter: int = 512) -> tuple[np.ndarray, np.ndarray]:
    """March each ray from ``t0`` until ``|d| < eps`` (hit) or ``t >= t1`` (escape).

    Returns distance along the ray and the hit flag.
    """
    n = len(origins)
    t = np.broadcast_to(np.asarray(t0, dtype=np.float64), (n,)).copy()
    t1 = np.broadcast_to(np.asarray(t1, dtype=np.float64), (n,))
    hit = np.zeros(n, bool)
    active = t < t1
    for _ in range(max_iter):
        idx = np.nonzero(active)[0]
        if len(idx) == 0:
            break
        d = scene_sdf(scene, origins[idx] + t[idx, None] * dirs[idx])[0]
        done = np.abs(d) < eps
        hit[idx[done]] = True
        t[idx[~done]] += np.abs(d[~done])
        escaped = t[idx] >= t1[idx]
        active[idx[done | escaped]] = False
    return t, hit & (t < t1)


@dataclass(frozen=True)
class Lighting:
    direction: tuple[float, float, float] = (0.4, -0.3, 0.85)  # towards the light
    ambient: float = 0.3
    diffuse: float = 0.7

    def shade(self, normals: np.ndarray) -> np.ndarray:
        l = np.asarray(self.direction) / np.linalg.norm(self.direction)
        return self.ambient + self.diffuse * np.maximum(normals @ l, 0.0)


def sphere_trace_render(scene: AnalyticScene, camera: Camera, lighting: Lighting = Lighting(),
                        tint=(1.0, 1.0, 1.0), background=(0.0, 0.0, 0.0)) -> dict[str, np.ndarray]:
    """Reference image, ray depth, hit mask, normals and primitive index of one view."""
    pix = camera.pixel_centers()
    dirs = camera.ray_directions(pix)
    origins = np.broadcast_to(camera.center, dirs.shape).copy()
    radius = scene.bounding_radius() + 1e-3
    near, far = sphere_bounds(origins, dirs, radius)
    t, hit = sphere_trace(scene, origins, dirs, near, np.where(far > near, far, 0.0))
    h, w = camera.height, camera.width
    rgb = np.broadcast_to(np.asarray(background, dtype=np.float64), (len(pix), 3)).copy()
    normal = np.zeros((len(pix), 3))
    prim = np.full(len(pix), -1)
    if hit.any():
        p = origins[hit] + t[hit, None] * dirs[hit]
        _, albedo, k = scene_sdf(scene, p, return_index=True)
        n = scene_normal(scene, p)
        rgb[hit] = np.clip(albedo * lighting.shade(n)[:, None] * np.asarray(tint), 0.0, 1.0)
        normal[hit] = n
        prim[hit] = k
    depth = np.where(hit, t, np.inf)
    return {"rgb": rgb.reshape(h, w, 3), "depth": depth.reshape(h, w), "hit": hit.reshape(h, w),
            "normal": normal.reshape(h, w, 3), "primitive": prim.reshape(h, w)}


def sample_union_surface(scene: AnalyticScene, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` points uniform by area over the union's outer surface."""
    areas = np.array([p.area() for p in scene.primitives])
    out = []
    have = 0
    while have < n:
        m = int(1.3 * (n - have)) + 16
        counts = rng.multinomial(m, areas / areas.sum())
        for i, (p, c) in enumerate(zip(scene.primitives, counts)):
            x = p.sample_surface(int(c), rng)
            keep = np.ones(len(x), bool)
            for j, q in enumerate(scene.primitives):
                if j != i:
                    keep &= q.sdf(x) > 0.0
            out.append(x[keep])
            have += int(keep.sum())
    pts = np.concatenate(out, axis=0)
    return pts[rng.permutation(len(pts))[:n]]


def point_visibility(scene: AnalyticScene, points: np.ndarray, cameras: dict[int, Camera],
                     tol: float = 1e-3) -> list[np.ndarray]:
    """Image ids whose frustum contains each point with a clear line of sight."""
    seen = np.zeros((len(points), len(cameras)), bool)
    ids = list(cameras)
    for j, cid in enumerate(ids):
        cam = cameras[cid]
        uv, z = cam.project(points)
        inside = (z > 0) & (uv[:, 0] >= 0) & (uv[:, 0] < cam.width) & (uv[:, 1] >= 0) & (uv[:, 1] < cam.height)
        idx = np.nonzero(inside)[0]
        if len(idx) == 0:
            continue
        vec = points[idx] - cam.center
        dist = np.linalg.norm(vec, axis=-1)
        dirs = vec / dist[:, None]
        origins = np.broadcast_to(cam.center, dirs.shape).copy()
        near, _ = sphere_bounds(origins, dirs, scene.bounding_radius() + 1e-3)
        t_stop = dist - tol
        t, hit = sphere_trace(scene, origins, dirs, np.minimum(near, t_stop), t_stop)
        seen[idx, j] = ~hit & (t >= t_stop)
    id_arr = np.asarray(ids, dtype=np.int64)
    return [id_arr[row] for row in seen]


def sample_surface_points(scene: AnalyticScene, n: int, noise_sigma: float, cameras: dict[int, Camera] | None = None,
                          rng: np.random.Generator | None = None) -> tuple[np.ndarray, list[np.ndarray] | None]:
    """Noisy surface samples (|d| <= 3 sigma) with occlusion-tested per-view visibility."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = rng if rng is not None else np.random.default_rng(0)
    pts = sample_union_surface(scene, n, rng)
    if noise_sigma > 0:
        noise = rng.normal(scale=noise_sigma, size=pts.shape)
        norm = np.linalg.norm(noise, axis=-1, keepdims=True)
        noise *= np.minimum(1.0, 3.0 * noise_sigma / np.maximum(norm, 1e-300))
        pts = pts + noise
    vis = None
    if cameras:
        vis = point_visibility(scene, pts, cameras, tol=max(1e-3, 3.0 * noise_sigma))
    return pts, vis


def view_sphere_cameras(n: int, radius: float, size: int, rng: np.random.Generator,
                        focal_scale: float = 1.4, jitter: float = 0.15) -> list[Camera]:
    """Cameras on a jittered Fibonacci sphere, all looking at the origin."""
    k = np.arange(n) + 0.5
    z = 1.0 - 2.0 * k / n
    phi = np.pi * (1.0 + 5.0 ** 0.5) * k
    dirs = np.stack([np.sqrt(1 - z * z) * np.cos(phi), np.sqrt(1 - z * z) * np.sin(phi), z], axis=-1)
    dirs = dirs + jitter * rng.normal(size=dirs.shape) / np.sqrt(n)
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    f = focal_scale * size
    return [Camera.look_at(radius * d, (0.0, 0.0, 0.0), (0.0, 0.0, 1.0), f, f, size, size) for d in dirs]


def gray_count(n_views: int, gray_fraction: float) -> int:
    return int(np.floor(gray_fraction * n_views + 0.5))


def to_gray_rgb(rgb: np.ndarray) -> np.ndarray:
    g = rgb @ np.asarray(LUMA_WEIGHTS)
    return np.repeat(g[..., None], 3, axis=-1)


@dataclass
class DatasetSpec:
    n_views: int = 20
    gray_fraction: float = 0.9
    image_size: int = 128
    n_val: int = 2
    n_dense: int = 50_000
    n_sparse: int = 1500
    n_gt: int = 100_000
    dense_sigma: float = 0.002
    sparse_sigma: float = 0.008
    camera_distance: float = 2.6
    tint_range: tuple[float, float] = (0.7, 1.3)
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.gray_fraction <= 1.0:
            raise ValueError(f"gray fraction must lie in [0, 1], got {self.gray_fraction}")
        if self.n_views < 2:
            raise ValueError("need at least 2 views")
        if self.n_val < 0 or self.image_size < 8:
            raise ValueError("invalid validation count or image size")


def make_dataset(scene: AnalyticScene, n_views: int, gray_fraction: float, out_dir,
                 spec: DatasetSpec | None = None) -> dict:
    """Render views, derive priors and write a complete scene bundle.

    Returns the manifest that was written.
    """
    spec = spec or DatasetSpec()
    spec = DatasetSpec(**{**spec.__dict__, "n_views": n_views, "gray_fraction": gray_fraction})
    rng = np.random.default_rng(spec.seed)
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)

    n_total = spec.n_views + spec.n_val
    cams = view_sphere_cameras(n_total, spec.camera_distance, spec.image_size, rng)
    order = rng.permutation(n_total)
    train_idx, val_idx = order[:spec.n_views], order[spec.n_views:]
    gray_set = set(rng.choice(spec.n_views, size=gray_count(spec.n_views, spec.gray_fraction), replace=False).tolist())
    lighting = Lighting()
    cameras: dict[int, Camera] = {}
    entries, poses, truth = [], {}, {}
    for image_id, (split, ci, k) in enumerate(
            [("train", c, k) for k, c in enumerate(train_idx)] + [("val", c, None) for c in val_idx], start=1):
        cam = cams[ci]
        is_gray = split == "train" and k in gray_set
        if split == "train" and not is_gray:
            tint = tuple(rng.uniform(*spec.tint_range, size=3))
        else:
            tint = (1.0, 1.0, 1.0)
        img = sphere_trace_render(scene, cam, lighting, tint)
        pix = to_gray_rgb(img["rgb"]) if is_gray else img["rgb"]
        name = f"view_{image_id:03d}.png"
        save_png(out / "images" / name, pix)
        save_png(out / "images" / f"view_{image_id:03d}.mask.png", np.ones(pix.shape[:2] + (3,)))
        cameras[image_id] = cam
        r_cw = cam.rotation.T
        poses[image_id] = ImagePose(image_id, rotmat_to_qvec(r_cw), -r_cw @ cam.center, 1, name)
        entries.append({"file": name, "split": split, "date": int(rng.integers(1890, 1960)) if is_gray else 2020})
        truth[image_id] = {"gray": is_gray, "tint": list(tint)}

    dense, dense_vis = sample_surface_points(scene, spec.n_dense, spec.dense_sigma, cameras, rng)
    sparse_xyz, sparse_vis = sample_surface_points(scene, spec.n_sparse, spec.sparse_sigma, cameras, rng)
    keep = np.array([len(v) >= 2 for v in sparse_vis])
    sparse_xyz = sparse_xyz[keep]
    sparse_vis = [v for v, k in zip(sparse_vis, keep) if k]
    sparse = _sparse_with_tracks(scene, sparse_xyz, sparse_vis, cameras, poses)
    write_colmap_text(ColmapModel({1: CameraModel(1, "PINHOLE", spec.image_size, spec.image_size,
                                                  np.array([cams[0].fx, cams[0].fy, cams[0].cx, cams[0].cy]))},
                                  poses, sparse), out / "sparse")
    dense_rgb = np.rint(scene_sdf(scene, dense)[1] * 255).astype(np.uint8)
    write_points_ply(out / "dense.ply", dense, dense_rgb, dense_vis)
    gt = sample_union_surface(scene, spec.n_gt, rng)
    write_points_ply(out / "gt_points.ply", gt)
    with open(out / "scene.json", "w", encoding="utf-8") as fh:
        json.dump(scene.to_json(), fh, indent=2)
    manifest = {
        "images": entries,
        "gray_tolerance": DEFAULT_GRAY_TOLERANCE,
        "image_dir": "images",
        "dense": "dense.ply",
        "ground_truth": {"points": "gt_points.ply", "scene": "scene.json"},
        "synthetic": {"lighting": lighting.__dict__, "views": truth, "spec": {
            k: (list(v) if isinstance(v, tuple) else v) for k, v in spec.__dict__.items()}},
    }
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
    return manifest


def _sparse_with_tracks(scene, xyz, vis, cameras, poses) -> SparseCloud:
    """Attach COLMAP-style 2D observations to images and tracks to points."""
    obs = {iid: ([], []) for iid in poses}
    tracks = []
    for i, (p, v) in enumerate(zip(xyz, vis)):
        tr = []
        for iid in v:
            uv, _ = cameras[int(iid)].project(p[None])
            xs, ids = obs[int(iid)]
            tr.append((int(iid), len(xs)))
            xs.append(uv[0])
            ids.append(i + 1)
        tracks.append(np.array(tr, dtype=np.int64).reshape(-1, 2))
    for iid, (xs, ids) in obs.items():
        poses[iid].xys = np.array(xs).reshape(-1, 2)
        poses[iid].point3d_ids = np.array(ids, dtype=np.int64)
    rgb = np.rint(scene_sdf(scene, xyz)[1] * 255).astype(np.uint8) if len(xyz) else np.zeros((0, 3), np.uint8)
    return SparseCloud(np.arange(1, len(xyz) + 1, dtype=np.int64), xyz, rgb, np.full(len(xyz), 0.5), tracks)


def load_analytic_scene(path) -> AnalyticScene:
    with open(path, encoding="utf-8") as fh:
        return AnalyticScene.from_json(json.load(fh))
