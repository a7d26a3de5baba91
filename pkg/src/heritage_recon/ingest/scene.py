"""Scene container: cameras, image records, sparse and dense clouds, bounds and
the similarity transform into the normalized frame."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from ..plyio import read_points_ply, write_points_ply
from ..render.camera import Camera
from .colmap import (CameraModel, ColmapModel, ImagePose, SparseCloud, qvec_to_rotmat, read_colmap_text,
                     write_colmap_text)
from .images import DEFAULT_GRAY_TOLERANCE, Placement, detect_grayscale, load_and_resize_image, load_mask, target_size

log = logging.getLogger(__name__)


class SceneError(ValueError):
    pass


class DegenerateCloudError(SceneError):
    pass


@dataclass
class ImageRecord:
    pose: ImagePose
    split: str | None = None  # "train", "val" or None when not listed in the manifest
    date: int | None = None
    pixels: np.ndarray | None = None  # (H, W, 3) in [0, 1]
    mask: np.ndarray | None = None  # (H, W) bool, True = valid
    is_gray: bool = False
    placement: Placement = Placement(1.0, 1.0, 0.0, 0.0)
    path: str | None = None

    def __post_init__(self) -> None:
        if self.pixels is not None and self.mask is not None and self.pixels.shape[:2] != self.mask.shape:
            raise SceneError(f"image {self.image_id}: pixels {self.pixels.shape[:2]} and mask {self.mask.shape} differ")

    @property
    def image_id(self) -> int:
        return self.pose.image_id

    @property
    def camera_id(self) -> int:
        return self.pose.camera_id

    @property
    def name(self) -> str:
        return self.pose.name


@dataclass
class DenseCloud:
    xyz: np.ndarray  # (N, 3)
    rgb: np.ndarray | None  # (N, 3) uint8
    visibility: list[np.ndarray]  # per point image ids

    def __len__(self) -> int:
        return len(self.xyz)


@dataclass(frozen=True)
class SimilarityTransform:
    """``x_normalized = scale * (x - center)``."""

    scale: float = 1.0
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def apply(self, x: np.ndarray) -> np.ndarray:
        return self.scale * (np.asarray(x, dtype=np.float64) - np.asarray(self.center))

    def inverse(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) / self.scale + np.asarray(self.center)

    def compose(self, other: "SimilarityTransform") -> "SimilarityTransform":
        """Apply ``self`` first, then ``other``."""
        c = np.asarray(self.center) + np.asarray(other.center) / self.scale
        return SimilarityTransform(self.scale * other.scale, tuple(float(v) for v in c))

    def to_json(self) -> dict:
        return {"scale": self.scale, "center": list(self.center),
                "convention": "x_normalized = scale * (x - center)"}

    @classmethod
    def from_json(cls, d: dict) -> "SimilarityTransform":
        return cls(float(d["scale"]), tuple(float(v) for v in d["center"]))


@dataclass(frozen=True)
class SceneBounds:
    center: tuple[float, float, float]
    object_radius: float
    sampling_radius: float  # V_sfm

    def __post_init__(self) -> None:
        if self.sampling_radius < self.object_radius:
            raise SceneError("sampling radius must be at least the object radius")


@dataclass
class Scene:
    cameras: dict[int, CameraModel]
    images: dict[int, ImageRecord]
    sparse: SparseCloud
    dense: DenseCloud | None
    bounds: SceneBounds
    transform: SimilarityTransform = SimilarityTransform()
    gray_tolerance: float = DEFAULT_GRAY_TOLERANCE
    _vis_index: dict | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        for tr in self.sparse.tracks:
            bad = set(int(i) for i in tr[:, 0]) - self.images.keys()
            if bad:
                raise SceneError(f"sparse track references unknown images {sorted(bad)}")
        if self.dense is not None and len(self.dense.visibility):
            seen = np.unique(np.concatenate([np.asarray(v, np.int64) for v in self.dense.visibility]))
            bad = set(seen.tolist()) - self.images.keys()
            if bad:
                raise SceneError(f"dense visibility references unknown images {sorted(bad)}")

    def camera(self, image_id: int) -> Camera:
        """Pinhole camera of an image, intrinsics adjusted to its loaded resolution."""
        rec = self.images[image_id]
        cm = self.cameras[rec.camera_id]
        fx, fy, cx, cy = cm.intrinsics
        pl = rec.placement
        if rec.pixels is not None:
            h, w = rec.pixels.shape[:2]
        else:
            w, h = int(round(cm.width * pl.sx + 2 * pl.ox)), int(round(cm.height * pl.sy + 2 * pl.oy))
        return Camera(fx * pl.sx, fy * pl.sy, cx * pl.sx + pl.ox, cy * pl.sy + pl.oy, w, h,
                      rec.pose.rotation, rec.pose.center)

    def split_ids(self, split: str) -> list[int]:
        return sorted(i for i, r in self.images.items() if r.split == split)

    def _visibility_index(self) -> dict[int, np.ndarray]:
        if self._vis_index is None:
            index = {i: np.zeros(0, np.int64) for i in self.images}
            if self.dense is not None and len(self.dense.visibility):
                lens = np.array([len(v) for v in self.dense.visibility])
                ids = np.concatenate([np.asarray(v, np.int64) for v in self.dense.visibility])
                owner = np.repeat(np.arange(len(lens)), lens)
                for iid in np.unique(ids):
                    index[int(iid)] = np.unique(owner[ids == iid])
            self._vis_index = index
        return self._vis_index


def visible_points(scene: Scene, image_id: int) -> np.ndarray:
    """Dense points seen by ``image_id`` and lying within the sampling radius."""
    if image_id not in scene.images:
        raise KeyError(f"unknown image id {image_id}")
    if scene.dense is None:
        return np.zeros((0, 3))
    idx = scene._visibility_index()[image_id]
    pts = scene.dense.xyz[idx]
    r = np.linalg.norm(pts - np.asarray(scene.bounds.center), axis=-1)
    return pts[r <= scene.bounds.sampling_radius]


def sparse_visible_points(scene: Scene, image_id: int) -> np.ndarray:
    """Sparse points whose track contains ``image_id``, within the sampling radius."""
    if image_id not in scene.images:
        raise KeyError(f"unknown image id {image_id}")
    sel = [i for i, tr in enumerate(scene.sparse.tracks) if np.any(tr[:, 0] == image_id)]
    pts = scene.sparse.xyz[np.asarray(sel, dtype=np.int64)].reshape(-1, 3)
    r = np.linalg.norm(pts - np.asarray(scene.bounds.center), axis=-1)
    return pts[r <= scene.bounds.sampling_radius]


def assign_visibility_from_sparse(dense_xyz: np.ndarray, sparse: SparseCloud) -> list[np.ndarray]:
    """Give each dense point the track images of its nearest sparse point."""
    if len(sparse) == 0:
        raise SceneError("nearest-track visibility needs a non-empty sparse cloud")
    _, nn = cKDTree(sparse.xyz).query(dense_xyz, k=1)
    tracks = [sparse.track_images(i) for i in range(len(sparse))]
    return [tracks[j] for j in nn]


def load_dense_cloud(path, sparse: SparseCloud | None = None) -> DenseCloud:
    xyz, rgb, vis = read_points_ply(path)
    if len(xyz) == 0:
        raise SceneError(f"{path}: dense cloud is empty")
    if vis is None:
        if sparse is None:
            raise SceneError(f"{path}: no visibility lists and no sparse cloud to borrow them from")
        log.info("dense cloud has no visibility; using nearest sparse tracks")
        vis = assign_visibility_from_sparse(xyz, sparse)
    return DenseCloud(xyz, rgb, vis)


def robust_bounds(points: np.ndarray, lo_pct: float = 5.0, hi_pct: float = 95.0) -> tuple[np.ndarray, float]:
    """Centre of the percentile box and the percentile distance to it."""
    lo = np.percentile(points, lo_pct, axis=0)
    hi = np.percentile(points, hi_pct, axis=0)
    center = 0.5 * (lo + hi)
    radius = float(np.percentile(np.linalg.norm(points - center, axis=-1), hi_pct))
    return center, radius


def check_not_degenerate(points: np.ndarray, rel_tol: float = 1e-6) -> None:
    if len(points) < 4:
        raise DegenerateCloudError(f"need at least 4 points to normalize, got {len(points)}")
    sv = np.linalg.svd(points - points.mean(axis=0), compute_uv=False)
    if sv[0] <= 0 or sv[2] / sv[0] < rel_tol:
        raise DegenerateCloudError("point cloud is coplanar or collinear")


def _move_pose(pose: ImagePose, tf: SimilarityTransform) -> ImagePose:
    r_cw = qvec_to_rotmat(pose.qvec)
    c = tf.apply(pose.center)
    return replace(pose, tvec=-r_cw @ c)


def transform_scene(scene: Scene, tf: SimilarityTransform, bounds: SceneBounds) -> Scene:
    images = {i: replace(r, pose=_move_pose(r.pose, tf)) for i, r in scene.images.items()}
    sp = scene.sparse
    sparse = SparseCloud(sp.ids.copy(), tf.apply(sp.xyz) if len(sp) else sp.xyz.copy(), sp.rgb.copy(),
                         sp.error * tf.scale, [t.copy() for t in sp.tracks])
    dense = None
    if scene.dense is not None:
        dense = DenseCloud(tf.apply(scene.dense.xyz), scene.dense.rgb, scene.dense.visibility)
    return Scene(dict(scene.cameras), images, sparse, dense, bounds,
                 scene.transform.compose(tf), scene.gray_tolerance)


def normalize_scene(scene: Scene, radius_multiplier: float = 2.0, target_radius: float = 0.5) -> Scene:
    """Map the robust object sphere of the sparse cloud to radius ``target_radius``
    at the origin; the sampling radius becomes ``radius_multiplier`` times that."""
    if len(scene.sparse) == 0:
        raise SceneError("normalization needs sparse points")
    if radius_multiplier < 1.0:
        raise SceneError("radius multiplier must be >= 1")
    check_not_degenerate(scene.sparse.xyz)
    center, radius = robust_bounds(scene.sparse.xyz)
    if radius <= 0:
        raise DegenerateCloudError("robust radius is zero")
    tf = SimilarityTransform(target_radius / radius, tuple(float(v) for v in center))
    bounds = SceneBounds((0.0, 0.0, 0.0), target_radius, radius_multiplier * target_radius)
    return transform_scene(scene, tf, bounds)


# -- bundles ------------------------------------------------------------------

def read_manifest(bundle) -> dict:
    p = Path(bundle) / "manifest.json"
    if not p.exists():
        raise FileNotFoundError(f"missing manifest {p}")
    with open(p, encoding="utf-8") as fh:
        m = json.load(fh)
    if "images" not in m or not isinstance(m["images"], list):
        raise SceneError(f"{p}: manifest needs an 'images' list")
    return m


def load_bundle(bundle, image_long_side: int | None = 512, load_pixels: bool = True,
                normalize: bool = True, radius_multiplier: float = 2.0) -> Scene:
    """Read a scene bundle: COLMAP text model, dense PLY, manifest, images and masks."""
    bundle = Path(bundle)
    manifest = read_manifest(bundle)
    model = read_colmap_text(bundle)
    tol = float(manifest.get("gray_tolerance", DEFAULT_GRAY_TOLERANCE))
    by_name = {p.name: p for p in model.images.values()}
    entries = {}
    for e in manifest["images"]:
        if e["file"] not in by_name and Path(e["file"]).name not in by_name:
            raise SceneError(f"manifest image {e['file']!r} is not registered in images.txt")
        if e.get("split") not in ("train", "val"):
            raise SceneError(f"manifest image {e['file']!r} has split {e.get('split')!r}; expected train or val")
        entries[e["file"] if e["file"] in by_name else Path(e["file"]).name] = e
    image_dir = bundle / manifest.get("image_dir", "images")
    target = None
    records = {}
    for iid in sorted(model.images):
        pose = model.images[iid]
        e = entries.get(pose.name)
        rec = ImageRecord(pose, split=None if e is None else e["split"],
                          date=None if e is None else e.get("date"))
        if e is not None:
            rec.path = str(image_dir / pose.name)
        if e is not None and load_pixels:
            if target is None:
                cm = model.cameras[pose.camera_id]
                target = target_size(cm.width, cm.height, image_long_side)
            pix, box, pl = load_and_resize_image(rec.path, target)
            rec.pixels, rec.placement = pix, pl
            rec.mask = box & load_mask(rec.path, pix.shape[:2], pl)
            rec.is_gray = detect_grayscale(pix, tol, rec.mask)
        elif e is not None:
            cm = model.cameras[pose.camera_id]
            if target is None:
                target = target_size(cm.width, cm.height, image_long_side)
            s = min(target[0] / cm.width, target[1] / cm.height)
            nw, nh = int(round(cm.width * s)), int(round(cm.height * s))
            rec.placement = Placement(nw / cm.width, nh / cm.height, float((target[0] - nw) // 2),
                                      float((target[1] - nh) // 2))
        records[iid] = rec
    dense = None
    dense_path = bundle / manifest.get("dense", "dense.ply")
    if dense_path.exists():
        dense = load_dense_cloud(dense_path, model.points)
    center, radius = robust_bounds(model.points.xyz) if len(model.points) else (np.zeros(3), 1.0)
    bounds = SceneBounds(tuple(float(v) for v in center), radius, radius_multiplier * radius)
    scene = Scene(model.cameras, records, model.points, dense, bounds, gray_tolerance=tol)
    return normalize_scene(scene, radius_multiplier) if normalize else scene


def write_normalized_bundle(scene: Scene, out_dir, image_dir=None) -> None:
    """Write the scene's model, dense cloud, manifest and transform.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    poses = {i: r.pose for i, r in scene.images.items()}
    write_colmap_text(ColmapModel(scene.cameras, poses, scene.sparse), out / "sparse")
    if scene.dense is not None:
        write_points_ply(out / "dense.ply", scene.dense.xyz, scene.dense.rgb, scene.dense.visibility)
    entries = []
    for i in sorted(scene.images):
        r = scene.images[i]
        if r.split is None:
            continue
        e = {"file": r.name, "split": r.split}
        if r.date is not None:
            e["date"] = r.date
        entries.append(e)
    manifest = {"images": entries, "gray_tolerance": scene.gray_tolerance}
    if image_dir is not None:
        manifest["image_dir"] = str(Path(image_dir).resolve())
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
    write_transform(scene, out / "transform.json")


def write_transform(scene: Scene, path) -> None:
    doc = scene.transform.to_json()
    doc["bounds"] = {"center": list(scene.bounds.center), "object_radius": scene.bounds.object_radius,
                     "sampling_radius": scene.bounds.sampling_radius}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)


def read_transform(path) -> tuple[SimilarityTransform, SceneBounds | None]:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    b = doc.get("bounds")
    bounds = None if b is None else SceneBounds(tuple(b["center"]), b["object_radius"], b["sampling_radius"])
    return SimilarityTransform.from_json(doc), bounds


def parse_colmap_text(path) -> Scene:
    """Scene from a COLMAP text model alone: poses, intrinsics and sparse tracks."""
    model = read_colmap_text(path)
    records = {i: ImageRecord(p) for i, p in model.images.items()}
    if len(model.points) >= 1:
        center, radius = robust_bounds(model.points.xyz)
    else:
        center, radius = np.zeros(3), 1.0
    bounds = SceneBounds(tuple(float(v) for v in center), radius, 2.0 * radius)
    return Scene(model.cameras, records, model.points, None, bounds)
