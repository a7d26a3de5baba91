"""COLMAP text model reader and writer (cameras.txt, images.txt, points3D.txt).

Poses in images.txt map world to camera: ``x_cam = R(q) x_world + t``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SUPPORTED_MODELS = {"PINHOLE": 4, "SIMPLE_PINHOLE": 3}


class ColmapParseError(ValueError):
    def __init__(self, path, lineno: int, msg: str):
        super().__init__(f"{path}:{lineno}: {msg}")
        self.path = str(path)
        self.lineno = lineno


class UnsupportedCameraModelError(ValueError):
    pass


def qvec_to_rotmat(q) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * y * y - 2 * z * z, 2 * x * y - 2 * w * z, 2 * z * x + 2 * w * y],
        [2 * x * y + 2 * w * z, 1 - 2 * x * x - 2 * z * z, 2 * y * z - 2 * w * x],
        [2 * z * x - 2 * w * y, 2 * y * z + 2 * w * x, 1 - 2 * x * x - 2 * y * y],
    ])


def rotmat_to_qvec(R) -> np.ndarray:
    """Unit quaternion (w, x, y, z) with w >= 0 for a rotation matrix."""
    R = np.asarray(R, dtype=np.float64)
    rxx, ryx, rzx, rxy, ryy, rzy, rxz, ryz, rzz = R.ravel()
    k = np.array([
        [rxx - ryy - rzz, 0, 0, 0],
        [ryx + rxy, ryy - rxx - rzz, 0, 0],
        [rzx + rxz, rzy + ryz, rzz - rxx - ryy, 0],
        [ryz - rzy, rzx - rxz, rxy - ryx, rxx + ryy + rzz],
    ]) / 3.0
    vals, vecs = np.linalg.eigh(k)
    q = vecs[[3, 0, 1, 2], np.argmax(vals)]
    return -q if q[0] < 0 else q


@dataclass
class CameraModel:
    camera_id: int
    model: str
    width: int
    height: int
    params: np.ndarray

    @property
    def intrinsics(self) -> tuple[float, float, float, float]:
        """(fx, fy, cx, cy)."""
        p = self.params
        if self.model == "SIMPLE_PINHOLE":
            return float(p[0]), float(p[0]), float(p[1]), float(p[2])
        return float(p[0]), float(p[1]), float(p[2]), float(p[3])


@dataclass
class ImagePose:
    image_id: int
    qvec: np.ndarray  # world-to-camera rotation, (w, x, y, z)
    tvec: np.ndarray  # world-to-camera translation
    camera_id: int
    name: str
    xys: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    point3d_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def rotation(self) -> np.ndarray:
        """World-from-camera rotation."""
        return qvec_to_rotmat(self.qvec).T

    @property
    def center(self) -> np.ndarray:
        return -qvec_to_rotmat(self.qvec).T @ self.tvec


@dataclass
class SparseCloud:
    ids: np.ndarray  # (N,) COLMAP point ids
    xyz: np.ndarray  # (N, 3)
    rgb: np.ndarray  # (N, 3) uint8
    error: np.ndarray  # (N,)
    tracks: list[np.ndarray]  # per point (K, 2): image id, point2D index

    def __len__(self) -> int:
        return len(self.xyz)

    def track_images(self, i: int) -> np.ndarray:
        return np.unique(self.tracks[i][:, 0])

    @classmethod
    def empty(cls) -> "SparseCloud":
        return cls(np.zeros(0, np.int64), np.zeros((0, 3)), np.zeros((0, 3), np.uint8), np.zeros(0), [])


@dataclass
class ColmapModel:
    cameras: dict[int, CameraModel]
    images: dict[int, ImagePose]
    points: SparseCloud


def _data_lines(path):
    """Yield (lineno, text) of non-comment lines, keeping blank lines."""
    with open(path, "r", encoding="utf-8") as fh:
        for i, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if line.lstrip().startswith("#"):
                continue
            yield i, line


def read_cameras_text(path) -> dict[int, CameraModel]:
    cams = {}
    for lineno, line in _data_lines(path):
        parts = line.split()
        if not parts:
            continue
        if len(parts) < 4:
            raise ColmapParseError(path, lineno, "expected CAMERA_ID MODEL WIDTH HEIGHT PARAMS...")
        model = parts[1]
        if model not in SUPPORTED_MODELS:
            raise UnsupportedCameraModelError(
                f"{path}:{lineno}: camera model {model!r} is not supported (use PINHOLE or SIMPLE_PINHOLE)")
        try:
            cid, w, h = int(parts[0]), int(parts[2]), int(parts[3])
            params = np.array([float(v) for v in parts[4:]])
        except ValueError as exc:
            raise ColmapParseError(path, lineno, str(exc)) from None
        if len(params) != SUPPORTED_MODELS[model]:
            raise ColmapParseError(path, lineno, f"{model} needs {SUPPORTED_MODELS[model]} parameters, got {len(params)}")
        cams[cid] = CameraModel(cid, model, w, h, params)
    return cams


def read_images_text(path) -> dict[int, ImagePose]:
    images = {}
    lines = iter(_data_lines(path))
    for lineno, line in lines:
        parts = line.split()
        if not parts:
            continue
        if len(parts) < 10:
            raise ColmapParseError(path, lineno, "expected IMAGE_ID QW QX QY QZ TX TY TZ CAMERA_ID NAME")
        try:
            iid = int(parts[0])
            q = np.array([float(v) for v in parts[1:5]])
            t = np.array([float(v) for v in parts[5:8]])
            cid = int(parts[8])
        except ValueError as exc:
            raise ColmapParseError(path, lineno, str(exc)) from None
        name = " ".join(parts[9:])
        if np.linalg.norm(q) < 1e-12:
            raise ColmapParseError(path, lineno, "zero quaternion")
        pts_lineno, pts_line = next(lines, (lineno + 1, ""))
        vals = pts_line.split()
        if len(vals) % 3:
            raise ColmapParseError(path, pts_lineno, "POINTS2D line must hold (X, Y, POINT3D_ID) triples")
        try:
            xys = np.array([[float(vals[k]), float(vals[k + 1])] for k in range(0, len(vals), 3)]).reshape(-1, 2)
            pids = np.array([int(vals[k + 2]) for k in range(0, len(vals), 3)], dtype=np.int64)
        except ValueError as exc:
            raise ColmapParseError(path, pts_lineno, str(exc)) from None
        images[iid] = ImagePose(iid, q, t, cid, name, xys, pids)
    return images


def read_points3d_text(path) -> SparseCloud:
    ids, xyz, rgb, err, tracks = [], [], [], [], []
    for lineno, line in _data_lines(path):
        parts = line.split()
        if not parts:
            continue
        if len(parts) < 8 or (len(parts) - 8) % 2:
            raise ColmapParseError(path, lineno, "expected POINT3D_ID X Y Z R G B ERROR (IMAGE_ID POINT2D_IDX)...")
        try:
            ids.append(int(parts[0]))
            xyz.append([float(v) for v in parts[1:4]])
            rgb.append([int(v) for v in parts[4:7]])
            err.append(float(parts[7]))
            tracks.append(np.array([int(v) for v in parts[8:]], dtype=np.int64).reshape(-1, 2))
        except ValueError as exc:
            raise ColmapParseError(path, lineno, str(exc)) from None
    if not ids:
        return SparseCloud.empty()
    return SparseCloud(np.array(ids, dtype=np.int64), np.array(xyz, dtype=np.float64),
                       np.array(rgb, dtype=np.uint8), np.array(err), tracks)


def find_model_dir(path) -> Path:
    path = Path(path)
    for cand in (path, path / "sparse", path / "sparse" / "0"):
        if all((cand / f).is_file() for f in ("cameras.txt", "images.txt", "points3D.txt")):
            return cand
    raise FileNotFoundError(f"no cameras.txt/images.txt/points3D.txt under {path}")


def read_colmap_text(path) -> ColmapModel:
    d = find_model_dir(path)
    cams = read_cameras_text(d / "cameras.txt")
    images = read_images_text(d / "images.txt")
    points = read_points3d_text(d / "points3D.txt")
    for img in images.values():
        if img.camera_id not in cams:
            raise ColmapParseError(d / "images.txt", 0, f"image {img.image_id} references unknown camera {img.camera_id}")
    for tr in points.tracks:
        for iid in tr[:, 0]:
            if int(iid) not in images:
                raise ColmapParseError(d / "points3D.txt", 0, f"track references unknown image {int(iid)}")
    return ColmapModel(cams, images, points)


def _f(v: float) -> str:
    return repr(float(v))


def write_colmap_text(model: ColmapModel, path) -> None:
    path = Path(path)
    os.makedirs(path, exist_ok=True)
    with open(path / "cameras.txt", "w", encoding="utf-8") as fh:
        fh.write("# CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]\n")
        fh.write(f"# Number of cameras: {len(model.cameras)}\n")
        for cid in sorted(model.cameras):
            c = model.cameras[cid]
            fh.write(" ".join([str(cid), c.model, str(c.width), str(c.height)] + [_f(p) for p in c.params]) + "\n")
    with open(path / "images.txt", "w", encoding="utf-8") as fh:
        fh.write("# IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME\n")
        fh.write("# POINTS2D[] as (X, Y, POINT3D_ID)\n")
        fh.write(f"# Number of images: {len(model.images)}\n")
        for iid in sorted(model.images):
            im = model.images[iid]
            head = [str(iid)] + [_f(v) for v in im.qvec] + [_f(v) for v in im.tvec] + [str(im.camera_id), im.name]
            fh.write(" ".join(head) + "\n")
            fh.write(" ".join(f"{_f(x)} {_f(y)} {int(p)}" for (x, y), p in zip(im.xys, im.point3d_ids)) + "\n")
    with open(path / "points3D.txt", "w", encoding="utf-8") as fh:
        fh.write("# POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[] as (IMAGE_ID, POINT2D_IDX)\n")
        fh.write(f"# Number of points: {len(model.points)}\n")
        p = model.points
        for i in range(len(p)):
            fields = [str(int(p.ids[i]))] + [_f(v) for v in p.xyz[i]] + [str(int(v)) for v in p.rgb[i]] + [_f(p.error[i])]
            fields += [str(int(v)) for v in p.tracks[i].ravel()]
            fh.write(" ".join(fields) + "\n")
