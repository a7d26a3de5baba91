"""Pinhole cameras and ray generation.

Pixel coordinates are continuous with the first pixel's centre at (0.5, 0.5);
the camera frame looks down +z with +x right and +y down.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class CameraError(ValueError):
    pass


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray  # world-from-camera, 3x3
    center: np.ndarray  # camera centre in world coordinates

    def __post_init__(self) -> None:
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        if self.fx <= 0 or self.fy <= 0:
            raise CameraError("focal lengths must be positive")
        if np.abs(self.rotation.T @ self.rotation - np.eye(3)).max() > 1e-8:
            raise CameraError("rotation is not orthonormal")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @classmethod
    def look_at(cls, eye, target, up, fx, fy, width, height, cx=None, cy=None) -> "Camera":
        eye = np.asarray(eye, dtype=np.float64)
        z = np.asarray(target, dtype=np.float64) - eye
        z /= np.linalg.norm(z)
        x = np.cross(z, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(x) < 1e-9:
            x = np.cross(z, np.array([1.0, 0.0, 0.0]))
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        rot = np.stack([x, y, z], axis=1)
        return cls(fx, fy, width / 2.0 if cx is None else cx, height / 2.0 if cy is None else cy,
                   width, height, rot, eye)

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points) - self.center) @ self.rotation

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Pixel coordinates (N, 2) and camera-frame depth (N,) of world points."""
        pc = self.world_to_camera(np.atleast_2d(points))
        z = pc[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * pc[:, 0] / z + self.cx
            v = self.fy * pc[:, 1] / z + self.cy
        return np.stack([u, v], axis=-1), z

    def ray_directions(self, pixels: np.ndarray) -> np.ndarray:
        pixels = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
        u, v = pixels[:, 0], pixels[:, 1]
        if np.any(u < 0) or np.any(u > self.width) or np.any(v < 0) or np.any(v > self.height):
            raise CameraError("pixel outside image bounds")
        cam = np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)], axis=-1)
        d = cam @ self.rotation.T
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def pixel_centers(self) -> np.ndarray:
        """(H*W, 2) pixel centres in row-major order."""
        jj, ii = np.meshgrid(np.arange(self.width), np.arange(self.height))
        return np.stack([jj.ravel() + 0.5, ii.ravel() + 0.5], axis=-1).astype(np.float64)


@dataclass
class RayBatch:
    origins: np.ndarray  # (R, 3)
    dirs: np.ndarray  # (R, 3), unit
    near: np.ndarray  # (R,)
    far: np.ndarray  # (R,)

    def __len__(self) -> int:
        return len(self.origins)

    @property
    def hits_bounds(self) -> np.ndarray:
        return self.far > self.near

    def subset(self, idx) -> "RayBatch":
        return RayBatch(self.origins[idx], self.dirs[idx], self.near[idx], self.far[idx])


# single-ray view of a batch entry
Ray = RayBatch


def sphere_bounds(origins, dirs, radius: float, center=(0.0, 0.0, 0.0)) -> tuple[np.ndarray, np.ndarray]:
    """Entry/exit distances of rays through a sphere; misses give near == far == 0."""
    oc = origins - np.asarray(center)
    b = np.sum(oc * dirs, axis=-1)
    c = np.sum(oc * oc, axis=-1) - radius * radius
    disc = b * b - c
    hit = disc > 0
    root = np.sqrt(np.where(hit, disc, 0.0))
    near = np.where(hit, np.maximum(-b - root, 0.0), 0.0)
    far = np.where(hit, np.maximum(-b + root, 0.0), 0.0)
    return near, far


def generate_rays(camera: Camera, pixels: np.ndarray, bound_radius: float = 1.0) -> RayBatch:
    dirs = camera.ray_directions(pixels)
    origins = np.broadcast_to(camera.center, dirs.shape).copy()
    near, far = sphere_bounds(origins, dirs, bound_radius)
    return RayBatch(origins, dirs, near, far)


def generate_ray(camera: Camera, pixel, jitter=(0.0, 0.0), bound_radius: float = 1.0) -> RayBatch:
    """One ray through ``pixel + jitter`` clipped to the scene bounding sphere."""
    p = np.asarray(pixel, dtype=np.float64) + np.asarray(jitter, dtype=np.float64)
    return generate_rays(camera, p[None, :], bound_radius)
