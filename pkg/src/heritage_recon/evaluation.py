"""Geometry evaluation: precision, recall and F1 at distance thresholds, plus
their normalized area under the threshold curve."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .meshing.mesh import TriangleMesh

DEFAULT_THRESHOLDS = (0.1, 0.2, 0.3)
THRESHOLD_NAMES = ("Low", "Medium", "High")
AUC_NOTE = ("AUC = trapezoidal integral of the metric over a uniform grid on [0, tau_max] "
            "(tau_max = largest named threshold), divided by tau_max")


class EvalError(ValueError):
    pass


def sample_surface(mesh: TriangleMesh, n: int, seed: int = 42) -> np.ndarray:
    """``n`` points drawn uniformly by area over the mesh triangles."""
    if mesh.is_empty:
        raise EvalError("cannot sample an empty mesh")
    if n < 1:
        raise EvalError("sample count must be >= 1")
    rng = np.random.default_rng(seed)
    areas = mesh.face_areas()
    total = areas.sum()
    if total <= 0:
        raise EvalError("mesh has zero area")
    face = rng.choice(len(areas), size=n, p=areas / total)
    u, v = rng.uniform(size=(2, n))
    flip = u + v > 1.0
    u = np.where(flip, 1.0 - u, u)
    v = np.where(flip, 1.0 - v, v)
    tri = mesh.vertices[mesh.faces[face]]
    return tri[:, 0] + u[:, None] * (tri[:, 1] - tri[:, 0]) + v[:, None] * (tri[:, 2] - tri[:, 0])


def nearest_distances(query: np.ndarray, ref: np.ndarray) -> np.ndarray:
    return cKDTree(ref).query(query, k=1)[0]


def _check_sets(pred: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    if len(pred) == 0 or len(gt) == 0:
        raise EvalError("precision and recall need non-empty point sets")
    return pred, gt


def precision_recall(pred, gt, tau: float) -> tuple[float, float]:
    if tau <= 0:
        raise EvalError("threshold must be positive")
    pred, gt = _check_sets(pred, gt)
    d_pred = nearest_distances(pred, gt)
    d_gt = nearest_distances(gt, pred)
    return float(np.mean(d_pred <= tau)), float(np.mean(d_gt <= tau))


def f1(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2.0 * p * r / (p + r)


@dataclass
class EvalReport:
    thresholds: list[float]
    precision: list[float]
    recall: list[float]
    f1: list[float]
    auc_precision: float
    auc_recall: float
    auc_f1: float
    n_pred: int
    n_gt: int
    seed: int
    auc_grid: int
    unit_to_meter: float | None = None
    names: list[str] = field(default_factory=list)
    note: str = AUC_NOTE

    def to_dict(self) -> dict:
        return {
            "note": self.note,
            "thresholds": self.thresholds,
            "threshold_names": self.names,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "auc": {"precision": self.auc_precision, "recall": self.auc_recall, "f1": self.auc_f1,
                    "grid_points": self.auc_grid},
            "samples": {"pred": self.n_pred, "gt": self.n_gt, "seed": self.seed},
            "unit_to_meter": self.unit_to_meter,
        }

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    def table(self) -> str:
        """Aligned plain-text table: one column group per threshold plus AUC, in percent."""
        groups = [(n, p, r, f) for n, p, r, f in zip(self.names, self.precision, self.recall, self.f1)]
        groups.append(("AUC", self.auc_precision, self.auc_recall, self.auc_f1))
        head1 = "".join(f"{name:^21}" for name, *_ in groups)
        head2 = "".join(f"{'P':>7}{'R':>7}{'F1':>7}" for _ in groups)
        row = "".join(f"{100 * p:7.1f}{100 * r:7.1f}{100 * f:7.1f}" for _, p, r, f in groups)
        taus = ", ".join(f"{n}={t:g}" for n, t in zip(self.names, self.thresholds))
        return "\n".join([f"# thresholds (scene units): {taus}", f"# {self.note}", head1, head2, row]) + "\n"


def threshold_names(n: int) -> list[str]:
    return list(THRESHOLD_NAMES) if n == 3 else [f"t{k + 1}" for k in range(n)]


def evaluate_points(pred: np.ndarray, gt: np.ndarray, thresholds=DEFAULT_THRESHOLDS, auc_grid: int = 64,
                    seed: int = 42, unit_to_meter: float | None = None) -> EvalReport:
    """Report for two point sets; thresholds are in the points' units."""
    thresholds = [float(t) for t in thresholds]
    if not thresholds or any(t <= 0 for t in thresholds):
        raise EvalError("thresholds must be positive")
    if any(b < a for a, b in zip(thresholds, thresholds[1:])):
        raise EvalError("thresholds must be sorted ascending")
    if auc_grid < 2:
        raise EvalError("AUC grid needs at least 2 points")
    pred, gt = _check_sets(pred, gt)
    d_pred = nearest_distances(pred, gt)
    d_gt = nearest_distances(gt, pred)
    P = [float(np.mean(d_pred <= t)) for t in thresholds]
    R = [float(np.mean(d_gt <= t)) for t in thresholds]
    F = [f1(p, r) for p, r in zip(P, R)]
    tau_max = thresholds[-1]
    grid = np.linspace(0.0, tau_max, auc_grid)
    dp = np.sort(d_pred)
    dg = np.sort(d_gt)
    pc = np.searchsorted(dp, grid, side="right") / len(dp)
    rc = np.searchsorted(dg, grid, side="right") / len(dg)
    fc = np.where(pc + rc > 0, 2 * pc * rc / np.where(pc + rc > 0, pc + rc, 1.0), 0.0)
    auc = [trapezoid(c, grid) / tau_max for c in (pc, rc, fc)]
    return EvalReport(thresholds, P, R, F, auc[0], auc[1], auc[2], len(pred), len(gt), seed, auc_grid,
                      unit_to_meter, threshold_names(len(thresholds)))


def trapezoid(y: np.ndarray, x: np.ndarray) -> float:
    return float(np.sum(0.5 * (y[1:] + y[:-1]) * np.diff(x)))


def as_points(geometry, n_samples: int, seed: int) -> np.ndarray:
    if isinstance(geometry, TriangleMesh):
        if geometry.is_empty:
            if len(geometry.vertices) == 0:
                raise EvalError("geometry is empty")
            return geometry.vertices
        return sample_surface(geometry, n_samples, seed)
    pts = np.asarray(geometry, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise EvalError("geometry is empty")
    return pts


def evaluate(pred_mesh, gt_geometry, thresholds=DEFAULT_THRESHOLDS, n_samples: int = 100_000,
             auc_grid: int = 64, seed: int = 42, unit_to_meter: float | None = None) -> EvalReport:
    """Compare a predicted mesh (or points) with a ground-truth mesh or point cloud.

    When ``unit_to_meter`` is given, thresholds are metres and distances are
    converted before thresholding.
    """
    pred = as_points(pred_mesh, n_samples, seed)
    gt = as_points(gt_geometry, n_samples, seed)
    if unit_to_meter is not None:
        pred = pred * unit_to_meter
        gt = gt * unit_to_meter
    return evaluate_points(pred, gt, thresholds, auc_grid, seed, unit_to_meter)


def chamfer_l2(pred: np.ndarray, gt: np.ndarray) -> float:
    """Symmetric mean squared nearest-neighbour distance (debug metric)."""
    pred, gt = _check_sets(pred, gt)
    return float(np.mean(nearest_distances(pred, gt) ** 2) + np.mean(nearest_distances(gt, pred) ** 2))
