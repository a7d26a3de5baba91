import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from heritage_recon.evaluation import (
    EvalError,
    evaluate,
    evaluate_points,
    f1,
    precision_recall,
    sample_surface,
)
from heritage_recon.meshing import TriangleMesh
from oracles import brute_force_pr


def plane(n=40, offset=0.0):
    g = np.linspace(-1, 1, n)
    xx, yy = np.meshgrid(g, g)
    return np.stack([np.full(xx.size, offset), xx.ravel(), yy.ravel()], axis=1)


def test_single_triangle_samples_inside():
    tri = np.array([[0.0, 0, 0], [2, 0, 0], [0, 1, 0]])
    pts = sample_surface(TriangleMesh(tri, [[0, 1, 2]]), 5000, seed=1)
    # barycentric coordinates w.r.t. the triangle
    T = np.stack([tri[1] - tri[0], tri[2] - tri[0]], axis=1)[:2]
    uv = np.linalg.solve(T, (pts - tri[0])[:, :2].T).T
    assert np.all(uv >= -1e-12) and np.all(uv.sum(axis=1) <= 1 + 1e-12)
    assert np.all(pts[:, 2] == 0)


def test_area_weighting():
    # unit-area triangle next to one with area 3
    verts = [[0, 0, 0], [1, 0, 0], [0, 2, 0], [5, 0, 0], [8, 0, 0], [5, 2, 0]]
    mesh = TriangleMesh(verts, [[0, 1, 2], [3, 4, 5]])
    np.testing.assert_allclose(mesh.face_areas(), [1, 3])
    pts = sample_surface(mesh, 100_000, seed=0)
    assert np.mean(pts[:, 0] >= 5) == pytest.approx(0.75, abs=0.03)


def test_sampling_is_seeded():
    mesh = TriangleMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
    assert np.array_equal(sample_surface(mesh, 100, 7), sample_surface(mesh, 100, 7))
    assert not np.array_equal(sample_surface(mesh, 100, 7), sample_surface(mesh, 100, 8))


def test_sampling_errors():
    with pytest.raises(EvalError):
        sample_surface(TriangleMesh.empty(), 10)
    with pytest.raises(EvalError):
        sample_surface(TriangleMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]]), 0)


def test_single_pair():
    a, b = [[0, 0, 0]], [[0, 0, 0.15]]
    assert precision_recall(a, b, 0.1) == (0.0, 0.0)
    assert precision_recall(a, b, 0.2) == (1.0, 1.0)


def test_identical_sets(rng):
    pts = rng.normal(size=(100, 3))
    for tau in (1e-6, 0.1, 5.0):
        assert precision_recall(pts, pts, tau) == (1.0, 1.0)


def test_precision_recall_errors():
    with pytest.raises(EvalError):
        precision_recall(np.zeros((0, 3)), np.zeros((1, 3)), 0.1)
    with pytest.raises(EvalError):
        precision_recall(np.zeros((1, 3)), np.zeros((1, 3)), 0.0)


def test_matches_brute_force_on_200_points(rng):
    a, b = rng.uniform(size=(200, 3)), rng.uniform(size=(200, 3))
    for tau in (0.02, 0.05, 0.1):
        assert precision_recall(a, b, tau) == brute_force_pr(a, b, tau)


@settings(max_examples=40)
@given(st.integers(1, 500), st.integers(1, 500), st.integers(0, 2**32 - 1), st.floats(0.01, 0.5))
def test_brute_force_equivalence(n, m, seed, tau):
    r = np.random.default_rng(seed)
    a, b = r.uniform(size=(n, 3)), r.uniform(size=(m, 3))
    assert precision_recall(a, b, tau) == brute_force_pr(a, b, tau)


def test_f1_values():
    assert round(100 * f1(0.730, 0.080), 1) == 14.4
    assert abs(100 * f1(0.850, 0.154) - 26.0) <= 0.15
    assert f1(0.0, 0.0) == 0.0
    assert f1(0.37, 0.37) == pytest.approx(0.37, rel=1e-15)


def test_planar_offset():
    rep = evaluate_points(plane(offset=0.25), plane(), thresholds=(0.1, 0.2, 0.3))
    assert rep.precision == [0.0, 0.0, 1.0] and rep.recall == [0.0, 0.0, 1.0]
    assert rep.f1 == [0.0, 0.0, 1.0]


def test_identical_mesh_scores_one():
    mesh = TriangleMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0.5]], [[0, 1, 2], [1, 3, 2]])
    rep = evaluate(mesh, mesh, n_samples=2000)
    assert rep.precision == rep.recall == rep.f1 == [1.0, 1.0, 1.0]
    assert rep.auc_precision == rep.auc_recall == rep.auc_f1 == pytest.approx(1.0, abs=1e-12)


def test_auc_of_known_step():
    # every nearest distance is 0.15: each curve is 0 below 0.15 and 1 from there on
    rep = evaluate_points(plane(offset=0.15), plane(), thresholds=(0.1, 0.2, 0.3), auc_grid=61)
    grid = np.linspace(0, 0.3, 61)
    y = (grid >= 0.15 - 1e-12).astype(float)
    expected = float(np.sum(0.5 * (y[1:] + y[:-1]) * np.diff(grid))) / 0.3
    assert rep.auc_precision == pytest.approx(expected, abs=1e-12)
    assert rep.auc_f1 == pytest.approx(expected, abs=1e-12)


@settings(max_examples=30)
@given(st.integers(0, 2**32 - 1))
def test_monotone_and_symmetric(seed):
    r = np.random.default_rng(seed)
    a, b = r.normal(size=(150, 3)), r.normal(size=(120, 3)) + 0.1
    taus = np.sort(r.uniform(0.01, 1.0, 5))
    ab, ba = evaluate_points(a, b, taus), evaluate_points(b, a, taus)
    assert np.all(np.diff(ab.precision) >= 0) and np.all(np.diff(ab.recall) >= 0)
    assert ab.precision == ba.recall and ab.recall == ba.precision
    for p, q, f in zip(ab.precision, ab.recall, ab.f1):
        assert f == (0.0 if p + q == 0 else pytest.approx(2 * p * q / (p + q), rel=1e-15))


def test_rigid_motion_invariance(rng):
    a, b = rng.normal(size=(300, 3)), rng.normal(size=(300, 3))
    R = Rotation.random(random_state=3).as_matrix()
    t = np.array([4.0, -2.0, 7.5])
    base = evaluate_points(a, b, (0.2, 0.4, 0.6))
    moved = evaluate_points(a @ R.T + t, b @ R.T + t, (0.2, 0.4, 0.6))
    for key in ("precision", "recall", "f1"):
        np.testing.assert_allclose(getattr(moved, key), getattr(base, key), atol=1e-9)
    np.testing.assert_allclose([moved.auc_precision, moved.auc_recall, moved.auc_f1],
                               [base.auc_precision, base.auc_recall, base.auc_f1], atol=1e-9)


def test_threshold_validation():
    with pytest.raises(EvalError):
        evaluate_points(plane(), plane(), (0.2, 0.1))
    with pytest.raises(EvalError):
        evaluate_points(plane(), plane(), (-0.1, 0.1))


def test_unit_to_meter_scales_distances():
    rep = evaluate_points(plane(offset=0.25) * 2.0, plane() * 2.0, (0.4, 0.6))
    scaled = evaluate(plane(offset=0.25), plane(), (0.4, 0.6), unit_to_meter=2.0)
    assert scaled.precision == rep.precision == [0.0, 1.0]
    assert scaled.unit_to_meter == 2.0


def test_report_outputs(tmp_path):
    rep = evaluate_points(plane(offset=0.15), plane())
    rep.write_json(tmp_path / "r.json")
    d = json.loads((tmp_path / "r.json").read_text())
    assert d["threshold_names"] == ["Low", "Medium", "High"]
    assert d["samples"]["seed"] == 42 and d["auc"]["grid_points"] == 64
    table = rep.table().splitlines()
    assert "Low" in table[2] and "AUC" in table[2]
    assert table[4].split()[:6] == ["0.0", "0.0", "0.0", "100.0", "100.0", "100.0"]
