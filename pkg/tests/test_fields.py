import numpy as np
import pytest

from heritage_recon.autodiff import Tensor
from heritage_recon.fields import (
    AnalyticField,
    AppearanceTable,
    ColorField,
    DegenerateNormalError,
    FieldConfig,
    FieldInputError,
    SdfField,
    average_embedding,
    color_eval,
    sdf_eval,
    sdf_normal,
)

CFG = FieldConfig(sdf_width=64, sdf_depth=4, sdf_skip=(2,), feature_dim=8, color_width=16, color_depth=2,
                  embed_dim=4, pe_pos=4, pe_dir=2)


@pytest.fixture(scope="module")
def sdf():
    return SdfField.create(CFG, np.random.default_rng(0))


def unit_vectors(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def test_geometric_init_sphere(sdf, rng):
    pts = 0.5 * unit_vectors(rng, 1000)
    assert np.max(np.abs(sdf.values(pts))) < 0.05


def test_geometric_init_origin_is_inside(sdf):
    assert sdf.values(np.zeros((1, 3)))[0] == pytest.approx(-0.5, abs=0.05)


def test_sdf_eval_deterministic(sdf, rng):
    x = rng.normal(size=(5, 3))
    a, b = sdf_eval(sdf, x), sdf_eval(sdf, x)
    assert np.array_equal(a.d.data, b.d.data) and np.array_equal(a.f.data, b.f.data)
    assert a.f.shape == (5, CFG.feature_dim)


def test_non_finite_point_rejected(sdf):
    with pytest.raises(FieldInputError):
        sdf_eval(sdf, np.array([[np.nan, 0.0, 0.0]]))


def test_init_normal_points_outward(sdf):
    n = sdf_normal(sdf, np.array([0.5, 0.0, 0.0]))
    assert np.degrees(np.arccos(np.clip(n @ [1.0, 0.0, 0.0], -1, 1))) < 5.0


def test_analytic_sphere_normal_exact(rng):
    f = AnalyticField.sphere(0.7)
    x = rng.normal(size=(20, 3))
    np.testing.assert_allclose(sdf_normal(f, x), x / np.linalg.norm(x, axis=1, keepdims=True), atol=1e-15)


def test_normal_matches_finite_differences(sdf, rng):
    x = rng.uniform(-0.8, 0.8, (100, 3))
    n = sdf_normal(sdf, x)
    h = 1e-6
    fd = np.stack([(sdf.values(x + h * e) - sdf.values(x - h * e)) / (2 * h) for e in np.eye(3)], axis=1)
    fd /= np.linalg.norm(fd, axis=1, keepdims=True)
    ang = np.degrees(np.arccos(np.clip(np.sum(n * fd, axis=1), -1, 1)))
    assert ang.max() < 0.5


def test_degenerate_normal_raises():
    with pytest.raises(DegenerateNormalError):
        sdf_normal(AnalyticField.constant(1.0), np.zeros((2, 3)))


def _color_inputs(rng, n, cfg=CFG):
    return (rng.normal(size=(n, 3)), unit_vectors(rng, n), unit_vectors(rng, n),
            rng.normal(size=(n, cfg.embed_dim)), rng.normal(size=(n, cfg.feature_dim)))


def test_color_zero_last_layer_is_half(rng):
    color = ColorField.create(CFG, rng)
    color.params.weights[-1].data[:] = 0.0
    color.params.biases[-1].data[:] = 0.0
    np.testing.assert_array_equal(color_eval(color, *_color_inputs(rng, 6)).data, 0.5)


def test_color_range_and_determinism(rng):
    color = ColorField.create(CFG, rng)
    inputs = _color_inputs(rng, 200)
    a = color_eval(color, *inputs).data
    assert np.all((a > 0) & (a < 1))
    assert np.array_equal(a, color_eval(color, *inputs).data)


def test_color_depends_on_embedding(rng):
    color = ColorField.create(CFG, rng)
    x, v, n, e, f = _color_inputs(rng, 1)
    assert not np.allclose(color_eval(color, x, v, n, e, f).data, color_eval(color, x, v, n, -e + 1.0, f).data)


def test_average_embedding_cases(rng):
    one = AppearanceTable(Tensor(np.array([[1.0, 2.0]])), [1])
    np.testing.assert_array_equal(average_embedding(one), [1.0, 2.0])
    e = rng.normal(size=3)
    np.testing.assert_allclose(average_embedding(AppearanceTable(Tensor(np.stack([e, -e])), [1, 2])), 0.0, atol=1e-15)
    rows = rng.normal(size=(3, 5))
    np.testing.assert_allclose(average_embedding(AppearanceTable(Tensor(rows), [1, 2, 3])),
                               (rows[0] + rows[1] + rows[2]) / 3, rtol=1e-14)
    with pytest.raises(ValueError):
        average_embedding(AppearanceTable(Tensor(np.zeros((0, 2))), []))
