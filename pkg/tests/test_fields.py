"""Encoding, scene box, and field tests."""
import numpy as np
import pytest
from hypothesis import given, strategies as st

from neural_fusion import autodiff as ad
from neural_fusion.autodiff import Tensor
from neural_fusion.fields import (
    ColorField, DensityField, FieldConfig, Mlp, SceneBox, encode, encoding_dim,
)
from neural_fusion.gradcheck import check_gradients


def test_encode_known_values():
    x = Tensor(np.array([[0.5, 0.0, -1.0]]))
    out = encode(x, num_frequencies=2).values[0]
    assert out.shape == (encoding_dim(2),)
    np.testing.assert_allclose(out[:3], [0.5, 0.0, -1.0])
    # level 0: sin/cos(pi x)
    np.testing.assert_allclose(out[3:6], np.sin(np.pi * np.array([0.5, 0.0, -1.0])), atol=1e-12)
    np.testing.assert_allclose(out[6:9], np.cos(np.pi * np.array([0.5, 0.0, -1.0])), atol=1e-12)
    # level 1: sin/cos(2 pi x)
    np.testing.assert_allclose(out[9:12], np.sin(2 * np.pi * np.array([0.5, 0.0, -1.0])), atol=1e-12)
    np.testing.assert_allclose(out[12:15], np.cos(2 * np.pi * np.array([0.5, 0.0, -1.0])), atol=1e-12)


@given(st.integers(0, 8))
def test_encoding_dim_formula(levels):
    x = Tensor(np.zeros((4, 3)))
    assert encode(x, levels).shape == (4, encoding_dim(levels))
    assert encoding_dim(levels) == 3 * (1 + 2 * levels)


def test_encode_preserves_dtype():
    out32 = encode(Tensor(np.zeros((2, 3), dtype=np.float32)), 3)
    assert out32.dtype == np.float32


def test_scene_box_from_points_pads():
    pts = np.array([[0.0, 0.0, 0.0], [2.0, 4.0, 6.0]])
    box = SceneBox.from_points(pts, padding=0.1)
    np.testing.assert_allclose(box.center, [1.0, 2.0, 3.0])
    np.testing.assert_allclose(box.half_extent, [1.1, 2.2, 3.3])
    inner = box.normalize(pts)
    assert np.all(np.abs(inner) <= 1.0 / 1.1 + 1e-12)
    assert box.diagonal() == pytest.approx(2 * np.linalg.norm([1.1, 2.2, 3.3]))


def test_scene_box_normalize_graph_clamps():
    box = SceneBox(center=[0.0, 0.0, 0.0], half_extent=[1.0, 1.0, 1.0])
    pts = Tensor(np.array([[5.0, -7.0, 0.25]]))
    out = box.normalize_graph(pts).values
    np.testing.assert_allclose(out, [[1.0, -1.0, 0.25]])


def test_scene_box_rejects_empty():
    with pytest.raises(ValueError):
        SceneBox.from_points(np.zeros((0, 3)))


def test_mlp_shapes_and_determinism():
    a = Mlp(6, 2, hidden_units=16, hidden_layers=3, seed=9)
    b = Mlp(6, 2, hidden_units=16, hidden_layers=3, seed=9)
    c = Mlp(6, 2, hidden_units=16, hidden_layers=3, seed=10)
    assert len(a.weights) == 4  # 3 hidden + output
    x = Tensor(np.random.default_rng(0).normal(size=(5, 6)).astype(np.float32))
    np.testing.assert_array_equal(a.forward(x).values, b.forward(x).values)
    assert not np.array_equal(a.forward(x).values, c.forward(x).values)


def test_mlp_fan_in_bound():
    m = Mlp(100, 4, hidden_units=8, hidden_layers=1, seed=1)
    assert np.max(np.abs(m.weights[0].values)) <= 1.0 / np.sqrt(100)
    assert np.max(np.abs(m.weights[1].values)) <= 1.0 / np.sqrt(8)


def _box() -> SceneBox:
    return SceneBox(center=[0.0, 0.0, 0.0], half_extent=[2.0, 2.0, 2.0])


def test_density_field_output_nonnegative_and_shaped():
    field = DensityField(_box(), FieldConfig(num_frequencies=4, hidden_units=32,
                                             hidden_layers=2, seed=3))
    pts = np.random.default_rng(0).uniform(-2, 2, (17, 3))
    sigma = field.query(pts)
    assert sigma.shape == (17,)
    assert sigma.dtype == np.float32
    assert np.all(sigma.values >= 0)


def test_color_field_output_in_unit_interval():
    field = ColorField(_box(), FieldConfig(num_frequencies=3, hidden_units=32,
                                           hidden_layers=2, seed=4))
    rgb = field.query(np.random.default_rng(1).uniform(-2, 2, (9, 3)))
    assert rgb.shape == (9, 3)
    assert np.all((rgb.values > 0) & (rgb.values < 1))


def test_field_query_constant_outside_box():
    # Clamping makes the field constant along rays leaving the cube.
    field = DensityField(_box(), FieldConfig(num_frequencies=2, hidden_units=16,
                                             hidden_layers=1, seed=5))
    far1 = field.query(np.array([[3.0, 0.0, 0.0]])).values
    far2 = field.query(np.array([[9.0, 0.0, 0.0]])).values
    np.testing.assert_array_equal(far1, far2)


def test_parameter_override_matches_loaded_values():
    cfg = FieldConfig(num_frequencies=2, hidden_units=16, hidden_layers=2, seed=6)
    field = DensityField(_box(), cfg)
    other = DensityField(_box(), FieldConfig(num_frequencies=2, hidden_units=16,
                                             hidden_layers=2, seed=7))
    pts = np.random.default_rng(2).uniform(-1, 1, (8, 3))
    via_override = field.query(pts, params=other.parameters()).values
    field.load_parameter_values([p.values for p in other.parameters()])
    np.testing.assert_array_equal(field.query(pts).values, via_override)


def test_load_parameter_values_validates_shapes():
    cfg = FieldConfig(num_frequencies=2, hidden_units=16, hidden_layers=2, seed=6)
    field = DensityField(_box(), cfg)
    arrays = [p.values for p in field.parameters()]
    with pytest.raises(ValueError):
        field.load_parameter_values(arrays[:-1])
    bad = [a.copy() for a in arrays]
    bad[0] = np.zeros((1, 1), dtype=np.float32)
    with pytest.raises(ValueError):
        field.load_parameter_values(bad)


@pytest.mark.parametrize("trial", range(3))
def test_density_gradients_wrt_weights(trial):
    cfg = FieldConfig(num_frequencies=2, hidden_units=12, hidden_layers=2, seed=trial)
    field = DensityField(_box(), cfg)
    pts = np.random.default_rng(trial).uniform(-1.5, 1.5, (6, 3))
    w = np.random.default_rng(trial + 50).normal(size=6)

    def build(params):
        return ad.tensor_sum(field.query(pts, params=params) * w, dtype=np.float64)

    # Small step so the probe does not cross ReLU kinks.
    report = check_gradients(build, [p.values for p in field.parameters()],
                             dtype=np.float32, rtol=1e-3, step=1e-6)
    assert report.passed, f"max rel err {report.max_rel_error:.3e}"


def test_set_trainable_stops_graph():
    field = DensityField(_box(), FieldConfig(num_frequencies=2, hidden_units=8,
                                             hidden_layers=1, seed=0))
    field.set_trainable(False)
    out = field.query(np.zeros((4, 3)))
    assert not out.requires_grad
    field.set_trainable(True)
    assert field.query(np.zeros((4, 3))).requires_grad
