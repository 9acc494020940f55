import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from simeq import autograd as ag
from simeq.autograd import Tape
from simeq.geometry import Sim3Transform, random_sim3, rot_z
from simeq.metrics import relative_error
from simeq.training import Adam
from simeq.vn import (
    VnLinear,
    VnMax,
    VnNonlinear,
    project_rows_to_affine,
    set_bias_scale,
    vn_linear_forward,
    vn_max_forward,
    vn_relu_forward,
    vn_relu_gate,
)

seeds = st.integers(min_value=0, max_value=2**31)


def _linear_with(weight):
    layer = VnLinear(np.shape(weight)[1], np.shape(weight)[0], np.random.default_rng(0))
    layer.weight.data = np.asarray(weight, dtype=np.float64)
    return layer


def test_identity_weights_leave_input_unchanged():
    v = np.random.default_rng(1).standard_normal((4, 3))
    np.testing.assert_allclose(vn_linear_forward(_linear_with(np.eye(4)), v).data, v, atol=1e-15)


def test_affine_average_example():
    out = vn_linear_forward(_linear_with([[0.5, 0.5]]), np.array([[1.0, 0, 0], [3.0, 0, 0]]))
    np.testing.assert_allclose(out.data, [[2.0, 0, 0]])


def test_linear_equivariance_fixed_transform():
    rng = np.random.default_rng(2)
    layer = VnLinear(6, 5, rng)
    v = rng.standard_normal((6, 3))
    g = Sim3Transform(2.0, rot_z(90), [1, 2, 3])
    assert relative_error(layer(g.act(v)).data, g.act(layer(v).data)) < 1e-9


def test_project_rows_examples():
    np.testing.assert_array_equal(project_rows_to_affine([[0.25, 0.75]]), [[0.25, 0.75]])
    np.testing.assert_array_equal(project_rows_to_affine([[0.0, 0.0]]), [[0.5, 0.5]])
    w = np.random.default_rng(3).standard_normal((7, 9)) * 5
    np.testing.assert_allclose(project_rows_to_affine(w).sum(axis=1), 1.0, atol=1e-12)


def test_rows_stay_affine_through_training():
    rng = np.random.default_rng(4)
    layer = VnLinear(5, 4, rng)
    opt = Adam(layer.parameters(), weight_decay=0.1)
    v = rng.standard_normal((8, 5, 3))
    target = rng.standard_normal((8, 4, 3))
    for _ in range(20):
        with Tape(layer.parameters()) as tape:
            diff = layer(v) - target
            loss = ag.sum_(diff * diff)
        tape.backward(loss)
        opt.step(0.05)
        np.testing.assert_allclose(layer.effective_weight().data.sum(axis=1), 1.0, atol=1e-7)


def test_width_mismatch_names_both_widths():
    layer = VnLinear(4, 2, np.random.default_rng(0))
    with pytest.raises(ValueError, match="4.*3"):
        layer(np.zeros((3, 3)))
    with pytest.raises(ValueError):
        VnLinear(0, 2, np.random.default_rng(0))
    with pytest.raises(ValueError):
        VnLinear(2, 2, np.random.default_rng(0), bias_norm=-1.0)


def test_gate_keeps_positive_branch():
    f = np.array([[1.0, 2.0, 3.0]])
    b_o = np.array([[0.0, 0.0, 2.0]])
    f_o = np.array([[0.0, 0.0, 1.0]])
    np.testing.assert_array_equal(vn_relu_gate(ag.Tensor(f), ag.Tensor(f_o), ag.Tensor(b_o)).data, f)


def test_gate_antiparallel_removes_full_projection():
    f = np.array([[0.3, -0.2, 0.5]])
    b_o = np.array([[0.0, 1.0, 0.0]])
    out = vn_relu_gate(ag.Tensor(f), ag.Tensor(-b_o), ag.Tensor(b_o))
    np.testing.assert_allclose(out.data, f + b_o)


def test_fused_gate_matches_reference_formula():
    rng = np.random.default_rng(5)
    f, o, b = rng.standard_normal((3, 200, 3))
    ref = vn_relu_gate(ag.Tensor(f), ag.Tensor(f - o), ag.Tensor(b - o)).data
    np.testing.assert_allclose(ag.vn_gate(f, o, b, 1e-8).data, ref, atol=1e-14)


def test_gate_output_never_points_against_direction():
    rng = np.random.default_rng(6)
    f, o, b = rng.standard_normal((3, 500, 3))
    out = ag.vn_gate(f, o, b, 1e-8).data
    assert np.all(np.sum((out - o) * (b - o), axis=-1) >= -1e-12)


@given(seeds)
@settings(max_examples=30, deadline=None)
def test_relu_equivariance(seed):
    rng = np.random.default_rng(seed)
    layer = VnNonlinear(6, rng, 0.0)
    v = rng.standard_normal((5, 6, 3))
    g = random_sim3(rng)
    assert relative_error(vn_relu_forward(layer, g.act(v)).data, g.act(layer(v).data)) < 1e-9


def test_leaky_alpha_zero_is_plain_relu():
    rng = np.random.default_rng(7)
    layer = VnNonlinear(4, rng, 0.0)
    v = rng.standard_normal((3, 4, 3))
    np.testing.assert_array_equal(layer(v).data, layer.relu(v).data)
    with pytest.raises(ValueError):
        VnNonlinear(4, rng, 1.0)


def test_leaky_relu_blends_identity():
    rng = np.random.default_rng(8)
    layer = VnNonlinear(4, rng, 0.2)
    v = rng.standard_normal((3, 4, 3))
    np.testing.assert_allclose(layer(v).data, 0.2 * v + 0.8 * layer.relu(v).data, atol=1e-15)


def test_branch_mask_matches_gate():
    rng = np.random.default_rng(9)
    layer = VnNonlinear(5, rng)
    v = rng.standard_normal((40, 5, 3))
    mask = layer.branch_mask(v)
    f = layer.feature_map(v).data
    out = layer.relu(v).data
    np.testing.assert_array_equal(np.all(out == f, axis=-1), mask)
    assert mask.any() and (~mask).any()


def test_max_single_token():
    layer = VnMax(3, np.random.default_rng(0))
    vs = np.random.default_rng(1).standard_normal((1, 3, 3))
    np.testing.assert_array_equal(vn_max_forward(layer, vs).data, vs[0])


def test_max_dominant_token_wins_every_channel():
    layer = VnMax(2, np.random.default_rng(0))
    layer.direction_map.weight.data = np.eye(2)
    layer.origin_map.weight.data = np.array([[0.5, 0.5], [0.5, 0.5]])
    t1 = np.array([[1.0, 0, 0], [-1.0, 0, 0]])
    t2 = 10 * t1
    vs = np.stack([t1, t2])
    # direction map is the identity and the origin is the channel mean, so the score is
    # |V - O|^2 per channel and the wider token wins
    np.testing.assert_array_equal(layer.select(vs), [1, 1])
    np.testing.assert_array_equal(layer(vs).data, t2)


def test_max_ties_go_to_lowest_index():
    layer = VnMax(2, np.random.default_rng(0))
    t = np.random.default_rng(1).standard_normal((2, 3))
    np.testing.assert_array_equal(layer.select(np.stack([t, t, t])), [0, 0])
    with pytest.raises(ValueError):
        layer(np.zeros((0, 2, 3)))


@given(seeds)
@settings(max_examples=30, deadline=None)
def test_max_selection_invariant_and_output_equivariant(seed):
    rng = np.random.default_rng(seed)
    layer = VnMax(4, rng)
    vs = rng.standard_normal((7, 4, 3))
    g = random_sim3(rng)
    np.testing.assert_array_equal(layer.select(g.act(vs)), layer.select(vs))
    assert relative_error(layer(g.act(vs)).data, g.act(layer(vs).data)) < 1e-9


def test_bias_breaks_equivariance_and_scale_zero_restores_it():
    rng = np.random.default_rng(10)
    layer = VnNonlinear(4, rng, 0.2, bias_norm=0.5)
    v = rng.standard_normal((6, 4, 3))
    g = random_sim3(rng)
    assert relative_error(layer(g.act(v)).data, g.act(layer(v).data)) > 1e-6
    set_bias_scale(layer, 0.0)
    assert relative_error(layer(g.act(v)).data, g.act(layer(v).data)) < 1e-9


def test_bias_has_requested_norm():
    layer = VnLinear(3, 4, np.random.default_rng(0), bias_norm=0.25)
    assert np.linalg.norm(layer.bias().data) == pytest.approx(0.25)
    set_bias_scale(layer, 0.1)
    assert np.linalg.norm(layer.bias().data) == pytest.approx(0.025)
