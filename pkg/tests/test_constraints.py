import numpy as np
import pytest
from scipy import sparse

import constraints
import network
from errors import ParameterError


@pytest.fixture(scope="module")
def reals():
    rng = np.random.default_rng(0)
    x = rng.normal(0.0, 10.0, size=10000)
    x[:50] = 0.0
    return x


def test_n1_n2_match_piecewise_definitions(reals):
    np.testing.assert_array_equal(constraints.n1(reals), np.where(reals < 0, -reals, 0.0))
    np.testing.assert_array_equal(constraints.n2(reals), np.where(reals < 0, reals * reals, 0.0))
    for v in reals[:200]:
        assert constraints.n1(v) == (-v if v < 0 else 0.0)
        assert constraints.n2(v) == (v * v if v < 0 else 0.0)


def test_penalties_vanish_on_nonnegatives(reals):
    nonneg = np.abs(reals)
    assert not np.any(constraints.n1(nonneg))
    assert not np.any(constraints.n2(nonneg))
    assert not np.any(constraints.n1_grad(nonneg))
    assert not np.any(constraints.n2_grad(nonneg))
    assert constraints.n1(0.0) == 0.0
    assert not np.signbit(constraints.n1(-0.0))


def test_n2_derivative_is_continuous_at_zero():
    tiny = np.array([-1e-12, 0.0, 1e-12])
    np.testing.assert_allclose(constraints.n2_grad(tiny), [-2e-12, 0.0, 0.0])
    assert constraints.n1_grad(0.0) == 0.0


def test_constraint_config_validation():
    with pytest.raises(ParameterError):
        constraints.ConstraintConfig(hard_scope="everything")
    with pytest.raises(ParameterError):
        constraints.ConstraintConfig(placement="bias")
    with pytest.raises(ParameterError):
        constraints.ConstraintConfig(n1_coeff=-1.0)


def test_hard_scope_drops_penalties():
    cfg = constraints.ConstraintConfig(hard_scope=constraints.ALL_WEIGHTS, n1_coeff=0.5, n2_coeff=0.5)
    assert cfg.n1_coeff == 0.0 and cfg.n2_coeff == 0.0
    assert not cfg.has_penalty


def test_weight_penalty_value(make_model):
    m = make_model([[[1.0, -2.0], [-0.5, 3.0]], [[-1.0], [2.0]]], [[-5.0, -5.0], [-5.0]])
    cfg = constraints.ConstraintConfig(n1_coeff=0.5, n2_coeff=2.0)
    report, grads = constraints.weight_penalty(m, cfg)
    # 負の重み: -2, -0.5, -1（バイアスは対象外）
    assert report.total == pytest.approx(0.5 * 3.5 + 2.0 * (4 + 0.25 + 1))
    assert report.negative_mass == pytest.approx(3.5)
    np.testing.assert_allclose(grads[0], [[0.0, -0.5 - 8.0], [-0.5 - 2.0, 0.0]])


@pytest.mark.parametrize("dense", [True, False])
def test_presum_penalty_matches_brute_force(dense):
    rng = np.random.default_rng(3)
    a = rng.normal(size=(5, 4))
    a[a < -1] = 0.0
    W = rng.normal(size=(4, 3))
    cfg = constraints.ConstraintConfig(n1_coeff=0.7, n2_coeff=0.3, placement=constraints.PRESUM)
    products = a[:, :, None] * W[None, :, :]
    expected = (0.7 * constraints.n1(products).sum() + 0.3 * constraints.n2(products).sum()) / 5
    x = a if dense else sparse.csr_matrix(a)
    value, grad_w = constraints.presum_penalty(x, W, cfg)
    assert value == pytest.approx(expected, rel=1e-12)
    assert grad_w.shape == W.shape


def test_presum_catches_negative_terms_inside_a_positive_sum():
    a = np.array([[1.0, 1.0]])
    W = np.array([[3.0], [-1.0]])
    cfg = constraints.ConstraintConfig(n1_coeff=1.0, placement=constraints.PRESUM)
    value, _ = constraints.presum_penalty(a, W, cfg)
    assert (a @ W)[0, 0] > 0
    assert value == pytest.approx(1.0)


def test_activation_penalty_uses_hidden_pre_activations(make_model):
    m = make_model([[[1.0, -1.0]], [[1.0], [1.0]]], [[0.0, 0.0], [0.0]])
    trace = network.forward(m, np.array([[2.0]]))
    cfg = constraints.ConstraintConfig(n1_coeff=1.0, placement=constraints.ACTIVATIONS)
    value, grads = constraints.activation_penalty(trace, cfg)
    assert value == pytest.approx(2.0)
    np.testing.assert_allclose(grads[0], [[0.0, -1.0]])


def test_penalty_without_coefficients_is_zero(random_model):
    m = random_model(5)
    trace = network.forward(m, np.eye(5))
    terms = constraints.penalty(m, trace, constraints.ConstraintConfig())
    assert terms.value == 0.0
    assert terms.weight_grads is None


def test_projection_all_weights(random_model):
    m = random_model(10, seed=5)
    projected = constraints.project_nonnegative(m, constraints.ALL_WEIGHTS)
    assert all(np.all(w >= 0) for w in projected.weights)
    # 元のモデルは変更しない
    assert any(np.any(w < 0) for w in m.weights)
    for b_old, b_new in zip(m.biases, projected.biases):
        np.testing.assert_array_equal(b_old, b_new)
    again = constraints.project_nonnegative(projected, constraints.ALL_WEIGHTS)
    assert again == projected
    assert constraints.scope_negative_mass(projected, constraints.ALL_WEIGHTS) == 0.0


def test_projection_manifest_monotone_leaves_code_rows_free(random_model, tiny_space):
    m = random_model(6, seed=8)
    projected = constraints.project_nonnegative(m, constraints.MANIFEST_MONOTONE, tiny_space)
    first_old, first_new = m.weights[0], projected.weights[0]
    np.testing.assert_array_equal(first_new[:2], first_old[:2])
    assert np.all(first_new[2:] >= 0)
    assert all(np.all(w >= 0) for w in projected.weights[1:])
    assert constraints.scope_negative_mass(projected, constraints.MANIFEST_MONOTONE, tiny_space) == 0.0


def test_projection_none_is_identity(random_model):
    m = random_model(6, seed=2)
    assert constraints.project_nonnegative(m, constraints.NONE) == m


def test_manifest_scope_needs_a_feature_space(random_model):
    with pytest.raises(ParameterError):
        constraints.project_nonnegative(random_model(6), constraints.MANIFEST_MONOTONE)


def test_shrink_negative_stops_at_zero(make_model):
    m = make_model([[[0.3, -0.05], [-0.5, 0.0]], [[-2.0], [1.0]]], [[-1.0, -1.0], [-3.0]])
    out = constraints.shrink_negative(m, 0.1)
    np.testing.assert_allclose(out.weights[0], [[0.3, 0.0], [-0.4, 0.0]])
    np.testing.assert_allclose(out.weights[1], [[-1.9], [1.0]])
    # バイアスと元のモデルはそのまま
    np.testing.assert_array_equal(out.biases[1], [-3.0])
    assert m.weights[0][1, 0] == -0.5
    assert constraints.negative_mass(out) == pytest.approx(constraints.negative_mass(m) - 0.05 - 0.1 - 0.1)
    with pytest.raises(ParameterError):
        constraints.shrink_negative(m, -0.1)


def test_proximal_n1_applies_only_to_weight_placement():
    assert constraints.ConstraintConfig(n1_coeff=0.67).proximal_n1
    assert not constraints.ConstraintConfig(n1_coeff=0.67, n1_step=constraints.SUBGRADIENT).proximal_n1
    assert not constraints.ConstraintConfig(n1_coeff=0.67, placement=constraints.PRESUM).proximal_n1
    assert not constraints.ConstraintConfig(n2_coeff=0.67).proximal_n1
    with pytest.raises(ParameterError):
        constraints.ConstraintConfig(n1_step="exact")


def test_smooth_only_penalty_keeps_the_value_and_drops_the_n1_gradient(make_model):
    m = make_model([[[1.0, -2.0], [-0.5, 3.0]], [[-1.0], [2.0]]], [[-5.0, -5.0], [-5.0]])
    cfg = constraints.ConstraintConfig(n1_coeff=0.5, n2_coeff=2.0)
    full = constraints.penalty(m, None, cfg)
    smooth = constraints.penalty(m, None, cfg, smooth_only=True)
    assert smooth.value == full.value
    np.testing.assert_allclose(smooth.weight_grads[0], [[0.0, -8.0], [-2.0, 0.0]])
    np.testing.assert_allclose(full.weight_grads[0], [[0.0, -8.5], [-2.5, 0.0]])
