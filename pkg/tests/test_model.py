import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import linear_model, random_model
from oracles import fd_grad, max_rel_err, straight_line_forward

from epibandit.errors import InputShapeError, InvalidActionError, InvalidRateError, LayoutMismatchError
from epibandit.model import (
    Batch,
    ModelShape,
    ParamLayout,
    RewardModel,
    anchored_mse_loss,
    features,
    forward,
    forward_batch,
    gelu,
    grad_loss,
    grad_output,
    output_jacobian,
    sample_mask,
)


def test_linear_forward_by_hand():
    m = linear_model([[2.0, -1.0]])
    assert forward(m, [3.0, 4.0])[0] == pytest.approx(2.0)


def test_gelu_origin_and_zero_network():
    assert gelu(np.array(0.0)) == 0.0
    shape = ModelShape(3, (5, 4), 2)
    m = RewardModel.initialize(shape, np.random.default_rng(0), np.random.default_rng(1))
    layers = [(W, np.zeros_like(b)) for W, b in m.layout.unflatten(m.params)]
    m = m.with_params(m.layout.flatten(layers))
    np.testing.assert_array_equal(forward(m, np.zeros(3)), 0.0)


@pytest.mark.parametrize("seed", range(5))
def test_forward_matches_straight_line(seed):
    m = random_model(seed, input_dim=3, hidden=(2,))
    x = np.random.default_rng(seed + 100).standard_normal(3)
    ref = straight_line_forward(m.shape.layer_dims, m.params, x)
    np.testing.assert_allclose(forward(m, x), ref, rtol=0, atol=1e-12)


def test_masked_forward_matches_straight_line():
    m = random_model(3, input_dim=3, hidden=(4, 3), dropout=0.25)
    mask = sample_mask(0.25, np.random.default_rng(0), m.shape.hidden_dims)
    x = np.array([0.3, -1.0, 2.0])
    ref = straight_line_forward(m.shape.layer_dims, m.params, x, keep=mask.keep, rate=0.25)
    np.testing.assert_allclose(forward(m, x, mask), ref, atol=1e-12)


def test_forward_batch_equals_rows():
    m = random_model(1, hidden=(6, 5))
    X = np.random.default_rng(0).standard_normal((7, 3))
    out = forward_batch(m, X)
    for i in range(7):
        np.testing.assert_allclose(out[i], forward(m, X[i]), atol=1e-14)


def test_input_shape_errors():
    m = random_model(0)
    with pytest.raises(InputShapeError):
        forward(m, np.zeros(4))
    with pytest.raises(InputShapeError):
        forward_batch(m, np.zeros((2, 5)))


def test_grad_loss_single_datum_by_hand():
    m = linear_model([[2.0]])
    batch = Batch(np.array([[1.0]]), np.array([0]), np.array([0.0]))
    g = grad_loss(m, batch, m.params, 0.0)
    # layout: W (2x1) then b (2); only W[0,0] and b[0] see the datum
    assert g[0] == pytest.approx(4.0)
    assert g[2] == pytest.approx(4.0)
    assert g[1] == 0.0 and g[3] == 0.0


def test_grad_loss_regularizer_only():
    m = random_model(2)
    X = np.random.default_rng(0).standard_normal((4, 3))
    actions = np.array([0, 1, 1, 0])
    rewards = forward_batch(m, X)[np.arange(4), actions]
    prev = m.params + np.random.default_rng(1).standard_normal(m.num_params)
    g = grad_loss(m, Batch(X, actions, rewards), prev, 0.7)
    np.testing.assert_allclose(g, 2 * 0.7 * (m.params - prev), atol=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_grad_loss_finite_differences(seed):
    m = random_model(seed, input_dim=2, hidden=(3,))
    rng = np.random.default_rng(seed)
    batch = Batch(rng.standard_normal((5, 2)), rng.integers(0, 2, 5), rng.standard_normal(5))
    prev = m.params + 0.1 * rng.standard_normal(m.num_params)
    lam = 0.3
    g = grad_loss(m, batch, prev, lam)
    num = fd_grad(lambda th: anchored_mse_loss(m.with_params(th), batch, prev, lam), m.params)
    assert max_rel_err(g, num) <= 1e-5


def test_grad_loss_with_mask_finite_differences():
    m = random_model(4, input_dim=2, hidden=(5, 4), dropout=0.3)
    rng = np.random.default_rng(9)
    batch = Batch(rng.standard_normal((6, 2)), rng.integers(0, 2, 6), rng.standard_normal(6))
    mask = sample_mask(0.3, rng, m.shape.hidden_dims, n=6)
    g = grad_loss(m, batch, m.anchor, 0.5, mask)
    num = fd_grad(lambda th: anchored_mse_loss(m.with_params(th), batch, m.anchor, 0.5, mask), m.params)
    assert max_rel_err(g, num) <= 1e-5


def test_grad_output_linear():
    m = linear_model([[1.0, -2.0]])
    g = grad_output(m, [3.0, 4.0], 0)
    lay = m.layout
    np.testing.assert_allclose(g[lay.index(0, 0, 0)], 3.0)
    np.testing.assert_allclose(g[lay.index(0, 0, 1)], 4.0)
    assert g[lay.index(0, 0)] == 1.0
    assert np.count_nonzero(g) == 3


def test_grad_output_zero_input():
    m = linear_model([[1.0, -2.0]])
    g = grad_output(m, [0.0, 0.0], 1)
    assert g[m.layout.index(0, 1)] == 1.0
    assert np.count_nonzero(g) == 1


@pytest.mark.parametrize("seed", range(5))
def test_grad_output_finite_differences(seed):
    m = random_model(seed, input_dim=3, hidden=(4, 3))
    x = np.random.default_rng(seed).standard_normal(3)
    for a in range(2):
        g = grad_output(m, x, a)
        num = fd_grad(lambda th: forward(m.with_params(th), x)[a], m.params)
        assert max_rel_err(g, num) <= 1e-5


def test_output_jacobian_rows_match_grad_output():
    m = random_model(5)
    X = np.random.default_rng(0).standard_normal((4, 3))
    acts = np.array([1, 0, 0, 1])
    J = output_jacobian(m, X, acts)
    for i in range(4):
        np.testing.assert_allclose(J[i], grad_output(m, X[i], acts[i]), atol=1e-14)


def test_grad_output_rejects_bad_action():
    with pytest.raises(InvalidActionError):
        grad_output(random_model(0), np.zeros(3), 2)


def test_sample_mask_zero_rate_is_all_ones():
    rng = np.random.default_rng(0)
    state = rng.bit_generator.state
    mask = sample_mask(0.0, rng, (4, 3))
    assert all(np.all(k) for k in mask.keep)
    assert rng.bit_generator.state == state


def test_sample_mask_keep_frequency():
    mask = sample_mask(0.1, np.random.default_rng(7), (1,), n=100_000)
    assert abs(mask.keep[0].mean() - 0.9) <= 0.01


def test_sample_mask_deterministic():
    a = sample_mask(0.3, np.random.default_rng(11), (8, 4))
    b = sample_mask(0.3, np.random.default_rng(11), (8, 4))
    for ka, kb in zip(a.keep, b.keep):
        np.testing.assert_array_equal(ka, kb)


def test_sample_mask_rejects_bad_rate():
    with pytest.raises(InvalidRateError):
        sample_mask(1.0, np.random.default_rng(0), (3,))
    with pytest.raises(InvalidRateError):
        sample_mask(-0.1, np.random.default_rng(0), (3,))


def test_mask_shape_mismatch():
    m = random_model(0, hidden=(4,))
    mask = sample_mask(0.5, np.random.default_rng(0), (5,))
    assert not mask.matches(m.shape.hidden_dims)
    with pytest.raises(InputShapeError):
        forward(m.with_dropout(0.5), np.zeros(3), mask)


def test_masked_expectation_matches_unmasked():
    # inverted dropout keeps the expected pre-head activations unchanged
    m = random_model(1, hidden=(3,), dropout=0.2)
    x = np.array([0.5, -0.2, 1.0])
    n = 200_000
    mask = sample_mask(0.2, np.random.default_rng(3), m.shape.hidden_dims, n=n)
    out = forward_batch(m, np.tile(x, (n, 1)), mask)
    se = out.std(axis=0) / np.sqrt(n)
    assert np.all(np.abs(out.mean(axis=0) - forward(m, x)) < 5 * se + 1e-12)


def test_layout_round_trip_and_index():
    lay = ParamLayout([(3, 4), (4, 2)])
    vec = np.arange(lay.size, dtype=float)
    np.testing.assert_array_equal(lay.flatten(lay.unflatten(vec)), vec)
    W0, b0 = lay.unflatten(vec)[0]
    assert W0[2, 1] == vec[lay.index(0, 2, 1)]
    assert b0[3] == vec[lay.index(0, 3)]
    assert lay.head_mask().sum() == 4 * 2 + 2


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(1, 6), min_size=1, max_size=4))
def test_layout_size_property(dims):
    pairs = list(zip(dims[:-1], dims[1:])) or [(dims[0], dims[0])]
    lay = ParamLayout(pairs)
    assert lay.size == sum(i * o + o for i, o in pairs)
    vec = np.random.default_rng(0).standard_normal(lay.size)
    np.testing.assert_array_equal(lay.flatten(lay.unflatten(vec)), vec)


def test_model_validation():
    shape = ModelShape(2, (), 2)
    with pytest.raises(LayoutMismatchError):
        RewardModel(shape, np.zeros(5), np.zeros(6))
    with pytest.raises(ValueError):
        RewardModel(shape, np.zeros(6), np.ones(6))  # anchor head must be zero
    with pytest.raises(ValueError):
        ModelShape(2, (), 1)


def test_initialize_anchor_and_features():
    shape = ModelShape(4, (6,), 2)
    m = RewardModel.initialize(shape, np.random.default_rng(0), np.random.default_rng(1))
    np.testing.assert_array_equal(m.anchor[m.layout.head_slice], 0.0)
    np.testing.assert_array_equal(m.anchor[~m.layout.head_mask()], m.params[~m.layout.head_mask()])
    assert features(m, np.zeros((3, 4))).shape == (3, 6)
    zero = RewardModel.initialize(shape, np.random.default_rng(0))
    np.testing.assert_array_equal(zero.head, 0.0)


def test_params_are_read_only():
    m = random_model(0)
    with pytest.raises(ValueError):
        m.params[0] = 1.0
