import numpy as np
import pytest

from conftest import linear_model, random_model
from oracles import fd_grad, max_rel_err, reference_adam

from epibandit.errors import InvalidPriorError, LayoutMismatchError, NumericOverflowError
from epibandit.laplace import DiagGaussianPosterior
from epibandit.model import Batch, forward
from epibandit.training import (
    AdamState,
    TrainConfig,
    adam_step,
    fit_anchored_mse,
    fit_laplace_map,
    grad_laplace_map,
    laplace_map_loss,
)


def test_adam_first_step():
    state = AdamState.initial(1, 0.001)
    state, theta = adam_step(state, np.zeros(1), np.ones(1))
    assert theta[0] == pytest.approx(-0.001, abs=1e-6)
    assert state.step == 1


def test_adam_zero_gradient():
    state = AdamState(3, np.full(2, 0.5), np.full(2, 0.2), 0.01)
    new, _ = adam_step(state, np.array([1.0, 2.0]), np.zeros(2))
    assert np.all(np.abs(new.m) < np.abs(state.m))
    assert np.all(new.v < state.v)


def test_adam_zero_gradient_from_rest_is_noop():
    state = AdamState.initial(2, 0.01)
    _, theta = adam_step(state, np.array([1.0, 2.0]), np.zeros(2))
    np.testing.assert_array_equal(theta, [1.0, 2.0])


def test_adam_matches_reference_trace():
    grads = [0.3, -1.2, 0.7, 0.7, 2.0]
    ref = reference_adam(grads, 0.5, 0.01)
    state = AdamState.initial(1, 0.01)
    theta = np.array([0.5])
    for g, r in zip(grads, ref):
        state, theta = adam_step(state, theta, np.array([g]))
        assert theta[0] == pytest.approx(r, abs=1e-15)


def test_adam_rejects_bad_inputs():
    state = AdamState.initial(2, 0.01)
    with pytest.raises(NumericOverflowError):
        adam_step(state, np.zeros(2), np.array([np.nan, 0.0]))
    with pytest.raises(LayoutMismatchError):
        adam_step(state, np.zeros(3), np.zeros(3))


def test_adam_does_not_mutate_inputs():
    state = AdamState.initial(2, 0.01)
    params = np.array([1.0, -1.0])
    adam_step(state, params, np.array([1.0, 1.0]))
    np.testing.assert_array_equal(params, [1.0, -1.0])
    np.testing.assert_array_equal(state.m, 0.0)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0.0)


def _data(seed, n=8, d=3):
    rng = np.random.default_rng(seed)
    return Batch(rng.standard_normal((n, d)), rng.integers(0, 2, n), rng.standard_normal(n))


def test_strong_anchor_keeps_params():
    m = random_model(0)
    prev = m.params.copy()
    out = fit_anchored_mse(m, _data(1), prev, 1e9, TrainConfig(epochs=5, learning_rate=1e-3))
    assert np.max(np.abs(out.params - prev)) < 1e-3


def test_single_datum_fit_closes_gap():
    # closed-form least squares for one datum is any w with w x = r
    m = linear_model([[0.0]])
    batch = Batch(np.array([[2.0]]), np.array([0]), np.array([1.5]))
    before = abs(1.5 - forward(m, [2.0])[0])
    out = fit_anchored_mse(m, batch, m.params, 0.0, TrainConfig(epochs=300, learning_rate=0.01))
    after = abs(1.5 - forward(out, [2.0])[0])
    assert after < 0.1 * before


def test_loss_non_increasing_on_quadratic():
    m = linear_model([[0.3, -0.2]])
    rng = np.random.default_rng(0)
    batch = Batch(rng.standard_normal((10, 2)), np.zeros(10, dtype=int), rng.standard_normal(10))
    trace = []
    fit_anchored_mse(m, batch, m.params, 0.5, TrainConfig(epochs=40, learning_rate=1e-3), trace=trace)
    assert len(trace) == 41
    assert all(b <= a + 1e-12 for a, b in zip(trace, trace[1:]))


def test_empty_batch_warns_and_returns_model():
    m = random_model(0)
    with pytest.warns(RuntimeWarning):
        out = fit_anchored_mse(m, None, m.params, 1.0)
    assert out is m


def test_fit_is_deterministic():
    m = random_model(2, dropout=0.2)
    cfg = TrainConfig(epochs=5, learning_rate=1e-2)
    a = fit_anchored_mse(m, _data(3), m.anchor, 1.0, cfg, np.random.default_rng(5))
    b = fit_anchored_mse(m, _data(3), m.anchor, 1.0, cfg, np.random.default_rng(5))
    np.testing.assert_array_equal(a.params, b.params)


def test_freeze_body_only_moves_head():
    m = random_model(4)
    out = fit_anchored_mse(m, _data(0), m.anchor, 0.0, TrainConfig(epochs=5, learning_rate=1e-2, freeze_body=True))
    body = ~m.layout.head_mask()
    np.testing.assert_array_equal(out.params[body], m.params[body])
    assert np.any(out.params[~body] != m.params[~body])


@pytest.mark.parametrize("seed", range(5))
def test_map_gradient_finite_differences(seed):
    m = random_model(seed, input_dim=2, hidden=(3,))
    rng = np.random.default_rng(seed)
    batch = Batch(rng.standard_normal((5, 2)), rng.integers(0, 2, 5), rng.standard_normal(5))
    prev = m.params + 0.1 * rng.standard_normal(m.num_params)
    prec = rng.uniform(0.5, 3.0, m.num_params)
    g = grad_laplace_map(m, batch, prev, prec, 0.5)
    num = fd_grad(lambda th: laplace_map_loss(m.with_params(th), batch, prev, prec, 0.5), m.params)
    assert max_rel_err(g, num) <= 1e-5


def test_first_step_prior_precision():
    m = random_model(0)
    post = DiagGaussianPosterior.prior(m.anchor, 1e-4)
    np.testing.assert_allclose(post.precision_diag, 10000.0)


def test_map_one_dimensional_closed_form():
    # f = w x on action 0; prior N(m0, 1/h); one datum (x, r)
    x, r, m0, h, s2 = 2.0, 1.0, 0.1, 4.0, 0.5
    model = linear_model([[m0]])
    prev = model.params.copy()
    prec = np.full(model.num_params, h)
    batch = Batch(np.array([[x]]), np.array([0]), np.array([r]))
    # the bias of action 0 also sees the datum, so solve the 2x2 system for (w, b)
    A = np.array([[x * x / s2 + h, x / s2], [x / s2, 1 / s2 + h]])
    rhs = np.array([x * r / s2 + h * m0, r / s2])
    w_map, b_map = np.linalg.solve(A, rhs)
    out = fit_laplace_map(model, batch, prev, prec, s2, TrainConfig(epochs=4000, learning_rate=5e-3))
    lay = out.layout
    assert out.params[lay.index(0, 0, 0)] == pytest.approx(w_map, abs=1e-4)
    assert out.params[lay.index(0, 0)] == pytest.approx(b_map, abs=1e-4)


def test_map_empty_batch_returns_prev_map():
    m = random_model(0)
    prev = m.params + 1.0
    out = fit_laplace_map(m, None, prev, np.ones(m.num_params), 0.01)
    np.testing.assert_array_equal(out.params, prev)


def test_map_rejects_nonpositive_precision():
    m = random_model(0)
    prec = np.ones(m.num_params)
    prec[0] = 0.0
    with pytest.raises(InvalidPriorError):
        fit_laplace_map(m, _data(0), m.params, prec, 0.01)
