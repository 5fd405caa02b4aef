"""Per-step optimization of the reward model with full-batch Adam."""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from .errors import InvalidPriorError, LayoutMismatchError, NumericOverflowError
from .model import Batch, RewardModel, _backward, _check_actions, _check_input, _forward_cache, grad_loss, residuals, sample_mask


class LossKind(enum.Enum):
    ANCHORED_MSE = "anchored_mse"
    LAPLACE_MAP = "laplace_map"


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    learning_rate: float = 3e-5
    loss_kind: LossKind = LossKind.ANCHORED_MSE
    # Only the head is updated when set; used for last-layer exactness checks.
    freeze_body: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")


@dataclass(frozen=True)
class AdamState:
    step: int
    m: np.ndarray
    v: np.ndarray
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def initial(cls, size: int, learning_rate: float) -> "AdamState":
        return cls(0, np.zeros(size), np.zeros(size), learning_rate)


def adam_step(state: AdamState, params: np.ndarray, grad: np.ndarray) -> tuple[AdamState, np.ndarray]:
    """One bias-corrected Adam update. Inputs are not modified."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != params.shape or state.m.shape != params.shape:
        raise LayoutMismatchError("Adam state, params and grad must share a layout")
    if not np.all(np.isfinite(grad)):
        raise NumericOverflowError("non-finite gradient")
    t = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new_params = params - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)
    return replace(state, step=t, m=m, v=v), new_params


def laplace_map_loss(model: RewardModel, batch: Batch, prev_map, precision_diag, obs_var: float) -> float:
    res = residuals(model, batch)
    diff = model.params - prev_map
    return float(0.5 / obs_var * res @ res + 0.5 * diff @ (precision_diag * diff))


def grad_laplace_map(model: RewardModel, batch: Batch, prev_map, precision_diag, obs_var: float, mask=None) -> np.ndarray:
    """Gradient of ``1/(2 s2) sum res^2 + 1/2 (theta - m)^T diag(H) (theta - m)``."""
    X = _check_input(model, batch.X)
    _check_actions(model, batch.actions)
    out, cache = _forward_cache(model, X, mask)
    idx = np.arange(len(batch))
    dout = np.zeros_like(out)
    dout[idx, batch.actions] = -(batch.rewards - out[idx, batch.actions]) / obs_var
    grad = model.layout.flatten(_backward(cache, dout))
    return grad + precision_diag * (model.params - prev_map)


def run_adam(
    model: RewardModel,
    grad_fn: Callable[[RewardModel, int], np.ndarray],
    cfg: TrainConfig,
    loss_fn: Optional[Callable[[RewardModel], float]] = None,
    trace: Optional[list] = None,
) -> RewardModel:
    """Full-batch Adam for ``cfg.epochs`` epochs from a fresh optimizer state."""
    state = AdamState.initial(model.num_params, cfg.learning_rate)
    params = model.params.copy()
    frozen = ~model.layout.head_mask() if cfg.freeze_body else None
    current = model
    for epoch in range(cfg.epochs):
        if trace is not None and loss_fn is not None:
            trace.append(loss_fn(current))
        grad = grad_fn(current, epoch)
        if frozen is not None:
            grad = grad.copy()
            grad[frozen] = 0.0
        state, params = adam_step(state, params, grad)
        current = model.with_params(params)
    if trace is not None and loss_fn is not None:
        trace.append(loss_fn(current))
    return current


def _dropout_mask_fn(model: RewardModel, n: int, rng):
    if model.dropout_rate > 0.0 and rng is not None and model.shape.hidden_dims:
        return lambda: sample_mask(model.dropout_rate, rng, model.shape.hidden_dims, n=n)
    return lambda: None


def fit_anchored_mse(
    model: RewardModel,
    batch: Optional[Batch],
    prev_params,
    lam: float,
    cfg: TrainConfig = TrainConfig(),
    rng: Optional[np.random.Generator] = None,
    trace: Optional[list] = None,
) -> RewardModel:
    """Minimize ``sum (r - f)^2 + lam ||theta - prev||^2`` on the current step's data.

    When the model carries a nonzero dropout rate and ``rng`` is given, a
    fresh dropout mask is drawn per datum on every epoch.
    """
    if batch is None or len(batch) == 0:
        warnings.warn("fit_anchored_mse called with an empty batch; model unchanged", RuntimeWarning)
        return model
    prev_params = np.asarray(prev_params, dtype=np.float64)
    draw = _dropout_mask_fn(model, len(batch), rng)
    return run_adam(
        model,
        lambda m, _: grad_loss(m, batch, prev_params, lam, draw()),
        cfg,
        loss_fn=lambda m: _anchored_loss(m, batch, prev_params, lam),
        trace=trace,
    )


def _anchored_loss(model, batch, prev, lam):
    res = residuals(model, batch)
    diff = model.params - prev
    return float(res @ res + lam * diff @ diff)


def fit_laplace_map(
    model: RewardModel,
    batch: Optional[Batch],
    prev_map,
    precision_diag,
    obs_var: float,
    cfg: TrainConfig = TrainConfig(loss_kind=LossKind.LAPLACE_MAP),
    rng: Optional[np.random.Generator] = None,
    trace: Optional[list] = None,
) -> RewardModel:
    """Minimize the Laplace MAP loss whose prior is the previous diagonal posterior."""
    precision_diag = np.asarray(precision_diag, dtype=np.float64)
    prev_map = np.asarray(prev_map, dtype=np.float64)
    if precision_diag.shape != model.params.shape or prev_map.shape != model.params.shape:
        raise LayoutMismatchError("prior mean/precision layout differs from model params")
    if not np.all(precision_diag > 0) or not np.all(np.isfinite(precision_diag)):
        raise InvalidPriorError("precision entries must be positive and finite")
    if obs_var <= 0:
        raise InvalidPriorError("observation variance must be positive")
    if batch is None or len(batch) == 0:
        return model.with_params(prev_map)
    draw = _dropout_mask_fn(model, len(batch), rng)
    return run_adam(
        model,
        lambda m, _: grad_laplace_map(m, batch, prev_map, precision_diag, obs_var, draw()),
        cfg,
        loss_fn=lambda m: laplace_map_loss(m, batch, prev_map, precision_diag, obs_var),
        trace=trace,
    )
