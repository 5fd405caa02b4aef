"""Epinet head: a small MLP over detached features and an epistemic index.

For features ``phi`` and index ``z`` the MLP ``h`` maps ``[phi, z]`` to a
``K x index_dim`` matrix; each action's output is that row dotted with
``z``.  The epinet output is the learnable MLP plus ``prior_scale`` times
an identically shaped MLP whose weights are frozen at construction.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from functools import cached_property
from typing import Optional

import numpy as np

from .errors import InputShapeError, LayoutMismatchError
from .training import AdamState, TrainConfig, adam_step
from .model import (
    Batch,
    ParamLayout,
    RewardModel,
    _backward,
    _check_actions,
    _check_input,
    _forward_cache,
    gelu,
    gelu_grad,
)


@dataclass(frozen=True)
class EpinetConfig:
    index_dim: int = 8
    hidden_width: int = 256
    prior_scale: float = 1.0

    def __post_init__(self):
        if self.index_dim < 1 or self.hidden_width < 1:
            raise ValueError("index_dim and hidden_width must be >= 1")
        if self.prior_scale < 0:
            raise ValueError("prior_scale must be nonnegative")


def _layout(config: EpinetConfig, feature_dim: int, num_actions: int) -> ParamLayout:
    return ParamLayout(
        [
            (feature_dim + config.index_dim, config.hidden_width),
            (config.hidden_width, num_actions * config.index_dim),
        ]
    )


def _init_mlp(layout: ParamLayout, rng: np.random.Generator) -> np.ndarray:
    layers = []
    for fan_in, fan_out in layout.layer_dims:
        layers.append((rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_out, fan_in)), np.zeros(fan_out)))
    return layout.flatten(layers)


@dataclass(frozen=True, eq=False)
class EpinetParams:
    config: EpinetConfig
    feature_dim: int
    num_actions: int
    learnable: np.ndarray
    prior_fixed: np.ndarray

    def __post_init__(self):
        size = self.layout.size
        for name in ("learnable", "prior_fixed"):
            arr = np.array(getattr(self, name), dtype=np.float64).reshape(-1)
            if arr.size != size:
                raise LayoutMismatchError(f"{name}: expected {size} entries, got {arr.size}")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @cached_property
    def layout(self) -> ParamLayout:
        return _layout(self.config, self.feature_dim, self.num_actions)

    @classmethod
    def initialize(cls, config: EpinetConfig, feature_dim: int, num_actions: int, rng: np.random.Generator) -> "EpinetParams":
        layout = _layout(config, feature_dim, num_actions)
        learnable = _init_mlp(layout, rng)
        prior = _init_mlp(layout, rng)
        return cls(config, feature_dim, num_actions, learnable, prior)

    def with_learnable(self, learnable) -> "EpinetParams":
        return EpinetParams(self.config, self.feature_dim, self.num_actions, learnable, self.prior_fixed)

    @property
    def prior_checksum(self) -> str:
        return hashlib.sha256(self.prior_fixed.tobytes()).hexdigest()


def _mlp(layout: ParamLayout, vec: np.ndarray, inp: np.ndarray):
    (W1, b1), (W2, b2) = layout.unflatten(vec)
    pre = inp @ W1.T + b1
    hidden = gelu(pre)
    return hidden @ W2.T + b2, (inp, pre, hidden, W2)


def _check_index(params: EpinetParams, phi: np.ndarray, Z: np.ndarray):
    if phi.ndim != 2 or phi.shape[1] != params.feature_dim:
        raise InputShapeError(f"expected features of width {params.feature_dim}, got {phi.shape}")
    if Z.shape != (phi.shape[0], params.config.index_dim):
        raise InputShapeError(f"expected indices of shape {(phi.shape[0], params.config.index_dim)}, got {Z.shape}")


def epi_forward_batch(params: EpinetParams, phi, Z) -> np.ndarray:
    """Epinet outputs ``(n, K)`` for features ``(n, F)`` and indices ``(n, D)``."""
    phi = np.asarray(phi, dtype=np.float64)
    Z = np.asarray(Z, dtype=np.float64)
    _check_index(params, phi, Z)
    n, K, D = phi.shape[0], params.num_actions, params.config.index_dim
    inp = np.hstack([phi, Z])
    out_l, _ = _mlp(params.layout, params.learnable, inp)
    out = np.einsum("nkd,nd->nk", out_l.reshape(n, K, D), Z)
    if params.config.prior_scale:
        out_p, _ = _mlp(params.layout, params.prior_fixed, inp)
        out = out + params.config.prior_scale * np.einsum("nkd,nd->nk", out_p.reshape(n, K, D), Z)
    return out


def epi_forward(params: EpinetParams, phi, z) -> np.ndarray:
    phi = np.asarray(phi, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if phi.ndim != 1 or z.ndim != 1:
        raise InputShapeError("epi_forward expects single feature and index vectors")
    return epi_forward_batch(params, phi[None, :], z[None, :])[0]


def combined_forward_batch(model: RewardModel, params: EpinetParams, X, Z) -> np.ndarray:
    out, (_, acts, _, _) = _forward_cache(model, _check_input(model, X))
    return out + epi_forward_batch(params, acts[-1], Z)


def combined_forward(model: RewardModel, params: EpinetParams, x, z) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    return combined_forward_batch(model, params, x[None, :], z[None, :])[0]


def sample_index(index_dim: int, rng: np.random.Generator, n: Optional[int] = None) -> np.ndarray:
    """Standard normal epistemic index, ``(index_dim,)`` or ``(n, index_dim)``."""
    if index_dim < 1:
        raise ValueError("index_dim must be >= 1")
    return rng.standard_normal(index_dim if n is None else (n, index_dim))


def epinet_loss(model: RewardModel, params: EpinetParams, batch: Batch, Z, prev_base_params, lam: float) -> float:
    g = combined_forward_batch(model, params, batch.X, Z)
    res = batch.rewards - g[np.arange(len(batch)), batch.actions]
    diff = model.params - prev_base_params
    return float(res @ res + lam * diff @ diff)


def epinet_grad(model: RewardModel, params: EpinetParams, batch: Batch, Z, prev_base_params, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of ``sum (r - g(x, a; z))^2 + lam ||theta - prev||^2``.

    Returns ``(grad_theta, grad_eta)``.  The features fed to the epinet are
    treated as constants, so ``theta`` only receives gradient through the
    base model's own output.  The frozen prior receives none.
    """
    X = _check_input(model, batch.X)
    _check_actions(model, batch.actions)
    Z = np.asarray(Z, dtype=np.float64)
    base, cache = _forward_cache(model, X)
    phi = cache[1][-1]
    _check_index(params, phi, Z)
    n, K, D = len(batch), params.num_actions, params.config.index_dim
    idx = np.arange(n)
    g = base + epi_forward_batch(params, phi, Z)
    dres = -2.0 * (batch.rewards - g[idx, batch.actions])

    dout = np.zeros_like(base)
    dout[idx, batch.actions] = dres
    grad_theta = model.layout.flatten(_backward(cache, dout)) + 2.0 * lam * (model.params - prev_base_params)

    inp = np.hstack([phi, Z])
    _, (inp, pre, hidden, W2) = _mlp(params.layout, params.learnable, inp)
    d_mlp = np.zeros((n, K, D))
    d_mlp[idx, batch.actions, :] = dres[:, None] * Z
    d_mlp = d_mlp.reshape(n, K * D)
    gW2 = d_mlp.T @ hidden
    gb2 = d_mlp.sum(axis=0)
    d_pre = (d_mlp @ W2) * gelu_grad(pre)
    gW1 = d_pre.T @ inp
    gb1 = d_pre.sum(axis=0)
    grad_eta = params.layout.flatten([(gW1, gb1), (gW2, gb2)])
    return grad_theta, grad_eta


def fit_epinet(
    model: RewardModel,
    params: EpinetParams,
    batch: Batch,
    prev_base_params,
    lam: float,
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> tuple[RewardModel, EpinetParams]:
    """Joint Adam fit of base and learnable epinet weights.

    A fresh index is drawn for every datum on every epoch.
    """
    prev_base_params = np.asarray(prev_base_params, dtype=np.float64)
    n_theta = model.num_params
    state = AdamState.initial(n_theta + params.learnable.size, cfg.learning_rate)
    vec = np.concatenate([model.params, params.learnable])
    for _ in range(cfg.epochs):
        Z = sample_index(params.config.index_dim, rng, n=len(batch))
        g_theta, g_eta = epinet_grad(model, params, batch, Z, prev_base_params, lam)
        if cfg.freeze_body:
            g_theta = np.where(model.layout.head_mask(), g_theta, 0.0)
        state, vec = adam_step(state, vec, np.concatenate([g_theta, g_eta]))
        model = model.with_params(vec[:n_theta])
        params = params.with_learnable(vec[n_theta:])
    return model, params
