"""Reward model: GELU MLP feature extractor with a linear regression head.

Parameters live in one flat float64 vector whose layout is fixed by the
model shape: for every layer the weight matrix (row-major, ``out x in``)
followed by its bias.  The head is always the last layer, so the head block
is a contiguous tail of the vector.

Gradients are derived by hand for this architecture; there is no autodiff.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.special import erf

from .errors import (
    InputShapeError,
    InvalidActionError,
    InvalidRateError,
    LayoutMismatchError,
    NumericOverflowError,
)

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x):
    """Exact GELU, ``x * Phi(x)``."""
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu_grad(x):
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    return cdf + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


@dataclass(frozen=True)
class ModelShape:
    input_dim: int
    hidden_dims: tuple = ()
    num_actions: int = 2
    activation: str = "gelu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1:
            raise ValueError("input_dim must be positive")
        if any(h < 1 for h in self.hidden_dims):
            raise ValueError("hidden widths must be positive")
        if self.num_actions < 2:
            raise ValueError("num_actions must be at least 2")
        if self.activation != "gelu":
            raise ValueError(f"unsupported activation {self.activation!r}")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        """(fan_in, fan_out) for every linear layer, head last."""
        widths = [self.input_dim, *self.hidden_dims, self.num_actions]
        return list(zip(widths[:-1], widths[1:]))

    @property
    def feature_dim(self) -> int:
        return self.hidden_dims[-1] if self.hidden_dims else self.input_dim


class ParamLayout:
    """Index map between (layer, row, col) and positions in the flat vector."""

    def __init__(self, layer_dims: Sequence[tuple[int, int]]):
        self.layer_dims = tuple(layer_dims)
        self._weight_slices = []
        self._bias_slices = []
        offset = 0
        for fan_in, fan_out in self.layer_dims:
            self._weight_slices.append(slice(offset, offset + fan_in * fan_out))
            offset += fan_in * fan_out
            self._bias_slices.append(slice(offset, offset + fan_out))
            offset += fan_out
        self.size = offset

    @classmethod
    def from_shape(cls, shape: ModelShape) -> "ParamLayout":
        return cls(shape.layer_dims)

    @property
    def num_layers(self) -> int:
        return len(self.layer_dims)

    def weight_slice(self, layer: int) -> slice:
        return self._weight_slices[layer]

    def bias_slice(self, layer: int) -> slice:
        return self._bias_slices[layer]

    def index(self, layer: int, row: int, col: Optional[int] = None) -> int:
        """Flat index of ``W[row, col]`` of ``layer``, or of ``b[row]`` when col is None."""
        fan_in, fan_out = self.layer_dims[layer]
        if not 0 <= row < fan_out or (col is not None and not 0 <= col < fan_in):
            raise IndexError((layer, row, col))
        if col is None:
            return self._bias_slices[layer].start + row
        return self._weight_slices[layer].start + row * fan_in + col

    @property
    def head_slice(self) -> slice:
        return slice(self._weight_slices[-1].start, self.size)

    def head_mask(self) -> np.ndarray:
        mask = np.zeros(self.size, dtype=bool)
        mask[self.head_slice] = True
        return mask

    def unflatten(self, vec: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        """Views ``(W, b)`` into ``vec`` for every layer."""
        if vec.shape[-1] != self.size:
            raise LayoutMismatchError(f"expected {self.size} parameters, got {vec.shape[-1]}")
        return [
            (vec[..., ws].reshape(vec.shape[:-1] + (fan_out, fan_in)), vec[..., bs])
            for (fan_in, fan_out), ws, bs in zip(self.layer_dims, self._weight_slices, self._bias_slices)
        ]

    def flatten(self, layers: Iterable[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
        parts = []
        for W, b in layers:
            lead = W.shape[:-2]
            parts.append(W.reshape(lead + (-1,)))
            parts.append(b)
        vec = np.concatenate(parts, axis=-1)
        if vec.shape[-1] != self.size:
            raise LayoutMismatchError(f"expected {self.size} parameters, got {vec.shape[-1]}")
        return vec


def _frozen(values, size: int, name: str) -> np.ndarray:
    arr = np.array(values, dtype=np.float64).reshape(-1)
    if arr.size != size:
        raise LayoutMismatchError(f"{name}: expected {size} entries, got {arr.size}")
    if not np.all(np.isfinite(arr)):
        raise NumericOverflowError(f"{name} contains non-finite entries")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class RewardModel:
    """Feature extractor plus linear head computing one reward per action.

    ``anchor`` is the prior mean: the pretrained body weights with the head
    set to zero.
    """

    shape: ModelShape
    params: np.ndarray
    anchor: np.ndarray
    dropout_rate: float = 0.0

    def __post_init__(self):
        size = ParamLayout.from_shape(self.shape).size
        object.__setattr__(self, "params", _frozen(self.params, size, "params"))
        object.__setattr__(self, "anchor", _frozen(self.anchor, size, "anchor"))
        if np.any(self.anchor[self.layout.head_slice] != 0.0):
            raise ValueError("anchor head entries must be exactly zero")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise InvalidRateError(f"dropout rate must lie in [0, 1), got {self.dropout_rate}")

    @cached_property
    def layout(self) -> ParamLayout:
        return ParamLayout.from_shape(self.shape)

    @property
    def num_params(self) -> int:
        return self.layout.size

    @property
    def head(self) -> np.ndarray:
        return self.params[self.layout.head_slice]

    def with_params(self, params) -> "RewardModel":
        return RewardModel(self.shape, params, self.anchor, self.dropout_rate)

    def with_head(self, head) -> "RewardModel":
        params = self.params.copy()
        params[self.layout.head_slice] = head
        return self.with_params(params)

    def with_dropout(self, rate: float) -> "RewardModel":
        return RewardModel(self.shape, self.params, self.anchor, rate)

    @classmethod
    def initialize(
        cls,
        shape: ModelShape,
        body_rng: np.random.Generator,
        head_rng: Optional[np.random.Generator] = None,
        dropout_rate: float = 0.0,
    ) -> "RewardModel":
        """Build a model whose body stands in for pretrained weights.

        Body weights are drawn from ``N(0, 1/fan_in)`` with ``body_rng``.  When
        ``head_rng`` is given the head gets the usual uniform
        ``+-1/sqrt(fan_in)`` initialization; otherwise it starts at zero.
        The anchor always has a zero head.
        """
        layout = ParamLayout.from_shape(shape)
        layers = []
        for fan_in, fan_out in shape.layer_dims[:-1]:
            W = body_rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_out, fan_in))
            b = body_rng.normal(0.0, 0.1, size=fan_out)
            layers.append((W, b))
        fan_in, fan_out = shape.layer_dims[-1]
        layers.append((np.zeros((fan_out, fan_in)), np.zeros(fan_out)))
        anchor = layout.flatten(layers)
        params = anchor.copy()
        if head_rng is not None:
            bound = 1.0 / np.sqrt(fan_in)
            params[layout.head_slice] = head_rng.uniform(-bound, bound, size=fan_out * (fan_in + 1))
        return cls(shape, params, anchor, dropout_rate)


@dataclass(frozen=True)
class DropoutMask:
    """Keep flags per hidden layer; arrays are ``(width,)`` or ``(n, width)``."""

    keep: tuple
    rate: float

    def matches(self, hidden_dims: Sequence[int]) -> bool:
        return len(self.keep) == len(hidden_dims) and all(
            k.shape[-1] == h for k, h in zip(self.keep, hidden_dims)
        )


def sample_mask(rate: float, rng: np.random.Generator, hidden_dims: Sequence[int], n: Optional[int] = None) -> DropoutMask:
    """Keep each hidden unit independently with probability ``1 - rate``."""
    if not 0.0 <= rate < 1.0:
        raise InvalidRateError(f"dropout rate must lie in [0, 1), got {rate}")
    lead = () if n is None else (n,)
    if rate == 0.0:
        keep = tuple(np.ones(lead + (h,), dtype=bool) for h in hidden_dims)
    else:
        keep = tuple(rng.random(lead + (h,)) >= rate for h in hidden_dims)
    return DropoutMask(keep, rate)


@dataclass(frozen=True)
class Batch:
    """Array view of a set of ``(x, a, r)`` tuples."""

    X: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.X, dtype=np.float64))
        actions = np.asarray(self.actions, dtype=np.int64).reshape(-1)
        rewards = np.asarray(self.rewards, dtype=np.float64).reshape(-1)
        if not (X.shape[0] == actions.size == rewards.size):
            raise InputShapeError("X, actions and rewards must have the same length")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "actions", actions)
        object.__setattr__(self, "rewards", rewards)

    @classmethod
    def from_records(cls, records) -> "Batch":
        records = list(records)
        if not records:
            raise InputShapeError("cannot build a batch from zero records")
        return cls(np.stack([r.x for r in records]), [r.a for r in records], [r.r for r in records])

    def __len__(self) -> int:
        return self.actions.size

    def concat(self, other: "Batch") -> "Batch":
        return Batch(
            np.vstack([self.X, other.X]),
            np.concatenate([self.actions, other.actions]),
            np.concatenate([self.rewards, other.rewards]),
        )


# -- forward / backward ------------------------------------------------------


def _check_input(model: RewardModel, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.shape.input_dim:
        raise InputShapeError(f"expected inputs of width {model.shape.input_dim}, got shape {X.shape}")
    return X


def _check_actions(model: RewardModel, actions: np.ndarray) -> None:
    if actions.size and (actions.min() < 0 or actions.max() >= model.shape.num_actions):
        raise InvalidActionError(f"actions must lie in [0, {model.shape.num_actions})")


def _forward_cache(model: RewardModel, X: np.ndarray, mask: Optional[DropoutMask] = None, params=None):
    params = model.params if params is None else params
    if mask is not None and not mask.matches(model.shape.hidden_dims):
        raise InputShapeError("dropout mask does not match hidden widths")
    layers = model.layout.unflatten(params)
    acts, pres, scales = [X], [], []
    a = X
    with np.errstate(over="ignore", invalid="ignore"):
        for l, (W, b) in enumerate(layers[:-1]):
            z = a @ W.T + b
            a = gelu(z)
            scale = None
            if mask is not None:
                scale = mask.keep[l] / (1.0 - mask.rate)
                a = a * scale
            pres.append(z)
            scales.append(scale)
            acts.append(a)
        W, b = layers[-1]
        out = a @ W.T + b
    if not np.all(np.isfinite(out)):
        raise NumericOverflowError("non-finite model output")
    return out, (layers, acts, pres, scales)


def _backward(cache, dout: np.ndarray, per_sample: bool = False) -> list[tuple[np.ndarray, np.ndarray]]:
    layers, acts, pres, scales = cache
    grads = []
    delta = dout
    for l in range(len(layers) - 1, -1, -1):
        a_in = acts[l]
        if per_sample:
            grads.append((delta[:, :, None] * a_in[:, None, :], delta))
        else:
            grads.append((delta.T @ a_in, delta.sum(axis=0)))
        if l > 0:
            da = delta @ layers[l][0]
            if scales[l - 1] is not None:
                da = da * scales[l - 1]
            delta = da * gelu_grad(pres[l - 1])
    grads.reverse()
    return grads


def forward_batch(model: RewardModel, X, mask: Optional[DropoutMask] = None) -> np.ndarray:
    """Outputs ``(n, K)`` for a stack of contexts."""
    out, _ = _forward_cache(model, _check_input(model, X), mask)
    return out


def forward(model: RewardModel, x, mask: Optional[DropoutMask] = None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise InputShapeError("forward expects a single context vector")
    return forward_batch(model, x[None, :], mask)[0]


def features(model: RewardModel, X, params=None) -> np.ndarray:
    """Penultimate activations (inputs of the head), without dropout."""
    _, (_, acts, _, _) = _forward_cache(model, _check_input(model, X), None, params)
    return acts[-1]


def backprop(model: RewardModel, X, dout, mask: Optional[DropoutMask] = None) -> np.ndarray:
    """Flat gradient of ``sum(dout * f(X))`` with respect to the parameters."""
    _, cache = _forward_cache(model, _check_input(model, X), mask)
    return model.layout.flatten(_backward(cache, np.asarray(dout, dtype=np.float64)))


def output_jacobian(model: RewardModel, X, actions) -> np.ndarray:
    """Per-sample gradients ``grad_theta f(x_n, a_n)`` stacked as ``(n, P)``."""
    X = _check_input(model, X)
    actions = np.asarray(actions, dtype=np.int64).reshape(-1)
    _check_actions(model, actions)
    _, cache = _forward_cache(model, X)
    dout = np.zeros((X.shape[0], model.shape.num_actions))
    dout[np.arange(X.shape[0]), actions] = 1.0
    grads = _backward(cache, dout, per_sample=True)
    return model.layout.flatten(grads)


def grad_output(model: RewardModel, x, a: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return output_jacobian(model, x[None, :], [a])[0]


def residuals(model: RewardModel, batch: Batch, mask: Optional[DropoutMask] = None) -> np.ndarray:
    """``r - f(x, a)`` for each datum."""
    _check_actions(model, batch.actions)
    out = forward_batch(model, batch.X, mask)
    return batch.rewards - out[np.arange(len(batch)), batch.actions]


def anchored_mse_loss(model: RewardModel, batch: Batch, prev_params, lam: float, mask=None) -> float:
    res = residuals(model, batch, mask)
    diff = model.params - prev_params
    return float(res @ res + lam * diff @ diff)


def grad_loss(model: RewardModel, batch: Batch, prev_params, lam: float, mask: Optional[DropoutMask] = None) -> np.ndarray:
    """Gradient of ``sum_b (r_b - f(x_b, a_b))^2 + lam * ||theta - prev||^2``."""
    if len(batch) == 0:
        raise InputShapeError("batch must be nonempty")
    if lam < 0:
        raise ValueError("lam must be nonnegative")
    prev_params = np.asarray(prev_params, dtype=np.float64)
    if prev_params.shape != model.params.shape:
        raise LayoutMismatchError("prev_params layout differs from model params")
    _check_actions(model, batch.actions)
    X = _check_input(model, batch.X)
    out, cache = _forward_cache(model, X, mask)
    idx = np.arange(len(batch))
    dout = np.zeros_like(out)
    dout[idx, batch.actions] = -2.0 * (batch.rewards - out[idx, batch.actions])
    grad = model.layout.flatten(_backward(cache, dout))
    return grad + 2.0 * lam * (model.params - prev_params)
