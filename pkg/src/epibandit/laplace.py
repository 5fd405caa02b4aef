"""Gaussian posteriors over reward-model weights.

Two families are supported.  The diagonal posterior covers every parameter
and is built from the expected Fisher of a Gaussian likelihood.  The
last-layer posterior has a full precision matrix over the head only; since
the head is linear in its parameters, that matrix is the exact Hessian and
the posterior coincides with Bayesian linear regression on the penultimate
features.

Head parameters in a last-layer posterior are ordered by action block,
``[W[0, :], b[0], W[1, :], b[1], ...]``; use :func:`head_to_blocks` and
:func:`blocks_to_head` to convert from and to the model's flat layout.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import linalg

from .errors import InvalidPriorError, LayoutMismatchError, NonPositiveDefiniteError
from .model import RewardModel, forward_batch, output_jacobian


@dataclass(frozen=True)
class NoiseSpec:
    obs_var: float
    prior_var: float

    def __post_init__(self):
        if not (self.obs_var > 0 and self.prior_var > 0):
            raise InvalidPriorError("obs_var and prior_var must be strictly positive")

    @property
    def regularization(self) -> float:
        """Weight decay ``obs_var / prior_var`` of the equivalent squared loss."""
        return self.obs_var / self.prior_var


def _vector(values, name):
    arr = np.array(values, dtype=np.float64).reshape(-1)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class DiagGaussianPosterior:
    mean: np.ndarray
    precision_diag: np.ndarray

    def __post_init__(self):
        mean = _vector(self.mean, "mean")
        prec = _vector(self.precision_diag, "precision_diag")
        if mean.shape != prec.shape:
            raise LayoutMismatchError("mean and precision layouts differ")
        if not (np.all(np.isfinite(prec)) and np.all(prec > 0)):
            raise InvalidPriorError("precision entries must be strictly positive and finite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "precision_diag", prec)

    @classmethod
    def prior(cls, anchor, prior_var: float) -> "DiagGaussianPosterior":
        anchor = np.asarray(anchor, dtype=np.float64)
        return cls(anchor, np.full(anchor.shape, 1.0 / prior_var))

    @property
    def variance(self) -> np.ndarray:
        return 1.0 / self.precision_diag


@dataclass(frozen=True, eq=False)
class LastLayerPosterior:
    mean: np.ndarray
    precision: np.ndarray
    num_actions: int

    def __post_init__(self):
        mean = _vector(self.mean, "mean")
        prec = np.array(self.precision, dtype=np.float64)
        if prec.shape != (mean.size, mean.size):
            raise LayoutMismatchError("precision must be square over the head parameters")
        if mean.size % self.num_actions:
            raise LayoutMismatchError("head size is not a multiple of num_actions")
        if not np.allclose(prec, prec.T, rtol=0.0, atol=1e-12 * max(1.0, np.abs(prec).max())):
            raise NonPositiveDefiniteError("precision is not symmetric")
        prec.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "precision", prec)
        self.cholesky  # validate positive definiteness eagerly

    @classmethod
    def prior(cls, feature_dim: int, num_actions: int, prior_var: float) -> "LastLayerPosterior":
        n = num_actions * (feature_dim + 1)
        return cls(np.zeros(n), np.eye(n) / prior_var, num_actions)

    @property
    def block_size(self) -> int:
        return self.mean.size // self.num_actions

    @cached_property
    def cholesky(self) -> np.ndarray:
        try:
            return np.linalg.cholesky(self.precision)
        except np.linalg.LinAlgError as exc:
            raise NonPositiveDefiniteError(str(exc)) from exc

    def covariance(self) -> np.ndarray:
        return linalg.cho_solve((self.cholesky, True), np.eye(self.mean.size))


# -- layout helpers ------------------------------------------------------------


def with_bias(phi) -> np.ndarray:
    """Append the constant-1 coordinate that carries the head bias."""
    phi = np.atleast_2d(np.asarray(phi, dtype=np.float64))
    return np.hstack([phi, np.ones((phi.shape[0], 1))])


def head_to_blocks(head, num_actions: int) -> np.ndarray:
    head = np.asarray(head, dtype=np.float64)
    F = head.size // num_actions - 1
    W = head[: num_actions * F].reshape(num_actions, F)
    b = head[num_actions * F :]
    return np.hstack([W, b[:, None]]).reshape(-1)


def blocks_to_head(blocks, num_actions: int) -> np.ndarray:
    B = np.asarray(blocks, dtype=np.float64).reshape(num_actions, -1)
    return np.concatenate([B[:, :-1].reshape(-1), B[:, -1]])


# -- diagonal posterior ----------------------------------------------------------


def diag_fisher(model: RewardModel, X, actions, obs_var: float) -> np.ndarray:
    """Diagonal expected Fisher ``(1/obs_var) sum_n (grad f(x_n, a_n))**2``."""
    if len(actions) == 0:
        raise ValueError("batch must be nonempty")
    J = output_jacobian(model, X, actions)
    return np.einsum("np,np->p", J, J) / obs_var


def mc_expected_fisher(model: RewardModel, X, actions, obs_var: float, num_samples: int, rng: np.random.Generator) -> np.ndarray:
    """Monte-Carlo estimate of ``sum_x E_y[(grad log p(y|x))**2]`` with ``y ~ N(f(x), obs_var)``.

    The score of a Gaussian likelihood is ``(y - f) / obs_var * grad f``, so
    the squared score factors into a per-datum mean of ``(y - f)**2`` times
    ``(grad f)**2``; the samples only enter through the first factor.
    """
    if num_samples < 1:
        raise ValueError("num_samples must be >= 1")
    actions = np.asarray(actions, dtype=np.int64)
    J = output_jacobian(model, X, actions)
    mean = forward_batch(model, X)[np.arange(actions.size), actions]
    y = mean + rng.normal(0.0, np.sqrt(obs_var), size=(num_samples, actions.size))
    sq_resid = ((y - mean) ** 2).mean(axis=0)
    return (sq_resid / obs_var**2) @ (J * J)


def recursive_update(prev_precision, new_likelihood):
    """``H^(1:t) = H_l^(t) + H^(1:t-1)``; works for diagonal vectors and full matrices."""
    prev = np.asarray(prev_precision, dtype=np.float64)
    new = np.asarray(new_likelihood, dtype=np.float64)
    if prev.shape != new.shape:
        raise LayoutMismatchError(f"shape mismatch {prev.shape} vs {new.shape}")
    if prev.ndim == 1:
        if not np.all(prev > 0):
            raise InvalidPriorError("previous precision entries must be positive")
        if not np.all(new >= 0):
            raise InvalidPriorError("likelihood precision entries must be nonnegative")
    return prev + new


def sample_diag(post: DiagGaussianPosterior, rng: np.random.Generator) -> np.ndarray:
    return post.mean + rng.standard_normal(post.mean.size) / np.sqrt(post.precision_diag)


def nonzero_gradient_mean(theta_star, grad, precision_diag) -> np.ndarray:
    """Posterior mean ``theta* - H^-1 g`` for an expansion point that is not a minimum."""
    precision_diag = np.asarray(precision_diag, dtype=np.float64)
    if not np.all(precision_diag > 0):
        raise InvalidPriorError("precision entries must be positive")
    return np.asarray(theta_star, dtype=np.float64) - np.asarray(grad, dtype=np.float64) / precision_diag


def nonzero_gradient_mean_full(theta_star, grad, precision) -> np.ndarray:
    """Full-matrix form of :func:`nonzero_gradient_mean`."""
    try:
        factor = linalg.cho_factor(np.asarray(precision, dtype=np.float64), lower=True)
    except np.linalg.LinAlgError as exc:
        raise NonPositiveDefiniteError(str(exc)) from exc
    return np.asarray(theta_star, dtype=np.float64) - linalg.cho_solve(factor, np.asarray(grad, dtype=np.float64))


# -- last-layer posterior ----------------------------------------------------------


def last_layer_likelihood_hessian(phi, actions, obs_var: float, num_actions: int) -> np.ndarray:
    """Exact Hessian of ``1/(2 obs_var) sum (r - w_a . phi)^2`` over the head.

    ``phi`` already includes the bias coordinate.  The result is block
    diagonal: each datum adds ``phi phi^T / obs_var`` to its action's block.
    """
    phi = np.atleast_2d(np.asarray(phi, dtype=np.float64))
    actions = np.asarray(actions, dtype=np.int64)
    m = phi.shape[1]
    H = np.zeros((num_actions * m, num_actions * m))
    for a in range(num_actions):
        rows = phi[actions == a]
        if rows.size:
            H[a * m : (a + 1) * m, a * m : (a + 1) * m] = rows.T @ rows / obs_var
    return H


def sample_last_layer(post: LastLayerPosterior, rng: np.random.Generator) -> np.ndarray:
    """Draw head parameters (block order) from ``N(mean, precision^-1)``."""
    L = post.cholesky
    eps = rng.standard_normal(post.mean.size)
    # precision = L L^T, so L^-T eps has covariance precision^-1
    return post.mean + linalg.solve_triangular(L.T, eps, lower=False)


def blr_oracle(phi, actions, rewards, prior_mean, prior_precision, obs_var: float, num_actions: int) -> LastLayerPosterior:
    """Closed-form Bayesian linear regression posterior over the head.

    Each datum only observes its chosen action, so it is embedded as a
    row of an ``n x K(F+1)`` design matrix that is zero outside that
    action's block.
    """
    phi = np.atleast_2d(np.asarray(phi, dtype=np.float64))
    actions = np.asarray(actions, dtype=np.int64)
    rewards = np.asarray(rewards, dtype=np.float64)
    prior_mean = np.asarray(prior_mean, dtype=np.float64)
    prior_precision = np.asarray(prior_precision, dtype=np.float64)
    n, m = phi.shape if actions.size else (0, prior_mean.size // num_actions)
    design = np.zeros((n, num_actions * m))
    for i in range(n):
        design[i, actions[i] * m : (actions[i] + 1) * m] = phi[i]
    precision = prior_precision + design.T @ design / obs_var
    rhs = prior_precision @ prior_mean + design.T @ rewards / obs_var
    try:
        factor = linalg.cho_factor(precision, lower=True)
    except np.linalg.LinAlgError as exc:
        raise NonPositiveDefiniteError("posterior precision is singular") from exc
    return LastLayerPosterior(linalg.cho_solve(factor, rhs), precision, num_actions)
