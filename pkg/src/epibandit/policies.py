"""Bandit agents: greedy and four Thompson-Sampling variants.

Every agent exposes ``select(x, rng)`` for one context and
``end_of_step(records)`` once per batch.  Sampling happens per context, so
two contexts in the same batch see independent posterior draws.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import laplace as la
from .epinet import EpinetConfig, EpinetParams, combined_forward, fit_epinet, sample_index
from .errors import InputShapeError, InvalidActionError
from .model import Batch, RewardModel, _forward_cache, features, forward, sample_mask
from .training import LossKind, TrainConfig, fit_anchored_mse, fit_laplace_map, grad_laplace_map


class PolicyKind(enum.Enum):
    GREEDY = "greedy"
    DROPOUT_TS = "dropout_ts"
    DIAG_LA_TS = "diag_la_ts"
    LAST_LA_TS = "last_la_ts"
    EPINET_TS = "epinet_ts"


@dataclass(frozen=True)
class PolicyConfig:
    """Hyperparameters for one agent; ``defaults`` gives the tuned values per kind."""

    kind: PolicyKind
    lam: float = 1.0
    obs_var: float = 0.01
    prior_var: float = 0.01
    dropout_rate: float = 0.0
    epinet: EpinetConfig = field(default_factory=EpinetConfig)
    nonzero_gradient_correction: bool = False

    @classmethod
    def defaults(cls, kind, **overrides) -> "PolicyConfig":
        kind = PolicyKind(kind)
        base = {
            PolicyKind.GREEDY: dict(lam=1.0),
            PolicyKind.DROPOUT_TS: dict(lam=1.0, dropout_rate=0.1),
            PolicyKind.DIAG_LA_TS: dict(prior_var=1e-4, obs_var=0.01),
            PolicyKind.LAST_LA_TS: dict(prior_var=0.01, obs_var=0.01),
            PolicyKind.EPINET_TS: dict(lam=1.0),
        }[kind]
        base.update(overrides)
        return cls(kind=kind, **base)

    @property
    def regularization(self) -> float:
        """Weight on ``||theta - theta_prev||^2`` in the squared loss."""
        if self.kind is PolicyKind.LAST_LA_TS:
            return self.obs_var / self.prior_var
        return self.lam


@dataclass(frozen=True)
class RoundRecord:
    x: np.ndarray
    a: int
    r: float


def _argmax(values: np.ndarray) -> int:
    # np.argmax returns the first maximum, i.e. ties go to the lowest index
    return int(np.argmax(values))


def select_greedy(model: RewardModel, x) -> int:
    return _argmax(forward(model, x))


def select_dropout_ts(model: RewardModel, x, rng: np.random.Generator) -> int:
    mask = sample_mask(model.dropout_rate, rng, model.shape.hidden_dims)
    return _argmax(forward(model, x, mask))


def select_diag_la_ts(model: RewardModel, post: la.DiagGaussianPosterior, x, rng: np.random.Generator) -> int:
    theta = la.sample_diag(post, rng)
    out, _ = _forward_cache(model, np.asarray(x, dtype=np.float64)[None, :], None, theta)
    return _argmax(out[0])


def select_last_la_ts(model: RewardModel, post: la.LastLayerPosterior, x, rng: np.random.Generator) -> int:
    """Sample only the head; the body stays at its trained values."""
    blocks = la.sample_last_layer(post, rng).reshape(post.num_actions, -1)
    phi = la.with_bias(features(model, np.asarray(x, dtype=np.float64)[None, :]))[0]
    return _argmax(blocks @ phi)


def select_epinet_ts(model: RewardModel, epi: EpinetParams, x, rng: np.random.Generator) -> int:
    z = sample_index(epi.config.index_dim, rng)
    return _argmax(combined_forward(model, epi, x, z))


class Agent:
    """Shared life cycle; subclasses implement ``select`` and ``_update``."""

    kind: PolicyKind

    def __init__(
        self,
        model: RewardModel,
        config: PolicyConfig,
        train: TrainConfig = TrainConfig(),
        rng: Optional[np.random.Generator] = None,
        batch_size: Optional[int] = None,
    ):
        self.model = model
        self.config = config
        self.train = train
        self.rng = rng if rng is not None else np.random.default_rng()
        self.batch_size = batch_size
        # theta^(t-1); the first step anchors to the pretrained prior mean
        self.prev_params = model.anchor.copy()
        self.t = 0

    def select(self, x, rng: Optional[np.random.Generator] = None) -> int:
        raise NotImplementedError

    def _update(self, batch: Batch) -> None:
        raise NotImplementedError

    def end_of_step(self, records: Sequence[RoundRecord]) -> "Agent":
        records = list(records)
        if self.batch_size is not None and len(records) != self.batch_size:
            raise InputShapeError(f"expected a batch of {self.batch_size} records, got {len(records)}")
        if not records:
            raise InputShapeError("end_of_step needs at least one record")
        K = self.model.shape.num_actions
        if any(not 0 <= r.a < K for r in records):
            raise InvalidActionError(f"actions must lie in [0, {K})")
        self._update(Batch.from_records(records))
        self.t += 1
        return self

    def _fit_mse(self, batch: Batch, rng=None) -> None:
        self.model = fit_anchored_mse(self.model, batch, self.prev_params, self.config.regularization, self.train, rng)
        self.prev_params = self.model.params.copy()


class GreedyAgent(Agent):
    kind = PolicyKind.GREEDY

    def select(self, x, rng=None) -> int:
        return select_greedy(self.model, x)

    def _update(self, batch):
        self._fit_mse(batch)


class DropoutAgent(Agent):
    kind = PolicyKind.DROPOUT_TS

    def __init__(self, model, config, train=TrainConfig(), rng=None, batch_size=None):
        super().__init__(model.with_dropout(config.dropout_rate), config, train, rng, batch_size)

    def select(self, x, rng=None) -> int:
        return select_dropout_ts(self.model, x, self.rng if rng is None else rng)

    def _update(self, batch):
        self._fit_mse(batch, self.rng)


class DiagLaplaceAgent(Agent):
    kind = PolicyKind.DIAG_LA_TS

    def __init__(self, model, config, train=TrainConfig(loss_kind=LossKind.LAPLACE_MAP), rng=None, batch_size=None):
        super().__init__(model, config, replace(train, loss_kind=LossKind.LAPLACE_MAP), rng, batch_size)
        self.posterior = la.DiagGaussianPosterior.prior(model.anchor, config.prior_var)

    def select(self, x, rng=None) -> int:
        return select_diag_la_ts(self.model, self.posterior, x, self.rng if rng is None else rng)

    def _update(self, batch):
        cfg = self.config
        prior = self.posterior
        self.model = fit_laplace_map(self.model, batch, prior.mean, prior.precision_diag, cfg.obs_var, self.train)
        fisher = la.diag_fisher(self.model, batch.X, batch.actions, cfg.obs_var)
        precision = la.recursive_update(prior.precision_diag, fisher)
        mean = self.model.params
        if cfg.nonzero_gradient_correction:
            g = grad_laplace_map(self.model, batch, prior.mean, prior.precision_diag, cfg.obs_var)
            mean = la.nonzero_gradient_mean(mean, g, precision)
            self.model = self.model.with_params(mean)
        self.posterior = la.DiagGaussianPosterior(mean, precision)
        self.prev_params = self.model.params.copy()


class LastLayerLaplaceAgent(Agent):
    kind = PolicyKind.LAST_LA_TS

    def __init__(self, model, config, train=TrainConfig(), rng=None, batch_size=None):
        super().__init__(model, config, train, rng, batch_size)
        self.posterior = la.LastLayerPosterior.prior(model.shape.feature_dim, model.shape.num_actions, config.prior_var)

    def select(self, x, rng=None) -> int:
        return select_last_la_ts(self.model, self.posterior, x, self.rng if rng is None else rng)

    def _update(self, batch):
        cfg = self.config
        K = self.model.shape.num_actions
        prior = self.posterior
        self._fit_mse(batch)
        phi = la.with_bias(features(self.model, batch.X))
        precision = la.recursive_update(prior.precision, la.last_layer_likelihood_hessian(phi, batch.actions, cfg.obs_var, K))
        mean = la.head_to_blocks(self.model.head, K)
        if cfg.nonzero_gradient_correction:
            g = _last_layer_map_grad(mean, phi, batch, prior, cfg.obs_var)
            mean = la.nonzero_gradient_mean_full(mean, g, precision)
            self.model = self.model.with_head(la.blocks_to_head(mean, K))
            self.prev_params = self.model.params.copy()
        self.posterior = la.LastLayerPosterior(mean, precision, K)


def _last_layer_map_grad(blocks, phi, batch: Batch, prior: la.LastLayerPosterior, obs_var: float) -> np.ndarray:
    """Head gradient of ``1/(2 s2) sum res^2 + 1/2 (w - m)^T P (w - m)`` in block order."""
    K = prior.num_actions
    W = blocks.reshape(K, -1)
    res = batch.rewards - np.einsum("nm,nm->n", phi, W[batch.actions])
    g = np.zeros_like(W)
    np.add.at(g, batch.actions, -(res / obs_var)[:, None] * phi)
    return g.reshape(-1) + prior.precision @ (blocks - prior.mean)


class EpinetAgent(Agent):
    kind = PolicyKind.EPINET_TS

    def __init__(self, model, config, train=TrainConfig(), rng=None, batch_size=None, epinet: Optional[EpinetParams] = None):
        super().__init__(model, config, train, rng, batch_size)
        if epinet is None:
            epinet = EpinetParams.initialize(config.epinet, model.shape.feature_dim, model.shape.num_actions, self.rng)
        self.epinet = epinet

    def select(self, x, rng=None) -> int:
        return select_epinet_ts(self.model, self.epinet, x, self.rng if rng is None else rng)

    def _update(self, batch):
        self.model, self.epinet = fit_epinet(
            self.model, self.epinet, batch, self.prev_params, self.config.regularization, self.train, self.rng
        )
        self.prev_params = self.model.params.copy()


_AGENTS = {
    PolicyKind.GREEDY: GreedyAgent,
    PolicyKind.DROPOUT_TS: DropoutAgent,
    PolicyKind.DIAG_LA_TS: DiagLaplaceAgent,
    PolicyKind.LAST_LA_TS: LastLayerLaplaceAgent,
    PolicyKind.EPINET_TS: EpinetAgent,
}


def make_agent(
    config: PolicyConfig,
    model: RewardModel,
    train: TrainConfig = TrainConfig(),
    rng: Optional[np.random.Generator] = None,
    batch_size: Optional[int] = None,
) -> Agent:
    return _AGENTS[config.kind](model, config, train, rng, batch_size)
