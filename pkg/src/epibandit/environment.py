"""Batch contextual-bandit environments.

Dataset files are delimiter-separated text, one record per line::

    # id, score, e0, e1, ...
    c1, 0.7, 0.1, -0.2

Lines starting with ``#`` are comments.  An example is toxic when its score
is strictly greater than 0.5.  Action 0 is "not publish", action 1 is
"publish".
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np
from scipy.stats import norm

from .errors import DatasetParseError, HorizonError, InvalidActionError

log = logging.getLogger(__name__)

NOT_PUBLISH = 0
PUBLISH = 1
TOXIC_THRESHOLD = 0.5

DEFAULT_REWARDS = {
    (NOT_PUBLISH, False): 0.5,
    (NOT_PUBLISH, True): 0.5,
    (PUBLISH, False): 1.0,
    (PUBLISH, True): -0.5,
}

_DELIMITERS = {"csv": ",", "tsv": "\t"}


@dataclass(frozen=True, eq=False)
class ModerationExample:
    id: str
    embedding: np.ndarray
    score: float

    @property
    def toxic(self) -> bool:
        return self.score > TOXIC_THRESHOLD


@dataclass(frozen=True, eq=False)
class ModerationDataset:
    ids: tuple
    embeddings: np.ndarray
    scores: np.ndarray

    def __post_init__(self):
        emb = np.array(self.embeddings, dtype=np.float64)
        scores = np.array(self.scores, dtype=np.float64).reshape(-1)
        if emb.ndim != 2 or emb.shape[0] != scores.size or len(self.ids) != scores.size:
            raise ValueError("ids, embeddings and scores must have matching lengths")
        if not np.all(np.isfinite(emb)):
            raise ValueError("embeddings must be finite")
        emb.setflags(write=False)
        scores.setflags(write=False)
        object.__setattr__(self, "ids", tuple(str(i) for i in self.ids))
        object.__setattr__(self, "embeddings", emb)
        object.__setattr__(self, "scores", scores)

    def __len__(self) -> int:
        return self.scores.size

    def __getitem__(self, i: int) -> ModerationExample:
        return ModerationExample(self.ids[i], self.embeddings[i], float(self.scores[i]))

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    @property
    def toxic(self) -> np.ndarray:
        return self.scores > TOXIC_THRESHOLD


def _split(line: str, fmt: str) -> list[str]:
    if fmt == "whitespace":
        return line.split()
    return [c.strip() for c in next(csv.reader([line], delimiter=_DELIMITERS[fmt]))]


def ingest(path: Union[str, Path], fmt: str = "csv") -> ModerationDataset:
    """Read and validate a dataset file; embedding width is fixed by the first row."""
    if fmt not in (*_DELIMITERS, "whitespace"):
        raise ValueError(f"unknown dataset format {fmt!r}")
    ids, rows, scores = [], [], []
    width = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            cells = _split(stripped, fmt)
            if len(cells) < 3:
                raise DatasetParseError("expected id, score and at least one embedding value", lineno)
            try:
                values = [float(c) for c in cells[1:]]
            except ValueError as exc:
                raise DatasetParseError(f"non-numeric value ({exc})", lineno) from None
            if not all(np.isfinite(values)):
                raise DatasetParseError("non-finite value", lineno)
            if width is None:
                width = len(values) - 1
            elif len(values) - 1 != width:
                raise DatasetParseError(f"expected {width} embedding values, got {len(values) - 1}", lineno)
            ids.append(cells[0])
            scores.append(values[0])
            rows.append(values[1:])
    if not rows:
        raise DatasetParseError(f"{path}: no records")
    log.info("ingested %d rows of width %d from %s", len(rows), width, path)
    return ModerationDataset(tuple(ids), np.array(rows), np.array(scores))


def write_dataset(dataset: ModerationDataset, path: Union[str, Path], fmt: str = "csv") -> None:
    sep = {"csv": ",", "tsv": "\t", "whitespace": " "}[fmt]
    buf = io.StringIO()
    buf.write("# id" + sep + "score" + "".join(f"{sep}e{j}" for j in range(dataset.dim)) + "\n")
    for i in range(len(dataset)):
        cells = [dataset.ids[i], repr(float(dataset.scores[i]))]
        cells += [repr(float(v)) for v in dataset.embeddings[i]]
        buf.write(sep.join(cells) + "\n")
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def make_synthetic_moderation(
    n: int,
    dim: int = 16,
    label_noise: float = 0.1,
    toxic_fraction: float = 0.36,
    seed: int = 0,
) -> ModerationDataset:
    """Gaussian embeddings whose toxicity is a linear threshold, with flipped labels.

    Scores are ``0.5 + 0.5 * tanh(w . x - c)`` with ``c`` chosen so that about
    ``toxic_fraction`` of the clean labels are toxic; a ``label_noise``
    fraction of examples then have their score mirrored around 0.5.
    """
    rng = np.random.default_rng(seed)
    w = rng.standard_normal(dim)
    w /= np.linalg.norm(w)
    X = rng.standard_normal((n, dim))
    margin = X @ w
    # w is unit-norm so the margin is standard normal
    cut = norm.ppf(1.0 - toxic_fraction)
    scores = 0.5 + 0.5 * np.tanh(margin - cut)
    flip = rng.random(n) < label_noise
    scores = np.where(flip, 1.0 - scores, scores)
    ids = tuple(f"s{i}" for i in range(n))
    return ModerationDataset(ids, X, scores)


@dataclass(frozen=True)
class EnvConfig:
    batch_size: int = 32
    horizon: int = 100
    rewards: dict = field(default_factory=lambda: dict(DEFAULT_REWARDS))
    shuffle_seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.horizon < 1:
            raise ValueError("batch_size and horizon must be positive")
        missing = [k for k in DEFAULT_REWARDS if k not in self.rewards]
        if missing:
            raise ValueError(f"reward table missing entries {missing}")


class ModerationEnv:
    """Streams a shuffled dataset without replacement, ``B`` examples per step."""

    num_actions = 2

    def __init__(self, dataset: ModerationDataset, config: EnvConfig = EnvConfig()):
        self.dataset = dataset
        self.config = config
        self.order = np.random.default_rng(config.shuffle_seed).permutation(len(dataset))

    @property
    def dim(self) -> int:
        return self.dataset.dim

    def next_batch(self, t: int) -> list[ModerationExample]:
        """Examples for step ``t`` (1-based)."""
        B = self.config.batch_size
        lo, hi = (t - 1) * B, t * B
        if t < 1 or hi > len(self.dataset):
            raise HorizonError(f"step {t} needs {hi} examples, dataset has {len(self.dataset)}")
        return [self.dataset[i] for i in self.order[lo:hi]]

    def reward(self, example: ModerationExample, action: int, rng: Optional[np.random.Generator] = None) -> float:
        if action not in (NOT_PUBLISH, PUBLISH):
            raise InvalidActionError(f"unknown action {action}")
        return float(self.config.rewards[(action, example.toxic)])

    def optimal_reward(self, example: ModerationExample) -> float:
        return max(self.config.rewards[(a, example.toxic)] for a in (NOT_PUBLISH, PUBLISH))


@dataclass(frozen=True, eq=False)
class LinearContext:
    embedding: np.ndarray


class SyntheticLinearEnv:
    """Gaussian contexts with rewards ``w_a . x + N(0, noise**2)``."""

    def __init__(self, weights, noise: float = 0.0, context_scale: float = 1.0, batch_size: int = 32, seed: int = 0):
        self.weights = np.array(weights, dtype=np.float64)
        if self.weights.ndim != 2 or self.weights.shape[0] < 2:
            raise ValueError("weights must be (num_actions >= 2, dim)")
        self.noise = float(noise)
        self.context_scale = float(context_scale)
        self.batch_size = batch_size
        self.seed = seed

    @property
    def num_actions(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.weights.shape[1]

    def next_batch(self, t: int) -> list[LinearContext]:
        rng = np.random.default_rng([self.seed, t])
        X = self.context_scale * rng.standard_normal((self.batch_size, self.dim))
        return [LinearContext(x) for x in X]

    def mean_reward(self, example: LinearContext, action: int) -> float:
        if not 0 <= action < self.num_actions:
            raise InvalidActionError(f"unknown action {action}")
        return float(self.weights[action] @ example.embedding)

    def reward(self, example: LinearContext, action: int, rng: Optional[np.random.Generator] = None) -> float:
        mean = self.mean_reward(example, action)
        if self.noise and rng is not None:
            mean += self.noise * rng.standard_normal()
        return mean

    def optimal_reward(self, example: LinearContext) -> float:
        return float(np.max(self.weights @ example.embedding))
