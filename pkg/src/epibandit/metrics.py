"""Regret traces, action-selection ratios and cross-seed summaries."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


@dataclass
class RegretTrace:
    """Per-step optimal and achieved batch means plus running average regret."""

    optimal: list = field(default_factory=list)
    achieved: list = field(default_factory=list)
    avg_regret: list = field(default_factory=list)
    _cumulative: float = 0.0

    def __len__(self) -> int:
        return len(self.optimal)

    @property
    def step_regret(self) -> list:
        return [o - a for o, a in zip(self.optimal, self.achieved)]

    @property
    def final(self) -> float:
        return self.avg_regret[-1]


def update_regret(trace: RegretTrace, optimal_batch_mean: float, achieved_batch_mean: float) -> RegretTrace:
    """Append one step; ``R_t = (1/t) sum_{s<=t} (r*_s - achieved_s)``."""
    trace.optimal.append(float(optimal_batch_mean))
    trace.achieved.append(float(achieved_batch_mean))
    trace._cumulative += float(optimal_batch_mean) - float(achieved_batch_mean)
    trace.avg_regret.append(trace._cumulative / len(trace.optimal))
    return trace


def recompute_avg_regret(optimal: Sequence[float], achieved: Sequence[float]) -> np.ndarray:
    steps = np.asarray(optimal, dtype=np.float64) - np.asarray(achieved, dtype=np.float64)
    return np.cumsum(steps) / np.arange(1, steps.size + 1)


def selection_ratio(actions: Sequence[int], a: int) -> float:
    actions = np.asarray(actions).reshape(-1)
    if actions.size == 0:
        raise ValueError("selection_ratio needs at least one action")
    return float(np.mean(actions == a))


@dataclass(frozen=True)
class SeedSummary:
    seed: int
    final_avg_regret: float
    ratios: tuple


def aggregate(values: Sequence[float]) -> tuple[float, float]:
    """Sample mean and standard error (n - 1 divisor)."""
    values = np.asarray(values, dtype=np.float64)
    if values.size < 2:
        raise ValueError("aggregate needs at least two values")
    return float(values.mean()), float(values.std(ddof=1) / np.sqrt(values.size))


def regret_cdf(values: Sequence[float]) -> list[tuple[float, float]]:
    """Empirical CDF as ``(value, fraction <= value)`` at each distinct value."""
    values = np.sort(np.asarray(values, dtype=np.float64))
    if values.size == 0:
        raise ValueError("regret_cdf needs at least one value")
    uniq, counts = np.unique(values, return_counts=True)
    return list(zip(uniq.tolist(), (np.cumsum(counts) / values.size).tolist()))


def cdf_at(cdf: list[tuple[float, float]], x: float) -> float:
    """Evaluate a step CDF from :func:`regret_cdf` (right-continuous)."""
    frac = 0.0
    for value, f in cdf:
        if value <= x:
            frac = f
        else:
            break
    return frac
