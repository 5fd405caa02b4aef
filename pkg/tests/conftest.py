import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from epibandit.model import ModelShape, RewardModel


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_model(seed, input_dim=3, hidden=(4,), K=2, dropout=0.0):
    rng = np.random.default_rng(seed)
    shape = ModelShape(input_dim, hidden, K)
    return RewardModel.initialize(shape, rng, rng, dropout)


def linear_model(head_w, head_b=None, K=2):
    """No hidden layers: outputs are ``W x + b``."""
    head_w = np.atleast_2d(np.asarray(head_w, dtype=float))
    d = head_w.shape[1]
    W = np.zeros((K, d))
    W[: head_w.shape[0]] = head_w
    b = np.zeros(K) if head_b is None else np.asarray(head_b, dtype=float)
    shape = ModelShape(d, (), K)
    params = np.concatenate([W.ravel(), b])
    return RewardModel(shape, params, np.zeros_like(params))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(lines):
        terminalreporter.write_line(line)
