import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from epibandit.metrics import (
    RegretTrace,
    aggregate,
    cdf_at,
    recompute_avg_regret,
    regret_cdf,
    selection_ratio,
    update_regret,
)


def test_update_regret_examples():
    tr = update_regret(RegretTrace(), 1.0, 1.0)
    assert tr.step_regret == [0.0]
    tr = update_regret(RegretTrace(), 1.0, 0.5)  # not-publish on a clean item
    assert tr.final == 0.5
    tr = RegretTrace()
    update_regret(tr, 1.0, 0.5)
    update_regret(tr, 0.6, 0.5)
    assert tr.final == pytest.approx(0.3)
    assert len(tr) == 2


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1)), min_size=1, max_size=100))
def test_incremental_matches_recomputed(pairs):
    opt = [max(a, b) for a, b in pairs]
    ach = [min(a, b) for a, b in pairs]
    tr = RegretTrace()
    for o, a in zip(opt, ach):
        update_regret(tr, o, a)
    np.testing.assert_allclose(tr.avg_regret, recompute_avg_regret(opt, ach), rtol=0, atol=1e-12)
    assert all(r >= 0 for r in tr.avg_regret)


def test_selection_ratio():
    assert selection_ratio([1, 1, 0, 1], 1) == 0.75
    assert selection_ratio([0, 0, 0], 1) == 0.0
    acts = np.random.default_rng(0).integers(0, 3, (10, 4))
    assert sum(selection_ratio(acts, a) for a in range(3)) == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(ValueError):
        selection_ratio([], 0)


def test_aggregate():
    mean, se = aggregate([0.1, 0.3])
    assert mean == pytest.approx(0.2)
    assert se == pytest.approx(0.1)
    assert aggregate([0.4] * 5)[1] == 0.0
    draws = np.random.default_rng(0).standard_normal(20)
    mean, se = aggregate(draws)
    assert abs(mean) < 3 * se
    with pytest.raises(ValueError):
        aggregate([1.0])


def test_regret_cdf_examples():
    cdf = regret_cdf([0.1, 0.2, 0.3])
    assert cdf_at(cdf, 0.2) == pytest.approx(2 / 3)
    single = regret_cdf([0.4])
    assert cdf_at(single, 0.39) == 0.0 and cdf_at(single, 0.4) == 1.0
    dup = regret_cdf([0.1, 0.2, 0.2, 0.3])
    assert [v for v, _ in dup] == [0.1, 0.2, 0.3]
    assert dup[1][1] - dup[0][1] == pytest.approx(0.5)
    with pytest.raises(ValueError):
        regret_cdf([])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=50))
def test_cdf_monotone_and_bounded(values):
    cdf = regret_cdf(values)
    fr = [f for _, f in cdf]
    assert all(0 <= f <= 1 for f in fr)
    assert all(b >= a for a, b in zip(fr, fr[1:]))
    assert fr[-1] == 1.0
