import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ucrank.metrics import (
    MetricsFrame, UndefinedMetricError, assign_segments, auc, nce, read_frames, segment_edges,
    segment_report, write_frames,
)


def nce_oracle(p, y):
    ce = -sum(yi * math.log(pi) + (1 - yi) * math.log(1 - pi) for pi, yi in zip(p, y)) / len(y)
    q = sum(y) / len(y)
    return ce / (-q * math.log(q) - (1 - q) * math.log(1 - q))


def auc_oracle(s, y):
    pos = [a for a, b in zip(s, y) if b]
    neg = [a for a, b in zip(s, y) if not b]
    wins = sum(1.0 if a > b else 0.5 if a == b else 0.0 for a, b in itertools.product(pos, neg))
    return wins / (len(pos) * len(neg))


def test_nce_base_rate_is_one():
    y = np.array([1, 0, 0, 1, 0, 0, 0, 1])
    assert abs(nce(np.full(len(y), y.mean()), y) - 1.0) < 1e-9


def test_nce_hand_example():
    assert nce([0.8, 0.4], [1, 0]) == pytest.approx(nce_oracle([0.8, 0.4], [1, 0]), abs=1e-12)
    assert nce([0.8, 0.4], [1, 0]) == pytest.approx(0.5294468, abs=1e-6)


def test_nce_perfect_predictions_clamped():
    assert nce([1.0, 0.0, 1.0], [1, 0, 1]) < 1e-5


def test_nce_undefined_for_single_class():
    with pytest.raises(UndefinedMetricError):
        nce([0.3, 0.4], [1, 1])


@given(st.lists(st.tuples(st.floats(0.01, 0.99), st.integers(0, 1)), min_size=2, max_size=50))
@settings(max_examples=100, deadline=None)
def test_nce_matches_oracle(rows):
    p, y = zip(*rows)
    if 0 < sum(y) < len(y):
        assert nce(p, y) == pytest.approx(nce_oracle(p, y), rel=1e-9)


def test_auc_pair_enumeration_example():
    assert auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75


def test_auc_all_ties_is_half():
    assert auc(np.ones(6), [0, 1, 0, 1, 1, 0]) == 0.5


def test_auc_undefined_for_single_class():
    with pytest.raises(UndefinedMetricError):
        auc([0.1, 0.2], [0, 0])


@given(st.lists(st.tuples(st.integers(0, 5), st.integers(0, 1)), min_size=2, max_size=40))
@settings(max_examples=100, deadline=None)
def test_auc_matches_pair_oracle(rows):
    s, y = zip(*rows)
    if 0 < sum(y) < len(y):
        assert auc(s, y) == pytest.approx(auc_oracle(s, y), abs=1e-12)


def test_auc_monotone_transform_invariance():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(5, 60))
        s = rng.standard_normal(n)
        y = rng.integers(0, 2, n)
        if 0 < y.sum() < n:
            assert auc(np.exp(3 * s) + 1, y) == pytest.approx(auc(s, y), abs=1e-12)


def test_segment_edges_quantiles_and_assignment():
    counts = np.arange(1, 101)
    edges = segment_edges(counts)
    np.testing.assert_allclose(edges, np.quantile(counts, [0.2, 0.4, 0.6, 0.8]))
    seg = assign_segments(counts, edges)
    assert np.bincount(seg).tolist() == [20, 20, 20, 20, 20]


def test_segment_edges_dedup_on_ties():
    edges = segment_edges([1] * 50 + [2] * 50)
    assert len(edges) == len(set(edges.tolist()))


def test_segment_report_sign_convention():
    rng = np.random.default_rng(1)
    counts = rng.integers(1, 100, 500)
    y = rng.integers(0, 2, 500)
    base = np.full(500, 0.5)
    better = np.where(y == 1, 0.7, 0.3)
    rep = segment_report(counts, y, base, better, counts)
    assert all(d < 0 for d in rep.delta if d is not None)
    assert sum(rep.counts) == 500


def test_frames_round_trip_and_version_check(tmp_path):
    frames = [MetricsFrame(day=2, nce=[0.9], auc=[0.6], active_params={"item": 10}),
              MetricsFrame(day=3, absent=True)]
    p = tmp_path / "f.jsonl"
    write_frames(p, frames)
    assert read_frames(p) == frames
    p.write_text(p.read_text().replace('"frame_version": 1', '"frame_version": 9', 1))
    with pytest.raises(ValueError, match="versions"):
        read_frames(p)
