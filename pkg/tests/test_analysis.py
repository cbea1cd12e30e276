import math
import tracemalloc

import numpy as np
import pytest

from rawjam_analysis import (
    CorrelationAccumulator,
    HypothesisMatrix,
    RankReport,
    correlate_candidates,
    enumerate_keys,
    iter_key_candidates,
    key_rank_bits,
    pearson,
    rank_candidates,
    rank_history,
)
from rawjam_attack_aes import attack
from rawjam_leakage import LeakModel, TraceSet, generate_traceset
from rawjam_util import DomainError


def test_pearson_examples():
    x = np.array([1.0, 2.0, 4.0, 8.0])
    assert pearson(x, x).r == pytest.approx(1.0)
    assert pearson(x, -x).r == pytest.approx(-1.0)
    flat = pearson(x, np.full(4, 3.0))
    assert flat.degenerate and flat.r == 0.0
    assert not pearson(x, x).degenerate


def test_pearson_preconditions():
    with pytest.raises(DomainError):
        pearson([1.0], [2.0])
    with pytest.raises(DomainError):
        pearson([1.0, 2.0], [1.0, 2.0, 3.0])


def test_pearson_affine_invariance():
    rng = np.random.default_rng(0)
    x = rng.normal(size=500)
    y = x + rng.normal(size=500)
    r = pearson(x, y).r
    assert pearson(3.0 * x + 7.0, y).r == pytest.approx(r, rel=1e-12)
    assert pearson(x, 0.5 * y - 100.0).r == pytest.approx(r, rel=1e-12)
    assert pearson(-2.0 * x, y).r == pytest.approx(-r, rel=1e-12)


def two_pass(a: np.ndarray, l: np.ndarray) -> np.ndarray:
    da = a - a.mean(axis=0)
    dl = l - l.mean()
    return (dl @ da) / np.sqrt((da * da).sum(axis=0) * (dl @ dl))


def test_streaming_matches_two_pass():
    rng = np.random.default_rng(1)
    a = rng.integers(0, 3, (20000, 32)).astype(np.float64)
    l = 2000.0 + a[:, 5] * 10.0 + rng.normal(0.0, 30.0, 20000)
    values, degenerate = correlate_candidates(HypothesisMatrix(rows=a), l, chunk=3001)
    assert not degenerate.any()
    np.testing.assert_allclose(values, two_pass(a, l), rtol=1e-12, atol=1e-15)
    assert int(np.argmax(values)) == 5


def test_grouped_matches_dense():
    rng = np.random.default_rng(2)
    table = rng.integers(0, 2, (256, 64)).astype(np.uint8)
    keys = rng.integers(0, 256, 5000)
    l = rng.normal(size=5000) + table[keys, 9]
    grouped = HypothesisMatrix.grouped(table, keys)
    dense = HypothesisMatrix(rows=grouped.dense())
    g_values, _ = correlate_candidates(grouped, l)
    d_values, _ = correlate_candidates(dense, l)
    np.testing.assert_allclose(g_values, d_values, rtol=1e-12, atol=1e-15)
    assert grouped.shape == (5000, 64)


def test_column_equal_to_leakage():
    l = np.array([0.0, 1.0, 0.0, 2.0, 1.0])
    a = np.stack([l, np.ones(5), l[::-1]], axis=1)
    values, degenerate = correlate_candidates(HypothesisMatrix(rows=a), l)
    assert values[0] == pytest.approx(1.0)
    assert degenerate.tolist() == [False, True, False]
    assert values[1] == 0.0


def test_dimension_mismatch():
    with pytest.raises(DomainError):
        correlate_candidates(HypothesisMatrix(rows=np.zeros((4, 2))), np.zeros(5))


def test_accumulator_in_pieces():
    rng = np.random.default_rng(3)
    a = rng.integers(0, 2, (1000, 8)).astype(np.float64)
    l = rng.normal(size=1000) + 1e6
    acc = CorrelationAccumulator(8)
    for start in range(0, 1000, 128):
        acc.update(a[start : start + 128], l[start : start + 128])
    values, _ = acc.result()
    np.testing.assert_allclose(values, two_pass(a, l), rtol=1e-9, atol=1e-12)


def test_rank_examples():
    ranking = rank_candidates(np.array([0.1, 0.9, 0.5]), true_candidate=1)
    assert ranking.true_rank == 1
    assert ranking.best == 1
    assert rank_candidates(np.zeros(4), true_candidate=0).true_rank == 1
    assert rank_candidates(np.zeros(4), true_candidate=3).true_rank == 4


def test_rank_is_permutation_and_degenerate_last():
    rng = np.random.default_rng(4)
    values = rng.normal(size=256)
    degenerate = np.zeros(256, dtype=bool)
    degenerate[np.argmax(values)] = True
    ranking = rank_candidates(values, degenerate=degenerate)
    assert sorted(ranking.order.tolist()) == list(range(256))
    assert sorted(ranking.ranks.tolist()) == list(range(1, 257))
    assert ranking.order[-1] == np.argmax(values)
    kept = values[ranking.order[:-1]]
    assert np.all(np.diff(kept) <= 0)


def test_rank_report_csv():
    report = RankReport([rank_candidates(np.array([0.2, 0.4]), 1, position=0), rank_candidates(np.array([0.3, 0.1]), 1, position=1)], 10)
    lines = report.to_csv().splitlines()
    assert lines[0] == "byte_index,candidate,correlation,rank"
    assert lines[1] == "0,1,0.40000000000000002,1"
    assert len(lines) == 5
    assert report.ranks() == [1, 2]
    assert report.recovered_count() == 1
    assert report.key_rank_bits() == pytest.approx(1.0)


def test_key_rank_bits_needs_truth():
    assert key_rank_bits([1, 1, 4]) == pytest.approx(2.0)
    with pytest.raises(DomainError):
        key_rank_bits([1, None])


def _toy_traces(n: int = 4000) -> TraceSet:
    rng = np.random.default_rng(5)
    cts = rng.integers(0, 256, (n, 16), dtype=np.uint8)
    times = (cts[:, 0] == 17).astype(np.float64) * 5.0 + rng.normal(size=n)
    return TraceSet("aes-ct", cts, times)


def _toy_attack(ts: TraceSet) -> RankReport:
    table = (np.arange(256)[:, None] == np.arange(256)[None, :]).astype(np.uint8)
    values, degenerate = correlate_candidates(HypothesisMatrix.grouped(table, ts.ciphertexts[:, 0]), ts.times)
    return RankReport([rank_candidates(values, 17, degenerate)], ts.count)


def test_rank_history_single_checkpoint_equals_full_run():
    ts = _toy_traces()
    full = _toy_attack(ts)
    hist = rank_history(ts, _toy_attack, [ts.count])
    assert hist.history == [(ts.count, full.ranks())]
    np.testing.assert_array_equal(hist[0].values, full[0].values)


def test_rank_history_records_every_checkpoint():
    ts = _toy_traces()
    hist = rank_history(ts, _toy_attack, [100, 1000, 4000])
    assert [obs for obs, _ in hist.history] == [100, 1000, 4000]
    assert hist.history[-1][1] == [1]
    lines = hist.history_csv().splitlines()
    assert lines[0] == "observations,byte_index,rank"
    assert lines[-1] == "4000,0,1"


@pytest.mark.parametrize("checkpoints", [[], [10, 5], [1], [5000]])
def test_rank_history_rejects_bad_checkpoints(checkpoints):
    with pytest.raises(DomainError):
        rank_history(_toy_traces(), _toy_attack, checkpoints)


def test_enumerate_keys_visits_by_summed_rank():
    report = RankReport(
        [rank_candidates(np.array([0.9, 0.5, 0.1]), position=i) for i in range(3)]
    )
    seen = []

    def verify(key):
        seen.append(tuple(key))
        return key == [0, 1, 0]

    assert enumerate_keys(report, verify) == [0, 1, 0]
    assert seen[0] == (0, 0, 0)
    assert len(seen) <= 4
    assert enumerate_keys(report, lambda key: False, budget=5) is None


def test_enumerate_keys_exhausts_small_space():
    report = RankReport([rank_candidates(np.array([0.2, 0.1])) for _ in range(2)])
    tried = []
    assert enumerate_keys(report, lambda key: tried.append(key) or False) is None
    assert len(tried) == 4
    assert math.log2(len(tried)) == 2


def test_key_candidates_cover_space_once_by_summed_rank():
    rng = np.random.default_rng(8)
    report = RankReport([rank_candidates(rng.normal(size=4), position=i) for i in range(3)])
    keys = [tuple(k) for k in iter_key_candidates(report)]
    assert len(keys) == 64
    assert len(set(keys)) == 64
    costs = [sum(int(br.ranks[c]) for br, c in zip(report.rankings, key)) for key in keys]
    assert costs == sorted(costs)
    assert costs[0] == 3 and costs[-1] == 12


def test_key_candidates_walk_in_constant_memory():
    rng = np.random.default_rng(9)
    report = RankReport([rank_candidates(rng.normal(size=256), position=i) for i in range(16)])
    walk = iter_key_candidates(report)
    tracemalloc.start()
    try:
        for _ in range(50000):
            next(walk)
        _, peak = tracemalloc.get_traced_memory()
    finally:
        tracemalloc.stop()
    assert peak < 1 << 20


def test_average_true_rank_falls_with_observations():
    key = bytes.fromhex("2b7e151628aed2a6abf7158809cf4f3c")
    checkpoints = [1000, 4000, 16000]
    totals = np.zeros(len(checkpoints))
    for seed in range(10):
        ts = generate_traceset("aes-ct", checkpoints[-1], key, LeakModel.synthetic(), seed=200 + seed)
        hist = rank_history(ts, lambda t: attack(t, true_key=key), checkpoints)
        totals += [np.mean(ranks) for _, ranks in hist.history]
    means = totals / 10
    assert all(b <= a for a, b in zip(means, means[1:]))
    assert means[-1] < means[0]
