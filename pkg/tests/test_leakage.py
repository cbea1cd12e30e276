import numpy as np
import pytest

from ciphers import AccessTrace, aes_ct_encrypt, sm4_cn_batch
from rawjam_leakage import (
    LeakModel,
    conflict_count,
    filter_outliers,
    generate_traceset,
    linearity_curve,
    scan_jam_offsets,
    simulate_time,
)
from rawjam_util import DomainError

KEY = bytes.fromhex("2b7e151628aed2a6abf7158809cf4f3c")


def test_model_profiles():
    aes = LeakModel.for_cipher("aes-ct")
    assert (aes.base_cycles, aes.word_penalty, aes.line_penalty) == (2000.0, 10.0, 2.0)
    assert LeakModel.for_cipher("sm4-cn").base_cycles == 700.0
    sgx = LeakModel.for_cipher("sm4-cn", "sgx")
    assert sgx.base_cycles == 14600.0 and sgx.outlier_rate == pytest.approx(0.07)
    assert LeakModel.for_cipher("aes-ct", noise_sigma=5.0, jam_word=None).noise_sigma == 5.0


@pytest.mark.parametrize(
    "overrides",
    [{"line_penalty": -1.0}, {"word_penalty": -0.5}, {"noise_sigma": -1.0}, {"jam_word": 64}, {"profile": "tee"}],
)
def test_model_rejects_bad_parameters(overrides):
    with pytest.raises(DomainError):
        LeakModel(**overrides)


def test_unknown_cipher():
    with pytest.raises(DomainError):
        LeakModel.for_cipher("des")


def test_conflict_count_examples():
    trace = AccessTrace()
    for offset in (0, 3, 4, 63, 64, 255):
        trace.record(offset, 1, 0)
    trace.record(1, 0, 0, prefetch=True)
    assert conflict_count(trace, 0) == (2, 2)
    assert conflict_count(trace, 16) == (1, 0)
    assert conflict_count(trace, 63) == (1, 0)


def test_aes_every_lookup_conflicts_once():
    _, trace = aes_ct_encrypt(KEY, bytes(16))
    for jam in range(64):
        hits = conflict_count(trace, jam)
        assert hits.word_hits + hits.line_hits == 160


def test_simulate_time_without_noise():
    _, trace = aes_ct_encrypt(KEY, bytes(16))
    model = LeakModel(noise_sigma=0.0)
    hits = conflict_count(trace, 0)
    t = simulate_time(trace, model, np.random.default_rng(0))
    assert t == 2000.0 + 10.0 * hits.word_hits + 2.0 * hits.line_hits
    assert t == 2000.0 + 320.0 + 8.0 * hits.word_hits


def _trace_with_hits(word_hits, line_hits):
    trace = AccessTrace()
    for i in range(word_hits):
        trace.record(i % 4, 1, 0)
    for i in range(line_hits):
        trace.record(4 + i % 60, 1, 0)
    trace.record(128, 1, 0)
    return trace


@pytest.mark.parametrize("seed", range(5))
def test_simulate_time_grows_with_each_conflict(seed):
    model = LeakModel.for_cipher("aes-ct", "sgx")
    time = lambda w, l: simulate_time(_trace_with_hits(w, l), model, np.random.default_rng(seed))
    for w in range(4):
        for l in range(4):
            assert time(w + 1, l) > time(w, l)
            assert time(w, l + 1) > time(w, l)
            assert time(w + 1, l) - time(w, l) == pytest.approx(model.word_penalty)


def test_aes_timing_window():
    ts = generate_traceset("aes-ct", 5000, KEY, LeakModel.for_cipher("aes-ct"), seed=1)
    assert ts.times.min() > 2000.0 - 5 * 30.0
    lo, hi = np.percentile(ts.times, [0.5, 99.5])
    assert hi - lo < 300.0
    assert ts.times.mean() == pytest.approx(2000.0 + 320.0 + 8.0 * 10.0, abs=5.0)


def test_synthetic_times_are_hit_counts():
    model = LeakModel.synthetic()
    ts = generate_traceset("sm4-cn", 300, KEY, model, seed=3)
    assert np.array_equal(ts.times, np.round(ts.times))
    assert ts.times.mean() == pytest.approx(128 / 64, abs=0.5)


def test_generation_is_deterministic_and_worker_independent():
    model = LeakModel.for_cipher("aes-ct")
    a = generate_traceset("aes-ct", 10000, KEY, model, seed=11)
    b = generate_traceset("aes-ct", 10000, KEY, model, seed=11)
    c = generate_traceset("aes-ct", 10000, KEY, model, seed=11, workers=2)
    d = generate_traceset("aes-ct", 10000, KEY, model, seed=12)
    assert a == b
    assert a == c
    assert not np.array_equal(a.times, d.times)


def test_prefix_of_larger_set_is_smaller_set():
    model = LeakModel.for_cipher("sm4-cn")
    small = generate_traceset("sm4-cn", 4096, KEY, model, seed=4)
    large = generate_traceset("sm4-cn", 9000, KEY, model, seed=4)
    assert large.prefix(4096) == small


def test_known_plaintext_belongs_to_first_record():
    ts = generate_traceset("sm4-cn", 10, KEY, LeakModel.for_cipher("sm4-cn"), seed=5)
    pt = np.frombuffer(ts.known_plaintext, dtype=np.uint8).reshape(1, 16)
    ct, _ = sm4_cn_batch(KEY, pt)
    assert bytes(ct[0]) == bytes(ts.ciphertexts[0])
    assert ts.subset(slice(1, 5)).known_plaintext is None


def test_generate_rejects_empty_request():
    with pytest.raises(DomainError):
        generate_traceset("aes-ct", 0, KEY, LeakModel(), seed=0)


def test_sgx_filter_keeps_uncontaminated_share():
    model = LeakModel.for_cipher("sm4-cn", "sgx")
    ts = generate_traceset("sm4-cn", 40000, KEY, model, seed=6)
    kept_ts, kept = filter_outliers(ts, 2000.0)
    assert kept == pytest.approx(0.93, abs=0.03)
    assert kept_ts.count == round(kept * ts.count)
    assert kept_ts.times.max() < model.base_cycles + 3000.0


def test_filter_rejects_negative_radius():
    ts = generate_traceset("aes-ct", 10, KEY, LeakModel(), seed=0)
    with pytest.raises(DomainError):
        filter_outliers(ts, -1.0)


def test_scan_without_penalties_is_flat():
    model = LeakModel(line_penalty=0.0, word_penalty=0.0)
    result = scan_jam_offsets("aes-ct", KEY, model, 500, seed=2)
    assert result.flat
    assert result.best == 0
    assert len(result.candidates) == 64


def test_scan_aes_words_stand_out_from_baseline():
    model = LeakModel.for_cipher("aes-ct")
    result = scan_jam_offsets(
        "aes-ct", KEY, model, 1000, seed=2, candidates=range(64, 64 + 70), table_word_base=64
    )
    outside = result.means[result.candidates >= 128]
    inside = result.means[result.candidates < 128]
    assert np.ptp(outside) == 0
    assert inside.min() > outside[0] + 300.0


def test_scan_sm4_uplift_in_table():
    model = LeakModel.for_cipher("sm4-cn")
    result = scan_jam_offsets("sm4-cn", KEY, model, 2000, seed=2, candidates=range(200, 300), table_word_base=210)
    inside = (result.candidates >= 210) & (result.candidates < 274)
    baseline = result.means[~inside][0]
    assert np.all(result.means[inside] > baseline + 40.0)
    assert 210 <= result.best < 274


def test_linearity_without_noise():
    model = LeakModel(noise_sigma=0.0)
    curve = linearity_curve(model, np.random.default_rng(0), repeats=3)
    assert curve.slope == pytest.approx(10.0)
    assert curve.intercept == pytest.approx(2000.0)
    assert curve.r_squared >= 0.99
    assert len(curve.counts) == 65


def test_linearity_with_default_noise():
    curve = linearity_curve(LeakModel(), np.random.default_rng(1), repeats=100)
    assert curve.slope == pytest.approx(10.0, abs=0.5)
    assert curve.r_squared >= 0.99
    assert np.all(np.diff(curve.means[::8]) > 0)

