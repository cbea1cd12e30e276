import numpy as np
import pytest
from cryptography.exceptions import UnsupportedAlgorithm
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

from ciphers import (
    AES_SBOX,
    SM4_SBOX,
    AccessTrace,
    SboxTable,
    aes_ct_batch,
    aes_ct_encrypt,
    aes_inv_sbox,
    aes_key_schedule,
    aes_recover_master_key,
    sm4_cn_batch,
    sm4_cn_encrypt,
    sm4_key_schedule,
    sm4_recover_master_key,
)
from ciphers.trace import TraceEntry
from rawjam_leakage import batch_conflicts, conflict_count
from rawjam_util import DomainError

FIPS_KEY = bytes.fromhex("000102030405060708090a0b0c0d0e0f")
FIPS_PT = bytes.fromhex("00112233445566778899aabbccddeeff")
FIPS_CT = bytes.fromhex("69c4e0d86a7b0430d8cdb78070b4c55a")

SM4_KEY = bytes.fromhex("0123456789abcdeffedcba9876543210")
SM4_CT = bytes.fromhex("681edf34d206965e86b3e94f536e4246")


def random_blocks(seed: int, n: int) -> np.ndarray:
    return np.random.default_rng(seed).integers(0, 256, (n, 16), dtype=np.uint8)


def oracle_aes(key: bytes, pt: bytes) -> bytes:
    enc = Cipher(algorithms.AES(key), modes.ECB()).encryptor()
    return enc.update(pt) + enc.finalize()


def oracle_sm4(key: bytes, pt: bytes) -> bytes:
    try:
        enc = Cipher(algorithms.SM4(key), modes.ECB()).encryptor()
    except (UnsupportedAlgorithm, AttributeError):
        pytest.skip("local OpenSSL has no SM4")
    return enc.update(pt) + enc.finalize()


def test_sbox_tables():
    assert AES_SBOX[0] == 0x63
    assert SM4_SBOX[0] == 0xD6
    assert aes_inv_sbox(0x63) == 0
    assert all(aes_inv_sbox(int(AES_SBOX[b])) == b for b in range(256))


def test_sbox_rejects_non_permutation():
    with pytest.raises(Exception):
        SboxTable("broken", [0] * 256)
    with pytest.raises(Exception):
        SboxTable("short", list(range(255)))


def test_trace_rejects_offsets_outside_table():
    trace = AccessTrace()
    with pytest.raises(Exception):
        trace.record(256, 1, 0)
    trace.record(255, 1, 0)
    assert trace[0] == TraceEntry(255, 1, 0)
    assert trace[0].line == 3 and trace[0].column == 63 and trace[0].word == 63


def test_aes_standard_vector():
    ct, trace = aes_ct_encrypt(FIPS_KEY, FIPS_PT)
    assert ct == FIPS_CT
    assert len(trace) == 640


def test_aes_round_keys():
    round_keys = aes_key_schedule(FIPS_KEY)
    assert len(round_keys) == 11
    assert round_keys[0] == FIPS_KEY
    assert round_keys[10] == bytes.fromhex("13111d7fe3944a17f307a78b4d2b30c5")


def test_aes_rejects_bad_sizes():
    with pytest.raises(DomainError):
        aes_ct_encrypt(b"short", FIPS_PT)
    with pytest.raises(DomainError):
        aes_ct_encrypt(FIPS_KEY, b"x" * 15)


def test_aes_matches_reference_on_random_pairs():
    keys = random_blocks(1, 1000)
    pts = random_blocks(2, 1000)
    for key, pt in zip(keys[:50], pts[:50]):
        ct, _ = aes_ct_encrypt(bytes(key), bytes(pt))
        assert ct == oracle_aes(bytes(key), bytes(pt))
    for key, pt in zip(keys, pts):
        ct, _ = aes_ct_batch(bytes(key), pt.reshape(1, 16))
        assert bytes(ct[0]) == oracle_aes(bytes(key), bytes(pt))


def test_aes_batch_agrees_with_instrumented_encryption():
    key = bytes(range(16, 32))
    pts = random_blocks(3, 20)
    cts, indices = aes_ct_batch(key, pts)
    assert indices.shape == (20, 160)
    for pt, ct, idx in zip(pts, cts, indices):
        ref_ct, trace = aes_ct_encrypt(key, bytes(pt))
        assert bytes(ct) == ref_ct
        assert trace.columns()[::4] == [int(i) % 64 for i in idx]
        for jam in (0, 5, 17, 63):
            word, line = batch_conflicts("aes-ct", idx.reshape(1, -1), jam)
            assert conflict_count(trace, jam) == (word[0], line[0])


def test_aes_constant_cache_line_profile():
    key = bytes(range(16))
    lines = set()
    columns = set()
    for pt in random_blocks(4, 100):
        _, trace = aes_ct_encrypt(key, bytes(pt))
        lines.add(tuple(trace.lines()))
        columns.add(tuple(trace.columns()))
    assert len(lines) == 1
    assert next(iter(lines))[:8] == (0, 1, 2, 3, 0, 1, 2, 3)
    assert len(columns) == 100


def test_aes_schedule_inverts():
    for key in random_blocks(5, 100):
        key = bytes(key)
        assert aes_recover_master_key(aes_key_schedule(key)[10]) == key


def test_sm4_standard_vector():
    ct, trace = sm4_cn_encrypt(SM4_KEY, SM4_KEY)
    assert ct == SM4_CT
    assert len(trace) == 4 + 128


def test_sm4_round_keys():
    rk = sm4_key_schedule(SM4_KEY)
    assert len(rk) == 32
    assert rk[0] == 0xF12186F9
    assert rk[31] == 0x9124A012


def test_sm4_prefetches_every_line_first():
    _, trace = sm4_cn_encrypt(SM4_KEY, bytes(16))
    assert [e.offset for e in trace[:4]] == [0, 64, 128, 192]
    assert all(e.prefetch and e.round == 0 for e in trace[:4])
    assert not any(e.prefetch for e in trace[4:])
    assert [len(trace.lookups(r)) for r in range(1, 33)] == [4] * 32


def test_sm4_matches_reference_on_random_pairs():
    keys = random_blocks(6, 1000)
    pts = random_blocks(7, 1000)
    for key, pt in zip(keys, pts):
        ct, _ = sm4_cn_batch(bytes(key), pt.reshape(1, 16))
        assert bytes(ct[0]) == oracle_sm4(bytes(key), bytes(pt))


def test_sm4_batch_agrees_with_instrumented_encryption():
    key = bytes(range(100, 116))
    pts = random_blocks(8, 20)
    cts, indices = sm4_cn_batch(key, pts)
    assert indices.shape == (20, 128)
    for pt, ct, idx in zip(pts, cts, indices):
        ref_ct, trace = sm4_cn_encrypt(key, bytes(pt))
        assert bytes(ct) == ref_ct
        assert [e.offset for e in trace if not e.prefetch] == [int(i) for i in idx]
        for jam in (0, 9, 40):
            word, line = batch_conflicts("sm4-cn", idx.reshape(1, -1), jam)
            assert conflict_count(trace, jam) == (word[0], line[0])


def test_sm4_schedule_inverts():
    for key in random_blocks(9, 100):
        key = bytes(key)
        assert sm4_recover_master_key(*sm4_key_schedule(key)[28:]) == key
