import logging
import math
from dataclasses import dataclass, field, replace
from multiprocessing import Pool
from typing import Iterable, List, NamedTuple, Optional, Tuple

import numpy as np
from tqdm import tqdm

from ciphers import aes_ct_batch, sm4_cn_batch
from ciphers.trace import AccessTrace
from rawjam_config import (
    AES_BASE_CYCLES,
    CIPHER_AES_CT,
    CIPHER_IDS,
    CIPHER_SM4_CN,
    DEFAULT_JAM_WORD,
    DEFAULT_NOISE_SIGMA,
    FILTER_RADIUS,
    LINE_PENALTY,
    LINE_SIZE,
    PROFILE_SGX,
    PROFILE_USER,
    RNG_BLOCK_SIZE,
    SGX_BASE_CYCLES,
    SGX_NOISE_SIGMA,
    SGX_OUTLIER_RATE,
    SGX_OUTLIER_SHIFT,
    SM4_BASE_CYCLES,
    TABLE_SIZE,
    WORD_PENALTY,
    WORD_SIZE,
    WORDS_PER_PAGE,
)
from rawjam_util import DomainError, block_rng, check_jam_word, check_key

log = logging.getLogger(__name__)

# substreams of a block: plaintexts and noise are drawn independently so the
# offset scan can replay identical noise for every candidate word
PLAINTEXT_STREAM = 0
NOISE_STREAM = 1


def check_cipher(cipher_id: str) -> str:
    if cipher_id not in CIPHER_IDS:
        raise DomainError(f"unknown cipher `{cipher_id}`, expected one of {sorted(CIPHER_IDS)}")
    return cipher_id


@dataclass(frozen=True)
class LeakModel:
    """
    Parameters of the simulated read-after-write timing channel.
    A victim run costs base_cycles plus word_penalty for every read that hits
    the jammed word and line_penalty for every other read of the jammed line.
    """

    base_cycles: float = AES_BASE_CYCLES
    line_penalty: float = LINE_PENALTY
    word_penalty: float = WORD_PENALTY
    noise_sigma: float = DEFAULT_NOISE_SIGMA
    jam_word: int = DEFAULT_JAM_WORD
    profile: str = PROFILE_USER
    outlier_rate: float = 0.0
    outlier_shift: Tuple[float, float] = field(default=SGX_OUTLIER_SHIFT)
    word_size: int = WORD_SIZE

    def __post_init__(self):
        if self.line_penalty < 0 or self.word_penalty < 0:
            raise DomainError(
                f"penalties must be >= 0, got line `{self.line_penalty}` word `{self.word_penalty}`"
            )
        if self.noise_sigma < 0:
            raise DomainError(f"noise sigma `{self.noise_sigma}` is negative")
        if self.profile not in (PROFILE_USER, PROFILE_SGX):
            raise DomainError(f"unknown profile `{self.profile}`")
        if self.word_size <= 0 or LINE_SIZE % self.word_size:
            raise DomainError(f"word size `{self.word_size}` does not divide a cache line")
        if not 0.0 <= self.outlier_rate < 1.0:
            raise DomainError(f"outlier rate `{self.outlier_rate}` outside [0, 1)")
        check_jam_word(self.jam_word, self.words_per_table)

    @property
    def words_per_table(self) -> int:
        return TABLE_SIZE // self.word_size

    @property
    def words_per_line(self) -> int:
        return LINE_SIZE // self.word_size

    @property
    def jam_line(self) -> int:
        return self.jam_word // self.words_per_line

    @staticmethod
    def for_cipher(cipher_id: str, profile: str = PROFILE_USER, **overrides) -> "LeakModel":
        base = AES_BASE_CYCLES if check_cipher(cipher_id) == CIPHER_AES_CT else SM4_BASE_CYCLES
        model = LeakModel(base_cycles=base)
        if profile == PROFILE_SGX:
            model = model.sgx()
        return model.with_overrides(**overrides)

    @staticmethod
    def synthetic(jam_word: int = DEFAULT_JAM_WORD) -> "LeakModel":
        """
        Noise-free leakage where the time is the raw count of reads that hit
        the jammed word.
        """
        return LeakModel(
            base_cycles=0.0, line_penalty=0.0, word_penalty=1.0, noise_sigma=0.0, jam_word=jam_word
        )

    def sgx(self) -> "LeakModel":
        return replace(
            self,
            profile=PROFILE_SGX,
            base_cycles=SGX_BASE_CYCLES,
            noise_sigma=SGX_NOISE_SIGMA,
            outlier_rate=SGX_OUTLIER_RATE,
        )

    def with_overrides(self, **overrides) -> "LeakModel":
        kept = {k: v for k, v in overrides.items() if v is not None}
        return replace(self, **kept) if kept else self


class ConflictCount(NamedTuple):
    word_hits: int
    line_hits: int


def conflict_count(trace: AccessTrace, jam_word: int, word_size: int = WORD_SIZE) -> ConflictCount:
    check_jam_word(jam_word, TABLE_SIZE // word_size)
    jam_line = jam_word * word_size // LINE_SIZE
    word_hits = 0
    line_hits = 0
    for e in trace:
        if e.prefetch:
            continue
        if e.offset // word_size == jam_word:
            word_hits += 1
        elif e.offset // LINE_SIZE == jam_line:
            line_hits += 1
    return ConflictCount(word_hits, line_hits)


def batch_conflicts(
    cipher_id: str, indices: np.ndarray, jam_word: Optional[int], word_size: int = WORD_SIZE
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Ground-truth (word_hits, line_hits) per row of S-box indices produced by
    the batched victims. `jam_word=None` stands for a word outside the table.
    """
    n = indices.shape[0]
    if jam_word is None:
        return np.zeros(n, dtype=np.int64), np.zeros(n, dtype=np.int64)
    words_per_line = LINE_SIZE // word_size
    idx = indices.astype(np.int64)
    if cipher_id == CIPHER_AES_CT:
        # every lookup reads the same column of all four lines, so exactly one
        # of its fetches lands in the jammed line
        word = (idx % LINE_SIZE) // word_size == jam_word % words_per_line
        word_hits = word.sum(axis=1)
        return word_hits, indices.shape[1] - word_hits
    word = idx // word_size == jam_word
    line = (idx // LINE_SIZE == jam_word // words_per_line) & ~word
    return word.sum(axis=1), line.sum(axis=1)


def simulate_time(trace: AccessTrace, model: LeakModel, rng: np.random.Generator) -> float:
    hits = conflict_count(trace, model.jam_word, model.word_size)
    t = model.base_cycles + model.word_penalty * hits.word_hits + model.line_penalty * hits.line_hits
    if model.noise_sigma > 0:
        t += rng.normal(0.0, model.noise_sigma)
    if model.outlier_rate > 0 and rng.random() < model.outlier_rate:
        t += rng.uniform(*model.outlier_shift)
    return float(t)


def simulate_times(
    word_hits: np.ndarray, line_hits: np.ndarray, model: LeakModel, rng: np.random.Generator
) -> np.ndarray:
    """Vectorized simulate_time over precomputed conflict counts."""
    n = len(word_hits)
    t = model.base_cycles + model.word_penalty * word_hits + model.line_penalty * line_hits
    t = np.asarray(t, dtype=np.float64)
    if model.noise_sigma > 0:
        t = t + rng.normal(0.0, model.noise_sigma, n)
    if model.outlier_rate > 0:
        hit = rng.random(n) < model.outlier_rate
        t = t + np.where(hit, rng.uniform(*model.outlier_shift, n), 0.0)
    return t


class TraceSet:
    """
    The attacker's view: ciphertext and time pairs, plus how they were made.
    `known_plaintext` is the plaintext of record 0 when the attacker knows it.
    """

    def __init__(
        self,
        cipher_id: str,
        ciphertexts: np.ndarray,
        times: np.ndarray,
        seed: int = 0,
        model: Optional[LeakModel] = None,
        known_plaintext: Optional[bytes] = None,
    ):
        self.cipher_id = check_cipher(cipher_id)
        self.ciphertexts = np.ascontiguousarray(ciphertexts, dtype=np.uint8).reshape(-1, 16)
        self.times = np.ascontiguousarray(times, dtype=np.float64).reshape(-1)
        if len(self.ciphertexts) != len(self.times):
            raise DomainError(
                f"`{len(self.ciphertexts)}` ciphertexts but `{len(self.times)}` times"
            )
        self.seed = seed
        self.model = model
        self.known_plaintext = known_plaintext

    @property
    def count(self) -> int:
        return len(self.times)

    def __len__(self):
        return self.count

    @property
    def records(self) -> List[Tuple[bytes, float]]:
        return [(bytes(c), float(t)) for c, t in zip(self.ciphertexts, self.times)]

    def prefix(self, n: int) -> "TraceSet":
        return self.subset(slice(0, n))

    def subset(self, selector) -> "TraceSet":
        cts = self.ciphertexts[selector]
        # the known pair only survives if record 0 does
        keep_known = len(cts) > 0 and bytes(cts[0]) == bytes(self.ciphertexts[0])
        return TraceSet(
            self.cipher_id,
            cts,
            self.times[selector],
            self.seed,
            self.model,
            self.known_plaintext if keep_known else None,
        )

    def __eq__(self, other):
        return (
            isinstance(other, TraceSet)
            and self.cipher_id == other.cipher_id
            and self.seed == other.seed
            and np.array_equal(self.ciphertexts, other.ciphertexts)
            and np.array_equal(self.times, other.times)
            and self.known_plaintext == other.known_plaintext
        )

    def __repr__(self):
        return f"TraceSet({self.cipher_id}, {self.count} records, seed={self.seed})"


def victim_batch(cipher_id: str, key: bytes, plaintexts: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    if check_cipher(cipher_id) == CIPHER_AES_CT:
        return aes_ct_batch(key, plaintexts)
    return sm4_cn_batch(key, plaintexts)


def _block_plaintexts(seed: int, block: int, size: int) -> np.ndarray:
    return block_rng(seed, block, PLAINTEXT_STREAM).integers(0, 256, (size, 16), dtype=np.uint8)


def _generate_block(args):
    cipher_id, key, model, seed, block, size = args
    pts = _block_plaintexts(seed, block, size)
    cts, indices = victim_batch(cipher_id, key, pts)
    word_hits, line_hits = batch_conflicts(cipher_id, indices, model.jam_word, model.word_size)
    times = simulate_times(word_hits, line_hits, model, block_rng(seed, block, NOISE_STREAM))
    return pts[0], cts, times


def _blocks(n: int) -> List[Tuple[int, int]]:
    return [(b, min(RNG_BLOCK_SIZE, n - b * RNG_BLOCK_SIZE)) for b in range(math.ceil(n / RNG_BLOCK_SIZE))]


def generate_traceset(
    cipher_id: str,
    n: int,
    key: bytes,
    model: LeakModel,
    seed: int,
    workers: int = 1,
    progress: bool = False,
) -> TraceSet:
    if n < 1:
        raise DomainError(f"trace count `{n}` must be >= 1")
    check_cipher(cipher_id)
    key = check_key(key)
    jobs = [(cipher_id, key, model, seed, b, size) for b, size in _blocks(n)]
    log.info("generating %d %s traces in %d blocks", n, cipher_id, len(jobs))

    if workers > 1:
        with Pool(workers) as pool:
            parts = list(tqdm(pool.imap(_generate_block, jobs), total=len(jobs), disable=not progress))
    else:
        parts = [_generate_block(j) for j in tqdm(jobs, disable=not progress)]

    return TraceSet(
        cipher_id,
        np.concatenate([p[1] for p in parts]),
        np.concatenate([p[2] for p in parts]),
        seed=seed,
        model=model,
        known_plaintext=bytes(parts[0][0]),
    )


def filter_outliers(ts: TraceSet, radius: float = FILTER_RADIUS) -> Tuple[TraceSet, float]:
    """
    Keeps records whose time lies within `radius` cycles of the mean time.
    """
    if ts.count == 0:
        raise DomainError("cannot filter an empty trace set")
    if radius < 0:
        raise DomainError(f"filter radius `{radius}` is negative")
    keep = np.abs(ts.times - ts.times.mean()) <= radius
    log.info("outlier filter kept %d of %d records", int(keep.sum()), ts.count)
    return ts.subset(keep), float(keep.mean())


class ScanResult(NamedTuple):
    candidates: np.ndarray
    means: np.ndarray
    best: int

    @property
    def flat(self) -> bool:
        return bool(np.ptp(self.means) == 0)


def scan_jam_offsets(
    cipher_id: str,
    key: bytes,
    model_template: LeakModel,
    n_per_offset: int,
    seed: int = 0,
    candidates: Optional[Iterable[int]] = None,
    table_word_base: Optional[int] = None,
    progress: bool = False,
) -> ScanResult:
    """
    Jams each candidate word in turn and measures the victim's mean time.
    Without `table_word_base` the candidates are table words [0, 63]. With it,
    candidates are word offsets within a 4 KiB page whose table starts at that
    word; words outside the table cause no conflicts.
    Every candidate replays the same plaintexts and noise, so a channel without
    penalties gives exact ties and the lowest offset wins.
    """
    if n_per_offset < 1:
        raise DomainError(f"traces per offset `{n_per_offset}` must be >= 1")
    words = model_template.words_per_table
    if table_word_base is None:
        cands = np.arange(words) if candidates is None else np.asarray(list(candidates))
        to_table = lambda w: int(check_jam_word(int(w), words))
    else:
        cands = np.arange(WORDS_PER_PAGE) if candidates is None else np.asarray(list(candidates))
        to_table = lambda w: int(w) - table_word_base if 0 <= int(w) - table_word_base < words else None

    blocks = []
    for b, size in _blocks(n_per_offset):
        _, indices = victim_batch(cipher_id, key, _block_plaintexts(seed, b, size))
        blocks.append((b, indices))

    means = np.empty(len(cands), dtype=np.float64)
    for i, w in enumerate(tqdm(cands, disable=not progress)):
        jam = to_table(w)
        model = model_template if jam is None else replace(model_template, jam_word=jam)
        total = 0.0
        for b, indices in blocks:
            word_hits, line_hits = batch_conflicts(cipher_id, indices, jam, model.word_size)
            total += simulate_times(word_hits, line_hits, model, block_rng(seed, b, NOISE_STREAM)).sum()
        means[i] = total / n_per_offset

    # argmax returns the first maximum, i.e. the lowest offset on ties
    best = int(cands[int(np.argmax(means))])
    return ScanResult(cands, means, best)


class LinearityCurve(NamedTuple):
    counts: np.ndarray
    means: np.ndarray
    slope: float
    intercept: float
    r_squared: float


def linearity_curve(
    model: LeakModel, rng: np.random.Generator, reads: int = 64, repeats: int = 100
) -> LinearityCurve:
    """
    Simulates a stub of `reads` table reads where the first k alias the jammed
    word and the rest fall outside the jammed line, for k = 0..reads, and fits
    mean time against k.
    """
    words_per_line = model.words_per_line
    jam_offset = model.jam_word * model.word_size
    # any offset outside the jammed line
    other_offset = ((model.jam_line + 1) % (TABLE_SIZE // LINE_SIZE)) * LINE_SIZE
    if other_offset // LINE_SIZE == model.jam_line:
        raise DomainError("table has a single line, no conflict-free read exists")

    counts = np.arange(reads + 1)
    means = np.empty(reads + 1, dtype=np.float64)
    for k in counts:
        trace = AccessTrace()
        for j in range(reads):
            trace.record(jam_offset if j < k else other_offset, 0, j % words_per_line)
        means[k] = np.mean([simulate_time(trace, model, rng) for _ in range(repeats)])

    return fit_line(counts, means)


def fit_line(counts: np.ndarray, means: np.ndarray) -> LinearityCurve:
    """Least-squares line through mean time against conflicting reads."""
    counts = np.asarray(counts)
    means = np.asarray(means, dtype=np.float64)
    if len(counts) < 2:
        raise DomainError("a line fit needs at least 2 points")
    slope, intercept = np.polyfit(counts, means, 1)
    fitted = slope * counts + intercept
    ss_res = float(np.sum((means - fitted) ** 2))
    ss_tot = float(np.sum((means - means.mean()) ** 2))
    r_squared = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return LinearityCurve(counts, means, float(slope), float(intercept), r_squared)
