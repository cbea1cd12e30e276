import csv
import io
import logging
import math
from typing import Callable, Iterator, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from rawjam_config import ENUMERATION_BUDGET, LINE
from rawjam_leakage import TraceSet
from rawjam_util import DomainError

log = logging.getLogger(__name__)


class Correlation(NamedTuple):
    r: float
    degenerate: bool


def pearson(x: Sequence[float], y: Sequence[float]) -> Correlation:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise DomainError(f"pearson needs two vectors of equal length, got `{x.shape}` and `{y.shape}`")
    if len(x) < 2:
        raise DomainError(f"pearson needs at least 2 samples, got `{len(x)}`")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        return Correlation(0.0, True)
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return Correlation(min(1.0, max(-1.0, r)), False)


class HypothesisMatrix:
    """
    Predicted access counts, one row per trace and one column per key
    candidate. When every row is a function of one small per-trace value (a
    ciphertext byte, an S-box input byte) the matrix is kept in grouped form:
    row t is `table[keys[t]]`, and nothing of size traces x candidates is
    ever materialized.
    """

    def __init__(self, rows: Optional[np.ndarray] = None, table: Optional[np.ndarray] = None, keys: Optional[np.ndarray] = None):
        if (rows is None) == (table is None):
            raise Exception("hypothesis matrix needs either dense rows or a table with keys")
        self.rows = None if rows is None else np.asarray(rows)
        self.table = None if table is None else np.asarray(table)
        self.keys = None if keys is None else np.asarray(keys, dtype=np.int64)
        if self.table is not None and self.keys is None:
            raise Exception("grouped hypothesis matrix without keys")

    @staticmethod
    def grouped(table: np.ndarray, keys: np.ndarray) -> "HypothesisMatrix":
        return HypothesisMatrix(table=table, keys=keys)

    @property
    def shape(self) -> Tuple[int, int]:
        if self.rows is not None:
            return self.rows.shape
        return (len(self.keys), self.table.shape[1])

    def dense(self) -> np.ndarray:
        if self.rows is not None:
            return self.rows
        return self.table[self.keys]

    def chunks(self, size: int):
        n = self.shape[0]
        for start in range(0, n, size):
            stop = min(n, start + size)
            if self.rows is not None:
                yield start, self.rows[start:stop]
            else:
                yield start, self.table[self.keys[start:stop]]


class CorrelationAccumulator:
    """
    Single-pass Pearson accumulators for many candidate columns against one
    leakage vector: sums, sums of squares and cross sums. Memory is
    O(candidates). Leakage values are shifted by the first sample seen to keep
    the sums well conditioned.
    """

    def __init__(self, m: int):
        self.m = m
        self.n = 0
        self.shift: Optional[float] = None
        self.sum_a = np.zeros(m)
        self.sum_aa = np.zeros(m)
        self.sum_al = np.zeros(m)
        self.sum_l = 0.0
        self.sum_ll = 0.0

    def _shifted(self, leak: np.ndarray) -> np.ndarray:
        leak = np.asarray(leak, dtype=np.float64)
        if self.shift is None and len(leak):
            self.shift = float(leak[0])
        return leak - (self.shift or 0.0)

    def _add_leak(self, l: np.ndarray):
        self.n += len(l)
        self.sum_l += float(l.sum())
        self.sum_ll += float(l @ l)

    def update(self, a: np.ndarray, leak: np.ndarray):
        l = self._shifted(leak)
        a = np.asarray(a, dtype=np.float64)
        self.sum_a += a.sum(axis=0)
        self.sum_aa += (a * a).sum(axis=0)
        self.sum_al += l @ a
        self._add_leak(l)

    def update_grouped(self, table: np.ndarray, keys: np.ndarray, leak: np.ndarray):
        l = self._shifted(leak)
        g = table.shape[0]
        counts = np.bincount(keys, minlength=g).astype(np.float64)
        lsum = np.bincount(keys, weights=l, minlength=g)
        t = table.astype(np.float64)
        self.sum_a += counts @ t
        self.sum_aa += counts @ (t * t)
        self.sum_al += lsum @ t
        self._add_leak(l)

    def result(self) -> Tuple[np.ndarray, np.ndarray]:
        """Returns (r per column, degenerate mask); degenerate columns read 0."""
        n = self.n
        if n < 2:
            raise DomainError(f"correlation needs at least 2 traces, got `{n}`")
        var_a = self.sum_aa - self.sum_a * self.sum_a / n
        var_l = self.sum_ll - self.sum_l * self.sum_l / n
        cov = self.sum_al - self.sum_a * self.sum_l / n
        degenerate = (var_a <= 1e-9) | (var_l <= 0.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            r = cov / np.sqrt(var_a * var_l)
        r = np.where(degenerate, 0.0, np.clip(r, -1.0, 1.0))
        return r, degenerate


def correlate_candidates(A: HypothesisMatrix, L: np.ndarray, chunk: int = 1 << 16) -> Tuple[np.ndarray, np.ndarray]:
    L = np.asarray(L, dtype=np.float64)
    n, m = A.shape
    if len(L) != n:
        raise DomainError(f"hypothesis has `{n}` rows but leakage has `{len(L)}` values")
    acc = CorrelationAccumulator(m)
    if A.table is not None:
        acc.update_grouped(A.table, A.keys, L)
    else:
        for start, rows in A.chunks(chunk):
            acc.update(rows, L[start : start + len(rows)])
    return acc.result()


class ByteRanking:
    """
    Candidates of one key byte sorted by correlation (descending), ties broken
    by the smaller candidate, degenerate candidates last.
    """

    def __init__(
        self,
        position: int,
        values: np.ndarray,
        degenerate: Optional[np.ndarray] = None,
        true_candidate: Optional[int] = None,
    ):
        self.position = position
        self.values = np.asarray(values, dtype=np.float64)
        m = len(self.values)
        if m == 0:
            raise DomainError("cannot rank an empty candidate space")
        self.degenerate = np.zeros(m, dtype=bool) if degenerate is None else np.asarray(degenerate, dtype=bool)
        cands = np.arange(m)
        self.order = np.lexsort((cands, -self.values, self.degenerate))
        self.ranks = np.empty(m, dtype=np.int64)
        self.ranks[self.order] = np.arange(1, m + 1)
        self.true_candidate = true_candidate
        self.true_rank = None if true_candidate is None else int(self.ranks[true_candidate])

    @property
    def best(self) -> int:
        return int(self.order[0])

    @property
    def margin(self) -> float:
        """Gap between the best and the runner-up correlation."""
        if len(self.order) < 2:
            return float("inf")
        return float(self.values[self.order[0]] - self.values[self.order[1]])

    def __repr__(self):
        true = "" if self.true_rank is None else f", true rank {self.true_rank}"
        return f"byte {self.position:2d}: best {self.best:#04x} r={self.values[self.best]:.5f}{true}"


def rank_candidates(
    values: np.ndarray,
    true_candidate: Optional[int] = None,
    degenerate: Optional[np.ndarray] = None,
    position: int = 0,
) -> ByteRanking:
    return ByteRanking(position, values, degenerate, true_candidate)


class RankReport:
    """
    Per-byte rankings of one attack, plus optional rank history sampled at
    observation-count checkpoints.
    """

    def __init__(self, rankings: List[ByteRanking], observations: int = 0):
        self.rankings = rankings
        self.observations = observations
        self.history: List[Tuple[int, List[Optional[int]]]] = []

    def __len__(self):
        return len(self.rankings)

    def __getitem__(self, i) -> ByteRanking:
        return self.rankings[i]

    def best(self) -> List[int]:
        return [r.best for r in self.rankings]

    def ranks(self) -> List[Optional[int]]:
        return [r.true_rank for r in self.rankings]

    def recovered_count(self) -> int:
        return sum(1 for r in self.ranks() if r == 1)

    def key_rank_bits(self) -> float:
        return key_rank_bits(self.ranks())

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["byte_index", "candidate", "correlation", "rank"])
        for br in self.rankings:
            for cand in br.order:
                writer.writerow([br.position, int(cand), f"{br.values[cand]:.17g}", int(br.ranks[cand])])
        return buf.getvalue()

    def history_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["observations", "byte_index", "rank"])
        for obs, ranks in self.history:
            for br, rank in zip(self.rankings, ranks):
                writer.writerow([obs, br.position, "" if rank is None else rank])
        return buf.getvalue()

    def __repr__(self):
        return "\n".join([LINE, f"observations: {self.observations}", *map(repr, self.rankings), LINE])


def key_rank_bits(ranks: Sequence[Optional[int]]) -> float:
    known = [r for r in ranks if r is not None]
    if len(known) != len(ranks):
        raise DomainError("key rank needs the true candidate of every byte")
    return float(sum(math.log2(r) for r in known))


def rank_history(
    ts: TraceSet, attack_fn: Callable[[TraceSet], RankReport], checkpoints: Sequence[int]
) -> RankReport:
    """
    Runs `attack_fn` on growing prefixes of `ts` and records the true ranks at
    each checkpoint. The returned report is the run on the last checkpoint.
    """
    checkpoints = list(checkpoints)
    if not checkpoints:
        raise DomainError("rank history needs at least one checkpoint")
    if any(b <= a for a, b in zip(checkpoints, checkpoints[1:])):
        raise DomainError(f"checkpoints `{checkpoints}` are not strictly ascending")
    if checkpoints[0] < 2 or checkpoints[-1] > ts.count:
        raise DomainError(f"checkpoints `{checkpoints}` outside [2, {ts.count}]")

    history = []
    report = None
    for cp in checkpoints:
        report = attack_fn(ts if cp == ts.count else ts.prefix(cp))
        history.append((cp, report.ranks()))
        log.info("checkpoint %d: %d bytes at rank 1", cp, report.recovered_count())
    report.history = history
    return report


def _spread(total: int, caps: Sequence[int], room: Sequence[int], i: int = 0) -> Iterator[Tuple[int, ...]]:
    """Rank positions of bytes i.. that sum to `total`, in lexicographic order."""
    if i == len(caps) - 1:
        yield (total,)
        return
    for p in range(max(0, total - room[i + 1]), min(total, caps[i]) + 1):
        for rest in _spread(total - p, caps, room, i + 1):
            yield (p,) + rest


def iter_key_candidates(report: RankReport) -> Iterator[List[int]]:
    """
    Walks the product of per-byte candidate lists in order of summed rank,
    best combination first. Ties come in lexicographic order of the ranks.
    Memory stays linear in the number of bytes however far the walk goes.
    """
    orders = [br.order for br in report.rankings]
    if not orders:
        yield []
        return
    caps = [len(o) - 1 for o in orders]
    room = [sum(caps[i:]) for i in range(len(caps))]
    for total in range(room[0] + 1):
        for pos in _spread(total, caps, room):
            yield [int(orders[i][p]) for i, p in enumerate(pos)]


def enumerate_keys(
    report: RankReport, verify: Callable[[List[int]], bool], budget: int = ENUMERATION_BUDGET
) -> Optional[List[int]]:
    """
    Naive key enumeration: returns the first candidate accepted by `verify`,
    or None once `budget` candidates were tried.
    """
    if budget < 1:
        raise DomainError(f"enumeration budget `{budget}` must be >= 1")
    for tried, key in enumerate(iter_key_candidates(report), start=1):
        if verify(key):
            log.info("key found after %d candidates", tried)
            return key
        if tried >= budget:
            break
    return None
