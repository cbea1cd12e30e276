"""
Machine-dependent probe harness: two threads on sibling hyper-threads of one
core, one running a conflicting access loop on a fixed page offset while the
other times page-stride reads or writes at the same, a nearby, or a distant
offset. Needs Linux on x86-64 and a C compiler driver to assemble the loops.

Pin the core frequency and keep other work off the chosen core before trusting
the numbers; nothing here enforces that.
"""
import csv
import ctypes
import io
import logging
import os
import platform
import shutil
import subprocess
import sys
import tempfile
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from rawjam_config import (
    HISTOGRAM_BUCKET,
    LATENCY_REPS,
    LATENCY_STUB_READS,
    LINE_SIZE,
    OFFSET_CLASSES,
    PAGE_SIZE,
    PROBE_BATCH,
    PROBE_ITERATIONS,
)
from rawjam_leakage import LeakModel, LinearityCurve, fit_line
from rawjam_probe_asm import probe_module, render
from rawjam_util import DomainError, ProbeUnavailable, atomic_write

log = logging.getLogger(__name__)

MODE_RAR = "RaR"
MODE_WAR = "WaR"
MODE_RAW = "RaW"
MODE_RAWW = "RawW"
MODE_CURVE = "ReadLatencyCurve"
MODES = (MODE_RAR, MODE_WAR, MODE_RAW, MODE_RAWW, MODE_CURVE)

# conflicting loop run by thread A, probe run by thread B
MODE_LOOPS = {
    MODE_RAR: ("rj_conflict_reader", "rj_probe_reads"),
    MODE_WAR: ("rj_conflict_reader", "rj_probe_writes"),
    MODE_RAW: ("rj_conflict_writer", "rj_probe_reads"),
    MODE_RAWW: ("rj_weak_writer", "rj_probe_reads"),
    MODE_CURVE: ("rj_conflict_writer", None),
}

SYSFS_CPU = Path("/sys/devices/system/cpu")


@dataclass(frozen=True)
class ProbeConfig:
    mode: str = MODE_RAW
    offset_class: str = "same-word"
    iterations: int = PROBE_ITERATIONS
    cpus: Optional[Tuple[int, int]] = None
    buffer_pages: int = PROBE_BATCH + 1
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise DomainError(f"unknown probe mode `{self.mode}`, expected one of {list(MODES)}")
        if self.offset_class not in OFFSET_CLASSES:
            raise DomainError(f"unknown offset class `{self.offset_class}`, expected one of {list(OFFSET_CLASSES)}")
        if self.iterations < 0:
            raise DomainError(f"iterations `{self.iterations}` is negative")
        if self.buffer_pages < PROBE_BATCH:
            raise DomainError(f"probe buffer needs at least {PROBE_BATCH} pages, got `{self.buffer_pages}`")
        if self.cpus is not None and self.cpus[0] == self.cpus[1]:
            raise DomainError(f"cpu pair `{self.cpus}` names one processor twice")

    @property
    def target_offset(self) -> int:
        return OFFSET_CLASSES[self.offset_class]


class LatencyHistogram:
    """
    Cycle counts of probe batches, bucketed by `bucket` cycles.
    Summaries are computed from the buckets alone.
    """

    def __init__(self, buckets: Dict[int, int], bucket: int = HISTOGRAM_BUCKET):
        self.buckets = dict(sorted(buckets.items()))
        self.bucket = bucket

    @staticmethod
    def from_samples(samples: np.ndarray, bucket: int = HISTOGRAM_BUCKET) -> "LatencyHistogram":
        if bucket < 1:
            raise DomainError(f"bucket width `{bucket}` must be >= 1")
        samples = np.asarray(samples, dtype=np.int64)
        starts, counts = np.unique((samples // bucket) * bucket, return_counts=True)
        return LatencyHistogram({int(s): int(c) for s, c in zip(starts, counts)}, bucket)

    @property
    def total(self) -> int:
        return sum(self.buckets.values())

    def _expanded(self) -> Tuple[np.ndarray, np.ndarray]:
        return np.array(list(self.buckets), dtype=np.float64), np.array(list(self.buckets.values()), dtype=np.float64)

    @property
    def median(self) -> float:
        if not self.buckets:
            return float("nan")
        values, counts = self._expanded()
        cum = np.cumsum(counts)
        return float(values[np.searchsorted(cum, cum[-1] / 2.0)])

    @property
    def mean(self) -> float:
        if not self.buckets:
            return float("nan")
        values, counts = self._expanded()
        return float(np.average(values, weights=counts))

    @property
    def std(self) -> float:
        if not self.buckets:
            return float("nan")
        values, counts = self._expanded()
        return float(np.sqrt(np.average((values - self.mean) ** 2, weights=counts)))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["bucket_cycles", "count"])
        for start, count in self.buckets.items():
            writer.writerow([start, count])
        return buf.getvalue()

    def __repr__(self):
        return f"LatencyHistogram({self.total} samples, median {self.median:.1f}, std {self.std:.1f})"


def curve_to_csv(curve: LinearityCurve) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["conflicting_reads", "mean_cycles"])
    for k, m in zip(curve.counts, curve.means):
        writer.writerow([int(k), f"{m:.17g}"])
    return buf.getvalue()


def parse_cpu_list(text: str) -> List[int]:
    """
    Parses the kernel's cpu list format, e.g. `0,4` or `0-1`.
    """
    cpus = []
    for part in text.strip().split(","):
        if not part:
            continue
        if "-" in part:
            lo, hi = part.split("-")
            cpus.extend(range(int(lo), int(hi) + 1))
        else:
            cpus.append(int(part))
    return cpus


def sibling_pairs(root: Path = SYSFS_CPU) -> List[Tuple[int, int]]:
    """
    Pairs of logical processors sharing one physical core, lowest first.
    """
    pairs = set()
    for topo in sorted(Path(root).glob("cpu[0-9]*/topology/thread_siblings_list")):
        siblings = parse_cpu_list(topo.read_text())
        if len(siblings) >= 2:
            pairs.add((siblings[0], siblings[1]))
    return sorted(pairs)


def check_platform():
    if not sys.platform.startswith("linux"):
        raise ProbeUnavailable(f"probes need Linux, running on `{sys.platform}`")
    if platform.machine() not in ("x86_64", "AMD64"):
        raise ProbeUnavailable(f"probes need x86-64, running on `{platform.machine()}`")
    if shutil.which("cc") is None:
        raise ProbeUnavailable("no `cc` on PATH to assemble the probe loops")


class _PageBuffer:
    """Page-aligned scratch memory backed by a numpy array."""

    def __init__(self, pages: int):
        self.raw = np.zeros((pages + 1) * PAGE_SIZE, dtype=np.uint8)
        addr = self.raw.ctypes.data
        self.base = addr + (-addr) % PAGE_SIZE

    def at(self, offset: int) -> int:
        return self.base + offset


class ProbeSession:
    """
    Assembles the probe loops into a shared object and loads it.
    """

    def __init__(self, seed: int = 0):
        check_platform()
        self._tmp = tempfile.TemporaryDirectory(prefix="rawjam-probe-")
        asm = Path(self._tmp.name) / "probe.s"
        lib = Path(self._tmp.name) / "probe.so"
        asm.write_text(render(probe_module(seed)))
        built = subprocess.run(["cc", "-shared", "-o", str(lib), str(asm)], capture_output=True, text=True)
        if built.returncode != 0:
            raise ProbeUnavailable(f"assembling probe loops failed: {built.stderr.strip()}")
        self.lib = ctypes.CDLL(str(lib))

        u64p = ctypes.POINTER(ctypes.c_uint64)
        for name in ("rj_probe_reads", "rj_probe_writes"):
            fn = getattr(self.lib, name)
            fn.argtypes = [ctypes.c_void_p, ctypes.c_uint64, u64p]
            fn.restype = None
        for name in ("rj_conflict_writer", "rj_weak_writer", "rj_conflict_reader"):
            fn = getattr(self.lib, name)
            fn.argtypes = [ctypes.c_void_p, ctypes.c_void_p]
            fn.restype = ctypes.c_uint64
        self.lib.rj_latency_stub.argtypes = [u64p, ctypes.c_uint64, u64p]
        self.lib.rj_latency_stub.restype = None

    def close(self):
        self._tmp.cleanup()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class _ConflictThread(threading.Thread):
    """
    Runs one conflicting loop pinned to `cpu` until stopped. ctypes drops the
    GIL for the duration of the foreign call.
    """

    def __init__(self, loop, target: int, cpu: int):
        super().__init__(daemon=True)
        self.loop = loop
        self.target = target
        self.cpu = cpu
        self.flag = (ctypes.c_uint8 * LINE_SIZE)()
        self.rounds = 0
        self.started_loop = threading.Event()

    def run(self):
        os.sched_setaffinity(0, {self.cpu})
        self.started_loop.set()
        self.rounds = self.loop(ctypes.c_void_p(self.target), ctypes.cast(self.flag, ctypes.c_void_p))

    def stop(self):
        self.flag[0] = 1
        self.join()


def _pin(cpu: int) -> set:
    old = os.sched_getaffinity(0)
    os.sched_setaffinity(0, {cpu})
    return old


def _pick_cpus(cfg: ProbeConfig) -> Tuple[int, int]:
    if cfg.cpus is not None:
        return cfg.cpus
    pairs = sibling_pairs()
    if not pairs:
        raise ProbeUnavailable("no physical core with two logical processors found")
    return pairs[0]


def _stamps_to_samples(stamps: np.ndarray) -> np.ndarray:
    return np.diff(stamps.astype(np.int64))


def probe_reads(session: ProbeSession, buffer: int, count: int) -> np.ndarray:
    """Per-batch cycle counts of `count` batches of page-stride reads."""
    return _run_probe(session.lib.rj_probe_reads, buffer, count)


def probe_writes(session: ProbeSession, buffer: int, count: int) -> np.ndarray:
    return _run_probe(session.lib.rj_probe_writes, buffer, count)


def _run_probe(fn, buffer: int, count: int) -> np.ndarray:
    if count < 0:
        raise DomainError(f"probe count `{count}` is negative")
    stamps = np.zeros(count + 1, dtype=np.uint64)
    fn(ctypes.c_void_p(buffer), count, stamps.ctypes.data_as(ctypes.POINTER(ctypes.c_uint64)))
    return _stamps_to_samples(stamps)


def conflict_writer(session: ProbeSession, target: int, cpu: int, loop: str = "rj_conflict_writer") -> _ConflictThread:
    """
    Starts the conflicting loop on `cpu`; call `stop()` on the result to
    cancel it and read back how many unrolled rounds it completed.
    """
    thread = _ConflictThread(getattr(session.lib, loop), target, cpu)
    thread.start()
    thread.started_loop.wait()
    return thread


def run_probe(cfg: ProbeConfig, session: Optional[ProbeSession] = None) -> LatencyHistogram:
    """
    Thread A runs the mode's conflicting loop on its own page at the
    configured offset class; thread B times page-stride accesses at offset 0
    of its buffer.
    """
    if cfg.mode == MODE_CURVE:
        raise DomainError("use read_latency_curve for the latency curve mode")
    cpu_a, cpu_b = _pick_cpus(cfg)
    own = session is None
    session = session or ProbeSession(cfg.seed)
    try:
        loop_a, loop_b = MODE_LOOPS[cfg.mode]
        target = _PageBuffer(1)
        probe = _PageBuffer(cfg.buffer_pages)
        old = _pin(cpu_b)
        writer = conflict_writer(session, target.at(cfg.target_offset), cpu_a, loop_a)
        try:
            samples = _run_probe(getattr(session.lib, loop_b), probe.at(0), cfg.iterations)
        finally:
            writer.stop()
            os.sched_setaffinity(0, old)
        log.info("%s %s: writer rounds %d", cfg.mode, cfg.offset_class, writer.rounds)
        return LatencyHistogram.from_samples(samples)
    finally:
        if own:
            session.close()


def read_latency(session: ProbeSession, addresses: np.ndarray, reps: int) -> float:
    addrs = np.ascontiguousarray(addresses, dtype=np.uint64)
    if len(addrs) != LATENCY_STUB_READS:
        raise DomainError(f"latency stub takes {LATENCY_STUB_READS} addresses, got `{len(addrs)}`")
    out = np.zeros(reps, dtype=np.uint64)
    u64p = ctypes.POINTER(ctypes.c_uint64)
    session.lib.rj_latency_stub(addrs.ctypes.data_as(u64p), reps, out.ctypes.data_as(u64p))
    return float(out.astype(np.float64).mean())


def read_latency_curve(cfg: ProbeConfig, reps: int = LATENCY_REPS, session: Optional[ProbeSession] = None) -> LinearityCurve:
    """
    Mean cycles of the 64-read stub while the sibling writes to one word, for
    0..64 reads aliasing that word. Non-aliasing reads go to other lines.
    """
    if reps < 1:
        raise DomainError(f"repetitions `{reps}` must be >= 1")
    cpu_a, cpu_b = _pick_cpus(cfg)
    own = session is None
    session = session or ProbeSession(cfg.seed)
    try:
        target = _PageBuffer(1)
        reads = _PageBuffer(LATENCY_STUB_READS)
        aliasing = [reads.at(j * PAGE_SIZE) for j in range(LATENCY_STUB_READS)]
        # same page offsets, shifted past the writer's line
        distant = [a + OFFSET_CLASSES["different-line"] for a in aliasing]

        old = _pin(cpu_b)
        writer = conflict_writer(session, target.at(0), cpu_a)
        try:
            means = []
            for k in range(LATENCY_STUB_READS + 1):
                means.append(read_latency(session, np.array(aliasing[:k] + distant[k:]), reps))
                log.debug("%d conflicting reads: %.1f cycles", k, means[-1])
        finally:
            writer.stop()
            os.sched_setaffinity(0, old)
        return fit_line(np.arange(LATENCY_STUB_READS + 1), np.array(means))
    finally:
        if own:
            session.close()


def calibrate_model(curve: LinearityCurve, same_line: LatencyHistogram, different_line: LatencyHistogram, base: LeakModel) -> LeakModel:
    """
    Word penalty from the slope of the latency curve, line penalty from the
    RaW median gap between a same-line and a different-line target. The gap
    is per batch, so it is spread over the batch's reads.
    """
    word_penalty = max(0.0, curve.slope)
    line_penalty = max(0.0, (same_line.median - different_line.median) / PROBE_BATCH)
    log.info("calibrated penalties: word %.2f, line %.2f", word_penalty, line_penalty)
    return base.with_overrides(word_penalty=word_penalty, line_penalty=line_penalty)


def write_histogram(hist: LatencyHistogram, path):
    atomic_write(path, hist.to_csv())


def write_curve(curve: LinearityCurve, path):
    atomic_write(path, curve_to_csv(curve))
