import argparse
import csv
import io
import logging
import sys
import traceback
from typing import List, Optional

import rawjam_attack_aes as attack_aes
import rawjam_attack_sm4 as attack_sm4
import rawjam_probe as probe
from rawjam_analysis import RankReport, rank_history
from rawjam_config import (
    CIPHER_AES_CT,
    CIPHER_IDS,
    CIPHER_SM4_CN,
    LINE,
    LOG_DEBUG,
    PROFILE_SGX,
    PROFILE_USER,
)
from rawjam_leakage import (
    TraceSet,
    filter_outliers,
    generate_traceset,
    linearity_curve,
    scan_jam_offsets,
)
from rawjam_runconfig import RunConfig
from rawjam_tracefile import read_traceset, write_csv, write_traceset
from rawjam_util import DomainError, RawJamError, VerificationFailed, atomic_write, block_rng

log = logging.getLogger("rawjam")

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


def model_flags(p: argparse.ArgumentParser):
    p.add_argument("--cipher", choices=sorted(CIPHER_IDS), default=CIPHER_AES_CT)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--key", help="victim key as 32 hex digits (default: derived from the seed)")
    p.add_argument("--profile", choices=[PROFILE_USER, PROFILE_SGX], default=PROFILE_USER)
    p.add_argument("--synthetic", action="store_true", help="noise-free time = jammed-word hit count")
    p.add_argument("--noise-sigma", type=float)
    p.add_argument("--base-cycles", type=float)
    p.add_argument("--line-penalty", type=float)
    p.add_argument("--word-penalty", type=float)
    p.add_argument("--jam-word", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rawjam", description="Read-after-write aliasing timing attacks on table-based ciphers."
    )
    parser.add_argument("--verbose", "-v", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="simulate victim runs and write a trace file")
    model_flags(gen)
    gen.add_argument("--traces", type=int, required=True)
    gen.add_argument("--out", required=True)
    gen.add_argument("--csv", help="also export the traces as csv")
    gen.add_argument("--workers", type=int, default=1)

    for name, cipher in (("attack-aes", CIPHER_AES_CT), ("attack-sm4", CIPHER_SM4_CN)):
        p = sub.add_parser(name, help=f"recover the key from a {cipher} trace file")
        p.add_argument("--in", dest="in_path", required=True)
        p.add_argument("--out", help="rank report csv")
        p.add_argument("--key", help="true key, to report ranks")
        p.add_argument("--jam-word", type=int)
        p.add_argument("--filter-radius", type=float)
        p.add_argument("--checkpoints", help="comma separated trace counts")
        p.add_argument("--history", help="rank history csv")
        if cipher == CIPHER_AES_CT:
            p.add_argument("--enumerate", type=int, metavar="BUDGET", help="search keys using the known pair")
        else:
            p.add_argument("--beam", type=int)
            p.add_argument("--traces-per-round", type=int)

    hist = sub.add_parser("rank-history", help="true-key rank against observation count")
    hist.add_argument("--in", dest="in_path", required=True)
    hist.add_argument("--key", required=True)
    hist.add_argument("--checkpoints", required=True)
    hist.add_argument("--out", required=True)
    hist.add_argument("--jam-word", type=int)
    hist.add_argument("--filter-radius", type=float)

    scan = sub.add_parser("scan", help="mean victim time for every jammed word")
    model_flags(scan)
    scan.add_argument("--traces", type=int, required=True, help="victim runs per candidate word")
    scan.add_argument("--page-scan", action="store_true", help="scan all words of a 4 KiB page")
    scan.add_argument("--table-base", type=int, default=0, help="table start word for --page-scan")
    scan.add_argument("--out", help="per-offset csv")

    lin = sub.add_parser("linearity", help="simulated time against conflicting reads")
    model_flags(lin)
    lin.add_argument("--reps", type=int, default=100)
    lin.add_argument("--out", help="curve csv")

    probe_cmd = sub.add_parser("probe", help="run the hardware probes on sibling hyper-threads")
    probe_cmd.add_argument("--mode", choices=["RaR", "WaR", "RaW", "RawW", "ReadLatencyCurve"], default="RaW")
    probe_cmd.add_argument(
        "--offset-class", choices=["different-line", "same-line-different-word", "same-word"], default="same-word"
    )
    probe_cmd.add_argument("--iterations", type=int)
    probe_cmd.add_argument("--reps", type=int)
    probe_cmd.add_argument("--cpus", help="sibling pair, e.g. 0,4 (default: first pair in sysfs)")
    probe_cmd.add_argument("--seed", type=int, default=0)
    probe_cmd.add_argument("--out", help="histogram or curve csv")
    return parser


def setup_logging(verbose: bool):
    level = logging.DEBUG if LOG_DEBUG else logging.INFO if verbose else logging.WARNING
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def load_traces(cfg: RunConfig, cipher: Optional[str] = None) -> TraceSet:
    ts = read_traceset(cfg.in_path)
    if cipher is not None and ts.cipher_id != cipher:
        raise DomainError(f"`{cfg.in_path}` holds `{ts.cipher_id}` traces, expected `{cipher}`")
    if cfg.filter_radius is not None:
        ts, kept = filter_outliers(ts, cfg.filter_radius)
        print(f"outlier filter kept {kept:.3f} of the records")
    return ts


def cmd_gen(cfg: RunConfig):
    ts = generate_traceset(cfg.cipher, cfg.traces, cfg.master_key, cfg.model, cfg.seed, cfg.workers, cfg.verbose)
    write_traceset(ts, cfg.out_path)
    if cfg.csv_path is not None:
        write_csv(ts, cfg.csv_path)
    print(LINE)
    print(f"cipher: {ts.cipher_id}")
    print(f"records: {ts.count}")
    print(f"key: {cfg.master_key.hex()}")
    print(f"time mean: {ts.times.mean():.3f} cycles")
    print(f"time std: {ts.times.std():.3f} cycles")
    print(f"written: {cfg.out_path}")
    print(LINE)


def print_report(report: RankReport):
    print(LINE)
    for br in report.rankings:
        print(br)
    print(LINE)


def cmd_attack_aes(cfg: RunConfig):
    ts = load_traces(cfg, CIPHER_AES_CT)
    acfg = attack_aes.AesAttackConfig(cfg.jam_word, cfg.checkpoints)
    report = attack_aes.attack(ts, acfg, cfg.key, cfg.verbose)
    print_report(report)
    print(f"round 10 key: {attack_aes.recovered_round_key(report).hex()}")
    print(f"master key: {attack_aes.recovered_master_key(report).hex()}")
    if cfg.key is not None:
        print(f"bytes at rank 1: {report.recovered_count()}/16")
        print(f"key rank: {report.key_rank_bits():.1f} bits")
    budget = cfg.extra.get("enumerate")
    if budget:
        found = attack_aes.search_master_key(ts, report, budget)
        print(f"enumerated key: {'not found' if found is None else found.hex()}")
    print(LINE)
    if cfg.out_path is not None:
        atomic_write(cfg.out_path, report.to_csv())
    if cfg.history_path is not None:
        atomic_write(cfg.history_path, report.history_csv())


def sm4_first_round_attack(cfg: RunConfig, count: int):
    """Round 32 alone: the 4 six-bit byte rankings a history can follow."""
    scfg = attack_sm4.Sm4AttackConfig(jam_word=cfg.jam_word, traces_per_round=count)
    true_keys = None if cfg.key is None else attack_sm4.sm4_key_schedule(cfg.key)

    def attack_fn(t: TraceSet) -> RankReport:
        outcome = attack_sm4.attack_round(t, attack_sm4.Sm4RoundState(), 32, scfg, true_keys)[0]
        return RankReport(outcome.six_bit, t.count)

    return attack_fn


def cmd_attack_sm4(cfg: RunConfig):
    ts = load_traces(cfg, CIPHER_SM4_CN)
    kwargs = {"jam_word": cfg.jam_word}
    if cfg.extra["beam"] is not None:
        kwargs["beam_width"] = cfg.extra["beam"]
    if cfg.extra["traces_per_round"] is not None:
        kwargs["traces_per_round"] = cfg.extra["traces_per_round"]
    scfg = attack_sm4.Sm4AttackConfig(**kwargs)
    result = attack_sm4.recover(ts, scfg, cfg.key, cfg.verbose)
    print(result)
    if cfg.out_path is not None:
        atomic_write(cfg.out_path, result.report.to_csv())
    if cfg.history_path is not None:
        history = rank_history(ts, sm4_first_round_attack(cfg, ts.count), cfg.checkpoints or (ts.count,))
        atomic_write(cfg.history_path, history.history_csv())
    if not result.verified:
        raise VerificationFailed("recovered SM4 key failed verification", result.diagnostics)


def cmd_rank_history(cfg: RunConfig):
    ts = load_traces(cfg)
    if ts.cipher_id == CIPHER_AES_CT:
        acfg = attack_aes.AesAttackConfig(cfg.jam_word)
        attack_fn = lambda t: attack_aes.attack(t, acfg, cfg.key)
    else:
        attack_fn = sm4_first_round_attack(cfg, ts.count)

    report = rank_history(ts, attack_fn, cfg.checkpoints)
    atomic_write(cfg.out_path, report.history_csv())
    print(LINE)
    for obs, ranks in report.history:
        print(f"{obs:>10d}: {' '.join(str(r) for r in ranks)}")
    print(LINE)


def cmd_scan(cfg: RunConfig):
    base = cfg.extra["table_base"] if cfg.extra["page_scan"] else None
    result = scan_jam_offsets(
        cfg.cipher, cfg.master_key, cfg.model, cfg.traces, cfg.seed, table_word_base=base, progress=cfg.verbose
    )
    if result.flat:
        log.warning("flat timing profile: no jammed word slows the victim")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["word_offset", "mean_cycles"])
    for w, m in zip(result.candidates, result.means):
        writer.writerow([int(w), f"{m:.17g}"])
    if cfg.out_path is not None:
        atomic_write(cfg.out_path, buf.getvalue())
    print(LINE)
    print(f"candidates: {len(result.candidates)}")
    print(f"slowest word: {result.best}")
    print(f"mean time range: {result.means.min():.3f} .. {result.means.max():.3f} cycles")
    print(LINE)


def cmd_linearity(cfg: RunConfig):
    curve = linearity_curve(cfg.model, block_rng(cfg.seed, 0), repeats=cfg.extra["reps"])
    print(LINE)
    print(f"slope: {curve.slope:.4f} cycles per conflicting read")
    print(f"intercept: {curve.intercept:.4f} cycles")
    print(f"r squared: {curve.r_squared:.6f}")
    print(LINE)
    if cfg.out_path is not None:
        probe.write_curve(curve, cfg.out_path)


def cmd_probe(cfg: RunConfig):
    kwargs = {"mode": cfg.extra["mode"], "offset_class": cfg.extra["offset_class"], "cpus": cfg.extra["cpus"], "seed": cfg.seed}
    if cfg.extra["iterations"] is not None:
        kwargs["iterations"] = cfg.extra["iterations"]
    pcfg = probe.ProbeConfig(**kwargs)
    print(LINE)
    if pcfg.mode == probe.MODE_CURVE:
        reps = cfg.extra["reps"] or probe.LATENCY_REPS
        curve = probe.read_latency_curve(pcfg, reps)
        print(f"0 conflicting reads: {curve.means[0]:.1f} cycles")
        print(f"slope: {curve.slope:.3f} cycles per conflicting read (r squared {curve.r_squared:.4f})")
        if cfg.out_path is not None:
            probe.write_curve(curve, cfg.out_path)
    else:
        hist = probe.run_probe(pcfg)
        print(f"{pcfg.mode} {pcfg.offset_class}: {hist}")
        if cfg.out_path is not None:
            probe.write_histogram(hist, cfg.out_path)
    print(LINE)


COMMANDS = {
    "gen": cmd_gen,
    "attack-aes": cmd_attack_aes,
    "attack-sm4": cmd_attack_sm4,
    "rank-history": cmd_rank_history,
    "scan": cmd_scan,
    "linearity": cmd_linearity,
    "probe": cmd_probe,
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    setup_logging(ns.verbose)

    try:
        cfg = RunConfig.from_namespace(ns)
    except DomainError as e:
        parser.print_usage(sys.stderr)
        print(f"rawjam: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as e:
        print(f"{ns.command} encountered problem!!!")
        print(e)
        return EXIT_RUNTIME

    try:
        COMMANDS[cfg.command](cfg)
    except VerificationFailed as e:
        print(f"{cfg.command} failed verification!!!")
        for line in e.diagnostics:
            print(f"  {line}")
        return EXIT_RUNTIME
    except (RawJamError, OSError) as e:
        print(f"{cfg.command} encountered problem!!!")
        print(e)
        return EXIT_RUNTIME
    except Exception as e:
        print(f"{cfg.command} encountered problem!!!")
        print(traceback.format_exc())
        print(e)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
