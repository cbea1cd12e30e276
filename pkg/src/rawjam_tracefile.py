import csv
import io
import struct
from pathlib import Path
from typing import Union

import numpy as np

from rawjam_config import CIPHER_IDS, TRACE_MAGIC
from rawjam_leakage import TraceSet
from rawjam_util import TraceFormatError, atomic_write

# magic, cipher id, flags, record count, seed
HEADER = struct.Struct("<4sBBQQ")
RECORD = np.dtype([("ciphertext", "u1", (16,)), ("time", "<f8")])

FLAG_KNOWN_PLAINTEXT = 0x01

CIPHER_NAMES = {v: k for k, v in CIPHER_IDS.items()}
CSV_HEADER = ["ciphertext_hex", "time_cycles"]


def encode_traceset(ts: TraceSet) -> bytes:
    flags = FLAG_KNOWN_PLAINTEXT if ts.known_plaintext is not None else 0
    records = np.empty(ts.count, dtype=RECORD)
    records["ciphertext"] = ts.ciphertexts
    records["time"] = ts.times
    out = HEADER.pack(TRACE_MAGIC, CIPHER_IDS[ts.cipher_id], flags, ts.count, ts.seed & (2**64 - 1))
    out += records.tobytes()
    if flags & FLAG_KNOWN_PLAINTEXT:
        out += ts.known_plaintext
    return out


def decode_traceset(data: bytes) -> TraceSet:
    if len(data) < HEADER.size:
        raise TraceFormatError(f"trace file truncated: `{len(data)}` bytes is shorter than the header")
    magic, cipher, flags, count, seed = HEADER.unpack_from(data)
    if magic != TRACE_MAGIC:
        raise TraceFormatError(f"bad magic `{magic!r}`, expected `{TRACE_MAGIC!r}`")
    if cipher not in CIPHER_NAMES:
        raise TraceFormatError(f"unknown cipher id `{cipher}`")
    if flags & ~FLAG_KNOWN_PLAINTEXT:
        raise TraceFormatError(f"unsupported flags `{flags:#04x}`")

    expected = HEADER.size + count * RECORD.itemsize
    if flags & FLAG_KNOWN_PLAINTEXT:
        expected += 16
    if len(data) != expected:
        raise TraceFormatError(f"trace file has `{len(data)}` bytes, header promises `{expected}`")

    records = np.frombuffer(data, dtype=RECORD, count=count, offset=HEADER.size)
    known = None
    if flags & FLAG_KNOWN_PLAINTEXT:
        known = bytes(data[-16:])
    return TraceSet(
        CIPHER_NAMES[cipher],
        records["ciphertext"].copy(),
        records["time"].copy(),
        seed=seed,
        known_plaintext=known,
    )


def write_traceset(ts: TraceSet, path: Union[str, Path]):
    atomic_write(path, encode_traceset(ts))


def read_traceset(path: Union[str, Path]) -> TraceSet:
    with open(path, "rb") as fh:
        return decode_traceset(fh.read())


def traceset_to_csv(ts: TraceSet) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for ct, t in zip(ts.ciphertexts, ts.times):
        writer.writerow([bytes(ct).hex(), f"{t:.17g}"])
    return buf.getvalue()


def write_csv(ts: TraceSet, path: Union[str, Path]):
    atomic_write(path, traceset_to_csv(ts))


def read_csv(path: Union[str, Path], cipher_id: str, seed: int = 0) -> TraceSet:
    """
    The CSV export carries no header metadata, so the cipher comes from the caller.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != CSV_HEADER:
            raise TraceFormatError(f"unexpected csv header `{header}`")
        rows = [(bytes.fromhex(ct), float(t)) for ct, t in reader]
    cts = np.array([list(ct) for ct, _ in rows], dtype=np.uint8).reshape(-1, 16)
    return TraceSet(cipher_id, cts, np.array([t for _, t in rows]), seed=seed)
