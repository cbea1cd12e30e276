import os
from pathlib import Path
from typing import List, Optional, Union

import numpy as np


class RawJamError(Exception):
    pass


class DomainError(RawJamError, ValueError):
    pass


class TraceFormatError(RawJamError):
    pass


class ProbeUnavailable(RawJamError):
    pass


class VerificationFailed(RawJamError):
    """
    Raised when a recovered key does not survive verification.
    `diagnostics` holds one line per attacked round so the caller can report
    where the cascade went wrong.
    """

    def __init__(self, message: str, diagnostics: Optional[List[str]] = None):
        super().__init__(message)
        self.diagnostics = diagnostics or []


class Counter:
    def __init__(self, start: int):
        self.start = start
        self.curr = start

    def next(self):
        out = self.curr
        self.curr += 1
        return out

    def reset(self, new_start: Optional[int] = None):
        if new_start != None:
            self.start = new_start
        self.curr = self.start


NestedStrList = List[Union[str, "NestedStrList"]]


def check_jam_word(jam_word: int, limit: int = 64) -> int:
    if not 0 <= jam_word < limit:
        raise DomainError(f"jam word `{jam_word}` outside [0, {limit - 1}]")
    return jam_word


def check_key(key: bytes) -> bytes:
    if len(key) != 16:
        raise DomainError(f"cipher key must be 16 bytes, got `{len(key)}`")
    return bytes(key)


def check_block(block: bytes) -> bytes:
    if len(block) != 16:
        raise DomainError(f"block must be 16 bytes, got `{len(block)}`")
    return bytes(block)


def block_rng(seed: int, block: int, stream: int = 0) -> np.random.Generator:
    """
    Generator for one fixed-size block of records.
    The substream depends only on (seed, block, stream), so blocks can be
    produced in any order or on any worker and still give the same data.
    """
    seq = np.random.SeedSequence(seed, spawn_key=(block, stream))
    return np.random.Generator(np.random.PCG64(seq))


def atomic_write(path: Union[str, Path], data: Union[bytes, str]):
    """
    Writes to a temporary sibling first so a failed run never leaves a
    half-written file behind.
    """
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp")
    mode = "wb" if isinstance(data, bytes) else "w"
    with open(tmp, mode) as fh:
        fh.write(data)
    os.replace(tmp, path)
