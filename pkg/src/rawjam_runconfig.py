import argparse
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from rawjam_config import (
    CIPHER_AES_CT,
    CIPHER_IDS,
    PROFILE_USER,
    WORDS_PER_PAGE,
)
from rawjam_leakage import LeakModel
from rawjam_util import DomainError, check_jam_word

# substream of the seed used for a key the user did not give
KEY_STREAM = 2


def parse_key(text: Optional[str]) -> Optional[bytes]:
    if text is None:
        return None
    try:
        key = bytes.fromhex(text)
    except ValueError:
        raise DomainError(f"key `{text}` is not hex")
    if len(key) != 16:
        raise DomainError(f"key `{text}` must be 32 hex digits")
    return key


def parse_checkpoints(text: Optional[str]) -> Tuple[int, ...]:
    if not text:
        return ()
    try:
        points = tuple(int(p) for p in text.split(","))
    except ValueError:
        raise DomainError(f"checkpoints `{text}` must be comma separated integers")
    if any(p < 2 for p in points):
        raise DomainError(f"checkpoints `{text}` must all be >= 2")
    if any(b <= a for a, b in zip(points, points[1:])):
        raise DomainError(f"checkpoints `{text}` are not strictly ascending")
    return points


def parse_cpus(text: Optional[str]) -> Optional[Tuple[int, int]]:
    if not text:
        return None
    try:
        a, b = (int(p) for p in text.split(","))
    except ValueError:
        raise DomainError(f"cpu pair `{text}` must look like `0,4`")
    return (a, b)


def default_key(seed: int) -> bytes:
    seq = np.random.SeedSequence(seed, spawn_key=(0, KEY_STREAM))
    return np.random.Generator(np.random.PCG64(seq)).integers(0, 256, 16, dtype=np.uint8).tobytes()


def check_output(path: Optional[Path]) -> Optional[Path]:
    if path is None:
        return None
    if not path.parent.is_dir():
        raise FileNotFoundError(f"output directory `{path.parent}` does not exist")
    return path


@dataclass
class RunConfig:
    """
    Everything a subcommand needs, checked before any work starts.
    """

    command: str
    cipher: str = CIPHER_AES_CT
    traces: int = 0
    seed: int = 0
    key: Optional[bytes] = None
    model: Optional[LeakModel] = None
    profile: str = PROFILE_USER
    jam_word: int = 0
    checkpoints: Tuple[int, ...] = ()
    in_path: Optional[Path] = None
    out_path: Optional[Path] = None
    csv_path: Optional[Path] = None
    history_path: Optional[Path] = None
    filter_radius: Optional[float] = None
    workers: int = 1
    verbose: bool = False
    extra: dict = field(default_factory=dict)

    @staticmethod
    def from_namespace(ns: argparse.Namespace) -> "RunConfig":
        get = lambda name, default=None: getattr(ns, name, default)

        cipher = get("cipher", CIPHER_AES_CT)
        if cipher not in CIPHER_IDS:
            raise DomainError(f"unknown cipher `{cipher}`")
        traces = get("traces", 0) or 0
        if get("traces") is not None and traces < 1:
            raise DomainError(f"trace count `{traces}` must be >= 1")
        seed = get("seed", 0)
        if seed < 0:
            raise DomainError(f"seed `{seed}` must be >= 0")
        jam_word = get("jam_word")
        jam_word = 0 if jam_word is None else check_jam_word(jam_word)
        profile = get("profile", PROFILE_USER) or PROFILE_USER
        radius = get("filter_radius")
        if radius is not None and radius < 0:
            raise DomainError(f"filter radius `{radius}` is negative")
        workers = get("workers", 1) or 1
        if workers < 1:
            raise DomainError(f"workers `{workers}` must be >= 1")

        model = None
        if ns.command in ("gen", "scan", "linearity"):
            model = build_model(ns, cipher, profile, jam_word)

        for name, lowest in (("beam", 1), ("traces_per_round", 2), ("enumerate", 1), ("iterations", 0), ("reps", 1)):
            value = get(name)
            if value is not None and value < lowest:
                raise DomainError(f"--{name.replace('_', '-')} `{value}` must be >= {lowest}")

        table_base = get("table_base")
        if table_base is not None and not 0 <= table_base < WORDS_PER_PAGE:
            raise DomainError(f"table base word `{table_base}` outside [0, {WORDS_PER_PAGE - 1}]")

        in_path = Path(ns.in_path) if get("in_path") else None
        if in_path is not None and not in_path.is_file():
            raise FileNotFoundError(f"input file `{in_path}` does not exist")

        return RunConfig(
            command=ns.command,
            cipher=cipher,
            traces=traces,
            seed=seed,
            key=parse_key(get("key")),
            model=model,
            profile=profile,
            jam_word=jam_word,
            checkpoints=parse_checkpoints(get("checkpoints")),
            in_path=in_path,
            out_path=check_output(Path(ns.out) if get("out") else None),
            csv_path=check_output(Path(ns.csv) if get("csv") else None),
            history_path=check_output(Path(ns.history) if get("history") else None),
            filter_radius=radius,
            workers=workers,
            verbose=bool(get("verbose", False)),
            extra={
                "beam": get("beam"),
                "traces_per_round": get("traces_per_round"),
                "page_scan": bool(get("page_scan", False)),
                "table_base": table_base,
                "enumerate": get("enumerate"),
                "mode": get("mode"),
                "offset_class": get("offset_class"),
                "iterations": get("iterations"),
                "cpus": parse_cpus(get("cpus")),
                "reps": get("reps"),
            },
        )

    @property
    def master_key(self) -> bytes:
        return self.key if self.key is not None else default_key(self.seed)


def build_model(ns: argparse.Namespace, cipher: str, profile: str, jam_word: int) -> LeakModel:
    get = lambda name: getattr(ns, name, None)
    if get("synthetic"):
        model = LeakModel.synthetic(jam_word)
    else:
        model = LeakModel.for_cipher(cipher, profile)
    return model.with_overrides(
        jam_word=jam_word,
        noise_sigma=get("noise_sigma"),
        base_cycles=get("base_cycles"),
        line_penalty=get("line_penalty"),
        word_penalty=get("word_penalty"),
    )


