import io
import random
from typing import List, Optional

from rawjam_config import (
    ASM_COMMENTS,
    FILLERS_PER_READ,
    LATENCY_STUB_READS,
    PAGE_SIZE,
    PROBE_BATCH,
    WEAK_WRITER_FILLERS,
    WRITER_UNROLL,
)
from rawjam_util import Counter, NestedStrList


class LabelGenerator:
    gen = Counter(0)

    @staticmethod
    def next() -> str:
        """
        Generates a local label that has not been used in the module yet
        """
        return f".L{LabelGenerator.gen.next()}"

    @staticmethod
    def reset():
        LabelGenerator.gen.reset()


# filler instructions for the latency stub; they only touch r9 and r11 so the
# timed reads and the start timestamp in rcx stay intact
FILLERS = [
    "addq $1, %r9",
    "xorq %r9, %r11",
    "leaq 3(%r11), %r9",
    "subq %r11, %r9",
    "shlq $1, %r11",
    "nop",
]


def timestamp(dest: str) -> NestedStrList:
    """
    Serialized cycle counter read into `dest`. Clobbers rax and rdx.
    """
    code = ["lfence", "rdtsc", "shlq $32, %rdx", "orq %rdx, %rax"]
    if dest != "%rax":
        code.append(f"movq %rax, {dest}")
    return code


def function(name: str, body: NestedStrList) -> NestedStrList:
    return [f".globl {name}", f".type {name}, @function", f"{name}:", body, f".size {name}, .-{name}"]


def probe_loop(name: str, write: bool) -> NestedStrList:
    """
    rdi = buffer, rsi = count, rdx = out.
    Stores a timestamp before every batch of page-stride byte accesses and one
    after the last batch, so out receives count + 1 stamps.
    """
    loop = LabelGenerator.next()
    done = LabelGenerator.next()
    accesses = []
    for i in range(PROBE_BATCH):
        addr = f"{i * PAGE_SIZE:#06x}(%r8)"
        accesses.append(f"movb $0, {addr}" if write else f"movb {addr}, %cl")
    body = [
        "# r8 = buffer, r9 = out cursor, r11 = remaining batches",
        "movq %rdi, %r8",
        "movq %rdx, %r9",
        "movq %rsi, %r11",
        "testq %r11, %r11",
        f"je {done}",
        f"{loop}:",
        timestamp("(%r9)"),
        "addq $8, %r9",
        accesses,
        "decq %r11",
        f"jne {loop}",
        f"{done}:",
        timestamp("(%r9)"),
        "ret",
    ]
    return function(name, body)


def writer_loop(name: str, fillers: int = 0, read: bool = False) -> NestedStrList:
    """
    rdi = target, rsi = stop flag. Hammers the target with unrolled byte
    accesses until the stop flag turns nonzero; returns the number of rounds.
    """
    loop = LabelGenerator.next()
    access = "movb (%rdi), %cl" if read else "movb $0, (%rdi)"
    unrolled = []
    for _ in range(WRITER_UNROLL):
        unrolled.append(access)
        unrolled.extend(["addq $1, %r10"] * fillers)
    body = [
        "xorq %rax, %rax",
        f"{loop}:",
        unrolled,
        "incq %rax",
        "cmpb $0, (%rsi)",
        f"je {loop}",
        "ret",
    ]
    return function(name, body)


def latency_stub(name: str, seed: int = 0, reads: int = LATENCY_STUB_READS) -> NestedStrList:
    """
    rdi = array of `reads` addresses, rsi = repetitions, rdx = out.
    Each repetition times `reads` byte loads through the address array,
    interleaved with a seeded mix of filler instructions, and stores the
    elapsed cycles.
    """
    rng = random.Random(seed)
    loop = LabelGenerator.next()
    done = LabelGenerator.next()
    reads_code = []
    for i in range(reads):
        reads_code.append(f"movq {8 * i}(%rdi), %rdx")
        reads_code.append("movb (%rdx), %al")
        reads_code.extend(rng.choice(FILLERS) for _ in range(FILLERS_PER_READ))
    body = [
        "# r8 = out cursor, rsi = remaining repetitions, rcx = start stamp",
        "movq %rdx, %r8",
        "testq %rsi, %rsi",
        f"je {done}",
        f"{loop}:",
        timestamp("%rcx"),
        reads_code,
        timestamp("%rax"),
        "subq %rcx, %rax",
        "movq %rax, (%r8)",
        "addq $8, %r8",
        "decq %rsi",
        f"jne {loop}",
        f"{done}:",
        "ret",
    ]
    return function(name, body)


def probe_module(seed: int = 0) -> NestedStrList:
    LabelGenerator.reset()
    return [
        ".text",
        probe_loop("rj_probe_reads", write=False),
        probe_loop("rj_probe_writes", write=True),
        writer_loop("rj_conflict_writer"),
        writer_loop("rj_weak_writer", fillers=WEAK_WRITER_FILLERS),
        writer_loop("rj_conflict_reader", read=True),
        latency_stub("rj_latency_stub", seed),
        '.section .note.GNU-stack,"",@progbits',
    ]


def print_code(code: "NestedStrList", file, comments: Optional[bool] = None):
    """
    Generated code is nested lists of lines. Labels and directives go flush
    left, instructions are indented, comments are kept only when enabled.
    """
    comments = ASM_COMMENTS if comments is None else comments
    for sub_code in code:
        if isinstance(sub_code, str):
            if sub_code.endswith(":") or sub_code.startswith("."):
                print(sub_code, file=file)
            else:
                if sub_code.startswith("#") and not comments:
                    continue
                print(f"\t{sub_code}", file=file)
        else:
            print_code(sub_code, file, comments)


def render(code: "NestedStrList", comments: Optional[bool] = None) -> str:
    buf = io.StringIO()
    print_code(code, buf, comments)
    return buf.getvalue()


def flatten(code: "NestedStrList") -> List[str]:
    out = []
    for sub_code in code:
        if isinstance(sub_code, str):
            out.append(sub_code)
        else:
            out.extend(flatten(sub_code))
    return out
