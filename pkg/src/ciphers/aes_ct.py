from typing import List, Tuple

import numpy as np

from ciphers.tables import AES_RCON, AES_SBOX, XTIME, XTIME3
from ciphers.trace import AccessTrace
from rawjam_config import LINE_SIZE, LINES_PER_TABLE
from rawjam_util import check_block, check_key

ROUNDS = 10
LOOKUPS = ROUNDS * 16
FETCHES_PER_LOOKUP = LINES_PER_TABLE

# state byte j = row + 4 * column; after ShiftRows, position j holds old[SHIFT_ROWS[j]]
SHIFT_ROWS = np.array([(j % 4) + 4 * (((j // 4) + (j % 4)) % 4) for j in range(16)])


def aes_inv_sbox(b: int) -> int:
    return int(AES_SBOX.inverse[b])


def _sub_word(w: List[int]) -> List[int]:
    return [int(AES_SBOX[b]) for b in w]


def aes_key_schedule(key: bytes) -> List[bytes]:
    """
    Returns the 11 round keys of AES-128, round 0 first.
    """
    key = check_key(key)
    words = [list(key[4 * i : 4 * i + 4]) for i in range(4)]
    for i in range(4, 44):
        tmp = list(words[i - 1])
        if i % 4 == 0:
            tmp = _sub_word(tmp[1:] + tmp[:1])
            tmp[0] ^= AES_RCON[i // 4 - 1]
        words.append([a ^ b for a, b in zip(words[i - 4], tmp)])
    return [bytes(sum(words[4 * r : 4 * r + 4], [])) for r in range(ROUNDS + 1)]


def aes_recover_master_key(round10_key: bytes) -> bytes:
    """
    Runs the AES-128 key schedule backwards from the last round key.
    """
    rk = check_key(round10_key)
    words = [None] * 44
    for i in range(4):
        words[40 + i] = list(rk[4 * i : 4 * i + 4])
    for i in range(43, 3, -1):
        tmp = list(words[i - 1])
        if i % 4 == 0:
            tmp = _sub_word(tmp[1:] + tmp[:1])
            tmp[0] ^= AES_RCON[i // 4 - 1]
        words[i - 4] = [a ^ b for a, b in zip(words[i], tmp)]
    return bytes(sum(words[:4], []))


def _mix_column(a: List[int]) -> List[int]:
    x2 = [int(XTIME[v]) for v in a]
    x3 = [int(XTIME3[v]) for v in a]
    return [
        x2[0] ^ x3[1] ^ a[2] ^ a[3],
        a[0] ^ x2[1] ^ x3[2] ^ a[3],
        a[0] ^ a[1] ^ x2[2] ^ x3[3],
        x3[0] ^ a[1] ^ a[2] ^ x2[3],
    ]


def _ct_lookup(index: int, trace: AccessTrace, round: int, position: int) -> int:
    """
    The constant cache profile lookup: fetch the same column of all four lines
    into a local buffer, then select the wanted entry by line.
    """
    column = index % LINE_SIZE
    buffer = []
    for line in range(LINES_PER_TABLE):
        offset = line * LINE_SIZE + column
        trace.record(offset, round, position)
        buffer.append(int(AES_SBOX[offset]))
    return buffer[index // LINE_SIZE]


def aes_ct_encrypt(key: bytes, plaintext: bytes) -> Tuple[bytes, AccessTrace]:
    round_keys = aes_key_schedule(key)
    state = [p ^ k for p, k in zip(check_block(plaintext), round_keys[0])]
    trace = AccessTrace()

    for rnd in range(1, ROUNDS + 1):
        state = [_ct_lookup(state[pos], trace, rnd, pos) for pos in range(16)]
        state = [state[j] for j in SHIFT_ROWS]
        if rnd != ROUNDS:
            state = sum((_mix_column(state[4 * c : 4 * c + 4]) for c in range(4)), [])
        state = [s ^ k for s, k in zip(state, round_keys[rnd])]

    return bytes(state), trace


def aes_ct_batch(key: bytes, plaintexts: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Vectorized AES-CT over an (n, 16) uint8 array of plaintexts.
    Returns the ciphertexts and the (n, 160) S-box indices in lookup order
    (round-major, state position minor). The fetched offsets of lookup i are
    the four lines of column i % 64.
    """
    round_keys = [np.frombuffer(rk, dtype=np.uint8) for rk in aes_key_schedule(key)]
    state = np.asarray(plaintexts, dtype=np.uint8) ^ round_keys[0]
    n = state.shape[0]
    indices = np.empty((n, LOOKUPS), dtype=np.uint8)

    for rnd in range(1, ROUNDS + 1):
        indices[:, (rnd - 1) * 16 : rnd * 16] = state
        state = AES_SBOX.values[state][:, SHIFT_ROWS]
        if rnd != ROUNDS:
            cols = state.reshape(n, 4, 4)
            a0, a1, a2, a3 = cols[:, :, 0], cols[:, :, 1], cols[:, :, 2], cols[:, :, 3]
            mixed = np.empty_like(cols)
            mixed[:, :, 0] = XTIME[a0] ^ XTIME3[a1] ^ a2 ^ a3
            mixed[:, :, 1] = a0 ^ XTIME[a1] ^ XTIME3[a2] ^ a3
            mixed[:, :, 2] = a0 ^ a1 ^ XTIME[a2] ^ XTIME3[a3]
            mixed[:, :, 3] = XTIME3[a0] ^ a1 ^ a2 ^ XTIME[a3]
            state = mixed.reshape(n, 16)
        state = state ^ round_keys[rnd]

    return state, indices


def last_round_indices(key: bytes, ciphertexts: np.ndarray) -> np.ndarray:
    """
    True last-round S-box index behind each ciphertext byte:
    S^-1(c[j] ^ k10[j]), in ciphertext byte order.
    """
    k10 = np.frombuffer(aes_key_schedule(key)[ROUNDS], dtype=np.uint8)
    return AES_SBOX.inverse[np.asarray(ciphertexts, dtype=np.uint8) ^ k10]
