from typing import List, Tuple

import numpy as np

from ciphers.tables import SM4_CK, SM4_FK, SM4_SBOX
from ciphers.trace import AccessTrace
from rawjam_config import LINE_SIZE, LINES_PER_TABLE
from rawjam_util import check_block, check_key

ROUNDS = 32
LOOKUPS = ROUNDS * 4
PREFETCHES = LINES_PER_TABLE
MASK32 = 0xFFFFFFFF

# prefetch column inside each line
PREFETCH_COLUMN = 0


def _rotl(x: int, n: int) -> int:
    return ((x << n) & MASK32) | (x >> (32 - n))


def _tau(x: int) -> int:
    return int.from_bytes(bytes(int(SM4_SBOX[b]) for b in x.to_bytes(4, "big")), "big")


def _l(b: int) -> int:
    return b ^ _rotl(b, 2) ^ _rotl(b, 10) ^ _rotl(b, 18) ^ _rotl(b, 24)


def _l_key(b: int) -> int:
    return b ^ _rotl(b, 13) ^ _rotl(b, 23)


def _key_t(x: int) -> int:
    return _l_key(_tau(x))


def sm4_key_schedule(key: bytes) -> List[int]:
    """
    Returns the 32 round keys k1..k32 as 32-bit integers (k1 at index 0).
    """
    key = check_key(key)
    k = [int.from_bytes(key[4 * i : 4 * i + 4], "big") ^ SM4_FK[i] for i in range(4)]
    for i in range(ROUNDS):
        k.append(k[i] ^ _key_t(k[i + 1] ^ k[i + 2] ^ k[i + 3] ^ SM4_CK[i]))
    return k[4:]


def sm4_recover_master_key(k29: int, k30: int, k31: int, k32: int) -> bytes:
    """
    Inverts the key schedule from four consecutive round keys.
    Any four words are accepted; the result is the unique key whose schedule
    ends with them.
    """
    k = [0] * (ROUNDS + 4)
    k[ROUNDS:] = [k29 & MASK32, k30 & MASK32, k31 & MASK32, k32 & MASK32]
    for i in range(ROUNDS - 1, -1, -1):
        k[i] = k[i + 4] ^ _key_t(k[i + 1] ^ k[i + 2] ^ k[i + 3] ^ SM4_CK[i])
    return b"".join((k[i] ^ SM4_FK[i]).to_bytes(4, "big") for i in range(4))


def sm4_cn_encrypt(key: bytes, plaintext: bytes) -> Tuple[bytes, AccessTrace]:
    rk = sm4_key_schedule(key)
    pt = check_block(plaintext)
    x = [int.from_bytes(pt[4 * i : 4 * i + 4], "big") for i in range(4)]
    trace = AccessTrace()

    # cache normalization: one load per line before the first round
    for line in range(PREFETCHES):
        trace.record(line * LINE_SIZE + PREFETCH_COLUMN, 0, line, prefetch=True)

    for i in range(ROUNDS):
        inp = x[i + 1] ^ x[i + 2] ^ x[i + 3] ^ rk[i]
        out = 0
        for pos, b in enumerate(inp.to_bytes(4, "big")):
            trace.record(b, i + 1, pos)
            out = (out << 8) | int(SM4_SBOX[b])
        x.append(x[i] ^ _l(out))

    return b"".join(w.to_bytes(4, "big") for w in reversed(x[-4:])), trace


def words_of(blocks: np.ndarray) -> np.ndarray:
    """(n, 16) uint8 blocks -> (n, 4) big-endian uint32 words."""
    return np.ascontiguousarray(blocks, dtype=np.uint8).view(">u4").astype(np.uint32)


def bytes_of(words: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(words.astype(">u4")).view(np.uint8).reshape(-1, 16)


def word_bytes(w: np.ndarray) -> np.ndarray:
    """(n,) uint32 -> (n, 4) uint8, most significant byte first."""
    w = np.asarray(w, dtype=np.uint32)
    return np.stack([(w >> s) & 0xFF for s in (24, 16, 8, 0)], axis=1).astype(np.uint8)


def _rotl_v(x: np.ndarray, n: int) -> np.ndarray:
    return (x << np.uint32(n)) | (x >> np.uint32(32 - n))


def l_transform(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=np.uint32)
    return b ^ _rotl_v(b, 2) ^ _rotl_v(b, 10) ^ _rotl_v(b, 18) ^ _rotl_v(b, 24)


def tau(x: np.ndarray) -> np.ndarray:
    sb = SM4_SBOX.values[word_bytes(x)].astype(np.uint32)
    return (sb[:, 0] << np.uint32(24)) | (sb[:, 1] << np.uint32(16)) | (sb[:, 2] << np.uint32(8)) | sb[:, 3]


def t_transform(x: np.ndarray) -> np.ndarray:
    return l_transform(tau(x))


def sm4_cn_batch(key: bytes, plaintexts: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Vectorized SM4-CN over (n, 16) uint8 plaintexts.
    Returns ciphertexts and the (n, 128) S-box indices in lookup order
    (round-major, most significant byte first). Prefetches are not included.
    """
    rk = sm4_key_schedule(key)
    w = words_of(plaintexts)
    x = [w[:, 0], w[:, 1], w[:, 2], w[:, 3]]
    n = w.shape[0]
    indices = np.empty((n, LOOKUPS), dtype=np.uint8)

    for i in range(ROUNDS):
        inp = x[i + 1] ^ x[i + 2] ^ x[i + 3] ^ np.uint32(rk[i])
        indices[:, 4 * i : 4 * i + 4] = word_bytes(inp)
        x.append(x[i] ^ t_transform(inp))

    return bytes_of(np.stack(x[:-5:-1], axis=1)), indices
