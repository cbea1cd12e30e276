LOG_DEBUG = False
LINE = "--------------------------------------------------------------------------"

# table geometry
TABLE_SIZE = 256
LINE_SIZE = 64
WORD_SIZE = 4
PAGE_SIZE = 4096
LINES_PER_TABLE = TABLE_SIZE // LINE_SIZE
WORDS_PER_LINE = LINE_SIZE // WORD_SIZE
WORDS_PER_TABLE = TABLE_SIZE // WORD_SIZE
WORDS_PER_PAGE = PAGE_SIZE // WORD_SIZE

# penalties measured on the experimental platform
LINE_PENALTY = 2.0
WORD_PENALTY = 10.0

# conflict-free victim times (cycles)
AES_BASE_CYCLES = 2000.0
SM4_BASE_CYCLES = 700.0
SGX_BASE_CYCLES = 14600.0

# calibrated, not measured
DEFAULT_NOISE_SIGMA = 30.0
SGX_NOISE_SIGMA = 250.0
SGX_OUTLIER_RATE = 0.07
SGX_OUTLIER_SHIFT = (3000.0, 20000.0)

FILTER_RADIUS = 2000.0
DEFAULT_JAM_WORD = 0

# plaintexts and noise are drawn per block of this many records
RNG_BLOCK_SIZE = 4096

SM4_TRACES_PER_ROUND = 40000
SM4_BEAM_WIDTH = 1
SM4_ATTACK_ROUNDS = (32, 31, 30, 29, 28)

ENUMERATION_BUDGET = 1 << 20

TRACE_MAGIC = b"MJT1"
CIPHER_AES_CT = "aes-ct"
CIPHER_SM4_CN = "sm4-cn"
CIPHER_IDS = {CIPHER_AES_CT: 0, CIPHER_SM4_CN: 1}

PROFILE_USER = "user"
PROFILE_SGX = "sgx"

HISTOGRAM_BUCKET = 2
PROBE_BATCH = 8
WRITER_UNROLL = 100
LATENCY_STUB_READS = 64
ASM_COMMENTS = True
PROBE_ITERATIONS = 100000
LATENCY_REPS = 2000
FILLERS_PER_READ = 2
WEAK_WRITER_FILLERS = 3

# distance of the conflicting thread's target from the probed page offset
OFFSET_CLASSES = {
    "different-line": 0x100,
    "same-line-different-word": 0x8,
    "same-word": 0x0,
}
