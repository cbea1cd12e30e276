from ciphers.aes_ct import (
    aes_ct_batch,
    aes_ct_encrypt,
    aes_inv_sbox,
    aes_key_schedule,
    aes_recover_master_key,
)
from ciphers.sm4_cn import (
    sm4_cn_batch,
    sm4_cn_encrypt,
    sm4_key_schedule,
    sm4_recover_master_key,
)
from ciphers.tables import AES_SBOX, SM4_SBOX, SboxTable
from ciphers.trace import AccessTrace, TraceEntry
