"""Brute-force Merkle tree builder used as ground truth for the claim log.

Recomputes roots directly from the hashing definition (leaf = H(0x00||data),
node = H(0x01||l||r), split at the largest power of two strictly below n),
with no sharing with the production code beyond the two prefix bytes.
"""

import hashlib


def brute_leaf(payload: bytes) -> bytes:
    return hashlib.sha256(b"\x00" + payload).digest()


def brute_root(payloads: list[bytes]) -> bytes:
    n = len(payloads)
    if n == 0:
        return hashlib.sha256(b"").digest()
    if n == 1:
        return brute_leaf(payloads[0])
    k = 1
    while k * 2 < n:
        k *= 2
    left = brute_root(payloads[:k])
    right = brute_root(payloads[k:])
    return hashlib.sha256(b"\x01" + left + right).digest()
