"""TLS 1.2 key derivation and AES-256-GCM record decryption.

Only the ``TLS_ECDHE_RSA_WITH_AES_256_GCM_SHA384`` suite is handled, so the
PRF hash is fixed to SHA-384 and the key block holds two 32-byte write keys
followed by two 4-byte implicit IVs (AEAD suites use zero-length MAC keys).
"""

from __future__ import annotations

import functools
import hashlib
import hmac
import struct
from dataclasses import dataclass
from typing import TYPE_CHECKING

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .flows import Direction

if TYPE_CHECKING:
    from .tls_parser import AeadRecordParts

SUITE_ECDHE_RSA_AES256_GCM_SHA384 = 0xC030

MASTER_SECRET_LEN = 48
RANDOM_LEN = 32
KEY_LEN = 32
FIXED_IV_LEN = 4
EXPLICIT_NONCE_LEN = 8
TAG_LEN = 16
KEY_BLOCK_LEN = 2 * KEY_LEN + 2 * FIXED_IV_LEN

_PRF_HASH = hashlib.sha384


class AuthTagMismatch(Exception):
    """GCM tag verification failed.

    Raised for a wrong key, a wrong sequence number in the additional data,
    or a modified record. No plaintext is released in that case.
    """


@dataclass(frozen=True)
class SessionKeys:
    client_write_key: bytes
    server_write_key: bytes
    client_fixed_iv: bytes
    server_fixed_iv: bytes

    def __post_init__(self) -> None:
        if len(self.client_write_key) != KEY_LEN or len(self.server_write_key) != KEY_LEN:
            raise ValueError("write keys must be 32 bytes")
        if len(self.client_fixed_iv) != FIXED_IV_LEN or len(self.server_fixed_iv) != FIXED_IV_LEN:
            raise ValueError("fixed IVs must be 4 bytes")

    @classmethod
    def from_key_block(cls, block: bytes) -> "SessionKeys":
        if len(block) != KEY_BLOCK_LEN:
            raise ValueError(f"key block must be {KEY_BLOCK_LEN} bytes, got {len(block)}")
        return cls(
            client_write_key=block[0:32],
            server_write_key=block[32:64],
            client_fixed_iv=block[64:68],
            server_fixed_iv=block[68:72],
        )

    def to_key_block(self) -> bytes:
        return self.client_write_key + self.server_write_key + self.client_fixed_iv + self.server_fixed_iv

    def write_key(self, direction: Direction) -> bytes:
        if direction is Direction.CLIENT_TO_SERVER:
            return self.client_write_key
        return self.server_write_key

    def fixed_iv(self, direction: Direction) -> bytes:
        if direction is Direction.CLIENT_TO_SERVER:
            return self.client_fixed_iv
        return self.server_fixed_iv


def tls_prf(secret: bytes, label: str | bytes, seed: bytes, out_len: int) -> bytes:
    """Return ``out_len`` bytes of P_SHA384(secret, label + seed)."""
    if out_len < 1:
        raise ValueError("out_len must be positive")
    if isinstance(label, str):
        label = label.encode("ascii")
    full_seed = label + seed
    out = bytearray()
    a = full_seed
    while len(out) < out_len:
        a = hmac.digest(secret, a, _PRF_HASH)
        out += hmac.digest(secret, a + full_seed, _PRF_HASH)
    return bytes(out[:out_len])


def _check_randoms(client_random: bytes, server_random: bytes) -> None:
    if len(client_random) != RANDOM_LEN or len(server_random) != RANDOM_LEN:
        raise ValueError("client and server randoms must be 32 bytes")


def derive_master_secret(pre_master_secret: bytes, client_random: bytes, server_random: bytes) -> bytes:
    if not pre_master_secret:
        raise ValueError("pre-master secret must be non-empty")
    _check_randoms(client_random, server_random)
    return tls_prf(pre_master_secret, "master secret", client_random + server_random, MASTER_SECRET_LEN)


def derive_session_keys(master_secret: bytes, client_random: bytes, server_random: bytes) -> SessionKeys:
    if len(master_secret) != MASTER_SECRET_LEN:
        raise ValueError("master secret must be 48 bytes")
    _check_randoms(client_random, server_random)
    # key expansion takes server_random first
    block = tls_prf(master_secret, "key expansion", server_random + client_random, KEY_BLOCK_LEN)
    return SessionKeys.from_key_block(block)


@functools.lru_cache(maxsize=4096)
def _gcm(key: bytes) -> AESGCM:
    return AESGCM(key)


def record_aad(seq: int, content_type: int, version: bytes, plaintext_len: int) -> bytes:
    return struct.pack("!QB2sH", seq, content_type, bytes(version), plaintext_len)


def decrypt_record(
    keys: SessionKeys,
    direction: Direction,
    seq: int,
    parts: "AeadRecordParts",
    content_type: int,
    version: bytes,
) -> bytes:
    """Authenticate and decrypt one GCM record body.

    The nonce is the direction's fixed IV followed by the record's explicit
    nonce. Raises :class:`AuthTagMismatch` if the tag does not verify.
    """
    if len(parts.explicit_nonce) != EXPLICIT_NONCE_LEN or len(parts.tag) != TAG_LEN:
        raise ValueError("malformed GCM record parts")
    if not 0 <= seq < 1 << 64:
        raise ValueError("sequence number out of range")
    nonce = keys.fixed_iv(direction) + parts.explicit_nonce
    aad = record_aad(seq, content_type, version, len(parts.ciphertext))
    try:
        return _gcm(keys.write_key(direction)).decrypt(nonce, parts.ciphertext + parts.tag, aad)
    except InvalidTag:
        raise AuthTagMismatch(f"tag mismatch for {direction.value} record seq={seq}") from None
