"""Hashing, extension, object naming and signatures.

One hash algorithm (SHA-256) is used for PCR banks, policy digests and names.
Signatures are Ed25519, which is deterministic: the same key and message always
give the same signature bytes.
"""
import hashlib
import hmac as _hmac
import os
import struct
from dataclasses import dataclass
from typing import Callable

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)

from .constants import TPM_ALG_ED25519, TPM_ALG_SHA256

HASH_ALG = "sha256"
HASH_ALG_ID = TPM_ALG_SHA256
DIGEST_SIZE = 32
ZERO_DIGEST = bytes(DIGEST_SIZE)

SCHEME_ED25519 = "ed25519"
SCHEME_IDS = {SCHEME_ED25519: TPM_ALG_ED25519}

RandomSource = Callable[[int], bytes]


class UnsupportedScheme(ValueError):
    pass


def hash(data: bytes) -> bytes:  # noqa: A001 - mirrors the H() of the EA equations
    return hashlib.sha256(data).digest()


def extend(old: bytes, payload: bytes) -> bytes:
    """Return H(old || payload)."""
    if len(old) != DIGEST_SIZE:
        raise ValueError("old value is not a %d-byte digest" % DIGEST_SIZE)
    return hash(old + payload)


def hmac(key: bytes, data: bytes) -> bytes:
    return _hmac.new(key, data, hashlib.sha256).digest()


def constant_time_eq(a: bytes, b: bytes) -> bool:
    return _hmac.compare_digest(a, b)


def encode_fields(*fields: bytes) -> bytes:
    """Canonical serialization: u32 big-endian length prefix per field."""
    return b"".join(struct.pack(">I", len(f)) + f for f in fields)


def compute_object_name(public_area: bytes) -> bytes:
    """Name = u16 hash algorithm id || H(public area)."""
    return struct.pack(">H", HASH_ALG_ID) + hash(public_area)


@dataclass(frozen=True)
class SignatureKeyPair:
    public: bytes
    private: bytes = b""
    scheme: str = SCHEME_ED25519

    def __repr__(self):
        # keep private key material out of reprs and logs
        return "SignatureKeyPair(public=%s, scheme=%r)" % (self.public.hex(), self.scheme)


def generate_keypair(random: RandomSource = os.urandom) -> SignatureKeyPair:
    seed = random(32)
    priv = Ed25519PrivateKey.from_private_bytes(seed)
    pub = priv.public_key().public_bytes(serialization.Encoding.Raw, serialization.PublicFormat.Raw)
    return SignatureKeyPair(public=pub, private=seed)


def _check_scheme(scheme):
    if scheme not in SCHEME_IDS:
        raise UnsupportedScheme("unsupported signature scheme %r" % (scheme,))


def sign(key: SignatureKeyPair, message: bytes) -> bytes:
    _check_scheme(key.scheme)
    if not key.private:
        raise ValueError("key pair has no private part")
    return Ed25519PrivateKey.from_private_bytes(key.private).sign(message)


def verify(public: bytes, message: bytes, signature: bytes, scheme: str = SCHEME_ED25519) -> bool:
    _check_scheme(scheme)
    try:
        Ed25519PublicKey.from_public_bytes(public).verify(signature, message)
    except (InvalidSignature, ValueError):
        return False
    return True


def check_public_key(public: bytes, scheme: str = SCHEME_ED25519) -> None:
    """Raise ValueError if `public` is not a valid encoded public key."""
    _check_scheme(scheme)
    if len(public) != 32:
        raise ValueError("Ed25519 public key must be 32 bytes, got %d" % len(public))
    Ed25519PublicKey.from_public_bytes(public)


class Drbg:
    """Deterministic byte stream: SHA-256 in counter mode over a seed.

    Used for reproducible fixtures (`--seed`); never for production keys.
    """

    def __init__(self, seed: bytes):
        self._seed = hash(b"tpmeid-drbg" + seed)
        self._counter = 0

    def __call__(self, n: int) -> bytes:
        out = b""
        while len(out) < n:
            out += hash(self._seed + struct.pack(">Q", self._counter))
            self._counter += 1
        return out[:n]
