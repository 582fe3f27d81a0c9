"""Additively homomorphic encryption of gradient vectors: Paillier over a
fixed-point encoding.

Real values are encoded as round(x * 2^q) and mapped into Z_n with negatives
represented modulo n, so ciphertext products decrypt to plaintext sums. The
scheme is simulation-grade: key sizes are small by cryptographic standards
and each ciphertext's obfuscation is drawn from products of a precomputed
pool of r^n values rather than a fresh modular exponentiation, trading
entropy for the throughput the desk-scale experiments need.

Wire format of a serialized EncryptedVector (all integers big-endian):

    magic   4 bytes  b"PTEV"
    version 1 byte   0x01
    key_id  8 bytes  first 8 bytes of SHA-256 of the modulus n
    q       2 bytes  fixed-point scale exponent
    count   4 bytes  number of ciphertexts
    then per ciphertext: 4-byte byte-length prefix + ciphertext bytes
"""

from __future__ import annotations

import hashlib
import random
from dataclasses import dataclass, field

import gmpy2
import numpy as np

VALID_KEY_BITS = (512, 1024, 2048)
DEFAULT_Q = 40
_POOL_SIZE = 32
_MAGIC = b"PTEV"
_VERSION = 1


class IntegrityError(ValueError):
    """Ciphertext and key do not belong together."""


def _random_prime(bits: int, rng: random.Random) -> int:
    while True:
        candidate = rng.getrandbits(bits) | (1 << (bits - 1)) | 1
        if gmpy2.is_prime(candidate, 25):
            return int(candidate)


@dataclass(frozen=True)
class PublicKey:
    n: int
    bits: int
    key_id: int
    obfuscator_pool: tuple[int, ...] = field(repr=False)

    @property
    def n_sq(self) -> int:
        return self.n * self.n

    @property
    def max_plaintext(self) -> int:
        # symmetric headroom for the modular-negative encoding
        return self.n // 3


@dataclass
class PrivateKey:
    """Decryption key; counts its own uses so decrypt-once rules are testable."""

    lam: int
    mu: int
    public: PublicKey
    decrypt_count: int = 0


@dataclass(frozen=True)
class KeyPair:
    public: PublicKey
    private: PrivateKey
    bits: int


def keygen(bits: int, seed: int) -> KeyPair:
    """Deterministic (seeded) Paillier key pair with g = n + 1."""
    if bits not in VALID_KEY_BITS:
        raise ValueError(f"key size must be one of {VALID_KEY_BITS}")
    rng = random.Random(seed)
    while True:
        p = _random_prime(bits // 2, rng)
        q = _random_prime(bits // 2, rng)
        if p != q:
            break
    n = p * q
    lam = (p - 1) * (q - 1)
    mu = int(gmpy2.invert(lam, n))
    key_id = int.from_bytes(
        hashlib.sha256(n.to_bytes((n.bit_length() + 7) // 8, "big")).digest()[:8], "big"
    )
    n_sq = n * n
    pool = tuple(
        int(gmpy2.powmod(rng.randrange(1, n), n, n_sq)) for _ in range(_POOL_SIZE)
    )
    public = PublicKey(n=n, bits=bits, key_id=key_id, obfuscator_pool=pool)
    return KeyPair(public, PrivateKey(lam, mu, public), bits)


@dataclass(frozen=True)
class EncryptedVector:
    """Ciphertexts aligned to a gradient layout, all under one key and scale."""

    ciphertexts: tuple[int, ...]
    q: int
    key_id: int

    def __len__(self) -> int:
        return len(self.ciphertexts)


def encode_fixed_point(value: float, q: int, pk: PublicKey) -> int:
    scaled = round(float(value) * (1 << q))
    if abs(scaled) > pk.max_plaintext:
        raise ValueError(f"value {value} overflows the fixed-point bound at q={q}")
    return scaled % pk.n


def decode_fixed_point(plain: int, q: int, pk: PublicKey) -> float:
    if plain > pk.n // 2:
        plain -= pk.n
    return plain / (1 << q)


def encrypt(
    pk: PublicKey, vector, q: int = DEFAULT_Q, rng: random.Random | None = None
) -> EncryptedVector:
    """Encrypt a real vector element-wise at fixed-point scale 2^q."""
    if rng is None:
        rng = random.SystemRandom()
    values = np.asarray(vector, dtype=np.float64).ravel()
    n, n_sq = pk.n, pk.n_sq
    pool = pk.obfuscator_pool
    ciphertexts = []
    for value in values:
        m = encode_fixed_point(value, q, pk)
        nude = (1 + n * m) % n_sq  # g = n + 1 shortcut
        obf = pool[rng.randrange(_POOL_SIZE)]
        obf = (obf * pool[rng.randrange(_POOL_SIZE)]) % n_sq
        obf = (obf * pool[rng.randrange(_POOL_SIZE)]) % n_sq
        ciphertexts.append((nude * obf) % n_sq)
    return EncryptedVector(tuple(ciphertexts), q, pk.key_id)


def decrypt(sk: PrivateKey, encrypted: EncryptedVector) -> np.ndarray:
    """Decrypt to a float64 vector; increments the key's use counter."""
    pk = sk.public
    if encrypted.key_id != pk.key_id:
        raise IntegrityError("ciphertext was produced under a different key")
    sk.decrypt_count += 1
    n, n_sq = pk.n, pk.n_sq
    out = np.empty(len(encrypted.ciphertexts))
    for i, c in enumerate(encrypted.ciphertexts):
        plain = (int(gmpy2.powmod(c, sk.lam, n_sq)) - 1) // n * sk.mu % n
        out[i] = decode_fixed_point(plain, encrypted.q, pk)
    return out


def add_encrypted(a: EncryptedVector, b: EncryptedVector, pk: PublicKey) -> EncryptedVector:
    """Ciphertext-space addition: decrypt(a (+) b) = decrypt(a) + decrypt(b)."""
    if a.key_id != b.key_id or a.key_id != pk.key_id:
        raise IntegrityError("operands are not under the same key")
    if a.q != b.q:
        raise ValueError("operands use different fixed-point scales")
    if len(a) != len(b):
        raise ValueError("operands have different lengths")
    n_sq = pk.n_sq
    return EncryptedVector(
        tuple((x * y) % n_sq for x, y in zip(a.ciphertexts, b.ciphertexts)),
        a.q,
        a.key_id,
    )


def encrypt_zeros(pk: PublicKey, length: int, q: int = DEFAULT_Q) -> EncryptedVector:
    return encrypt(pk, np.zeros(length), q, random.Random(0))


def serialize(encrypted: EncryptedVector) -> bytes:
    parts = [
        _MAGIC,
        bytes([_VERSION]),
        encrypted.key_id.to_bytes(8, "big"),
        encrypted.q.to_bytes(2, "big"),
        len(encrypted.ciphertexts).to_bytes(4, "big"),
    ]
    for c in encrypted.ciphertexts:
        raw = c.to_bytes((c.bit_length() + 7) // 8 or 1, "big")
        parts.append(len(raw).to_bytes(4, "big"))
        parts.append(raw)
    return b"".join(parts)


def deserialize(blob: bytes) -> EncryptedVector:
    if blob[:4] != _MAGIC or blob[4] != _VERSION:
        raise ValueError("not a serialized encrypted vector")
    key_id = int.from_bytes(blob[5:13], "big")
    q = int.from_bytes(blob[13:15], "big")
    count = int.from_bytes(blob[15:19], "big")
    offset = 19
    ciphertexts = []
    for _ in range(count):
        size = int.from_bytes(blob[offset : offset + 4], "big")
        offset += 4
        ciphertexts.append(int.from_bytes(blob[offset : offset + size], "big"))
        offset += size
    if offset != len(blob):
        raise ValueError("trailing bytes in serialized encrypted vector")
    return EncryptedVector(tuple(ciphertexts), q, key_id)
