"""Additively homomorphic aggregation: Paillier keys, fixed-point
encoding of real matrices, and the client-encrypt / server-sum /
destination-decrypt round.

The server-side half of the protocol (``aggregate_ciphertexts``) takes
nothing but ciphertexts and public keys; secret keys exist only inside
``PaillierKeypair`` objects that live in client state.  ``secure_aggregate``
wires the three halves together for in-process use and for tests.
"""

import math
import random
from dataclasses import dataclass, field

import gmpy2
import numpy as np
from gmpy2 import mpz

_SYS_RNG = random.SystemRandom()
_PRIME_ATTEMPTS = 20000


class CryptoError(Exception):
    pass


class KeygenError(CryptoError):
    pass


class KeyMismatchError(CryptoError):
    """Operands or messages bound to different public keys."""


class CodecOverflowError(CryptoError):
    """Entry magnitude too large for overflow-free aggregation."""


@dataclass(frozen=True)
class PaillierPublicKey:
    n: int
    modulus_bits: int
    n_sq: int = field(repr=False, default=0)

    def encrypt(self, m: int) -> int:
        """Randomized encryption of an integer in [0, n)."""
        n, n_sq = self.n, self.n_sq
        r = _SYS_RNG.randrange(1, n)
        # generator n+1: (n+1)^m = 1 + n m  (mod n^2)
        return int((1 + n * m) * gmpy2.powmod(r, n, n_sq) % n_sq)

    def same_key(self, other: "PaillierPublicKey") -> bool:
        return self.n == other.n


@dataclass(frozen=True)
class PaillierSecretKey:
    lam: int = field(repr=False)
    mu: int = field(repr=False)


@dataclass(frozen=True)
class PaillierKeypair:
    public: PaillierPublicKey
    secret: PaillierSecretKey = field(repr=False)

    def decrypt(self, c: int) -> int:
        n, n_sq = self.public.n, self.public.n_sq
        u = gmpy2.powmod(c, self.secret.lam, n_sq)
        return int((u - 1) // n * self.secret.mu % n)


def _draw_prime(rng: random.Random, bits: int) -> int:
    # top two bits forced so the product of two draws keeps full width
    top = (1 << (bits - 1)) | (1 << (bits - 2))
    for _ in range(_PRIME_ATTEMPTS):
        c = rng.getrandbits(bits) | top | 1
        if gmpy2.is_prime(c):
            return c
    raise KeygenError(f"no {bits}-bit prime after {_PRIME_ATTEMPTS} attempts")


def keygen(modulus_bits: int = 2048, seed: int = 0) -> PaillierKeypair:
    """Deterministic-given-seed keypair; encryption stays randomized."""
    if modulus_bits < 64 or modulus_bits % 2:
        raise KeygenError(f"unusable modulus size {modulus_bits}")
    rng = random.Random(seed)
    half = modulus_bits // 2
    p = _draw_prime(rng, half)
    q = _draw_prime(rng, half)
    while q == p:
        q = _draw_prime(rng, half)
    n = int(mpz(p) * q)
    lam = int(mpz(p - 1) * (q - 1))  # phi(n); works with the n+1 generator
    mu = int(gmpy2.invert(lam, n))
    pub = PaillierPublicKey(n=n, modulus_bits=modulus_bits, n_sq=n * n)
    return PaillierKeypair(public=pub, secret=PaillierSecretKey(lam, mu))


def he_add(a: int, b: int, pk: PaillierPublicKey) -> int:
    """Ciphertext product = plaintext sum (mod n)."""
    return int(mpz(a) * b % pk.n_sq)


# ---------------------------------------------------------------------------
# fixed-point codec


@dataclass(frozen=True)
class FixedPointCodec:
    """Maps reals onto Paillier's integer plaintext space.

    Negatives wrap to the upper half of [0, n) and are recovered by an
    n/2 threshold, so ciphertext sums of mixed-sign terms decode
    correctly as long as every partial sum stays inside (-n/2, n/2).
    ``max_terms`` is the aggregation fan-in the overflow guard budgets for.
    """

    frac_bits: int = 40
    max_terms: int = 16

    def __post_init__(self):
        if self.frac_bits < 1 or self.max_terms < 1:
            raise ValueError("frac_bits and max_terms must be positive")

    def guard(self, pk: PaillierPublicKey) -> float:
        exp = (pk.modulus_bits / 2 - self.frac_bits
               - math.log2(self.max_terms) - 1)
        return 2.0 ** exp

    def quantum(self) -> float:
        return 2.0 ** -self.frac_bits


def encode_matrix(X: np.ndarray, pk: PaillierPublicKey,
                  codec: FixedPointCodec) -> list:
    """Row-major list of plaintext integers in [0, n)."""
    X = np.asarray(X, dtype=np.float64)
    limit = codec.guard(pk)
    amax = float(np.abs(X).max()) if X.size else 0.0
    if not amax < limit:
        raise CodecOverflowError(
            f"entry magnitude {amax:g} exceeds overflow guard {limit:g}")
    scale = 1 << codec.frac_bits
    n = pk.n
    return [int(round(v * scale)) % n for v in X.ravel()]


def decode_matrix(values: list, shape: tuple, pk: PaillierPublicKey,
                  codec: FixedPointCodec) -> np.ndarray:
    half = pk.n // 2
    scale = float(1 << codec.frac_bits)
    out = np.empty(len(values), dtype=np.float64)
    for i, z in enumerate(values):
        if z > half:
            z -= pk.n
        out[i] = z / scale
    return out.reshape(shape)


# ---------------------------------------------------------------------------
# cipher matrices


@dataclass(frozen=True)
class CipherMatrix:
    """Dense matrix of Paillier ciphertexts bound to one destination key."""

    shape: tuple
    data: list = field(repr=False)  # row-major ciphertext ints
    key_id: object
    pk: PaillierPublicKey = field(repr=False)

    def __post_init__(self):
        expect = int(np.prod(self.shape)) if self.shape else 1
        if len(self.data) != expect:
            raise ValueError(f"{len(self.data)} ciphertexts for shape {self.shape}")


def encrypt_matrix(X: np.ndarray, pk: PaillierPublicKey,
                   codec: FixedPointCodec, key_id) -> CipherMatrix:
    plain = encode_matrix(X, pk, codec)
    return CipherMatrix(shape=tuple(np.shape(X)),
                        data=[pk.encrypt(m) for m in plain],
                        key_id=key_id, pk=pk)


def decrypt_matrix(cm: CipherMatrix, keypair: PaillierKeypair,
                   codec: FixedPointCodec) -> np.ndarray:
    if not keypair.public.same_key(cm.pk):
        raise KeyMismatchError(f"ciphertext bound to key {cm.key_id!r}")
    values = [keypair.decrypt(c) for c in cm.data]
    return decode_matrix(values, cm.shape, cm.pk, codec)


def cm_add(a: CipherMatrix, b: CipherMatrix) -> CipherMatrix:
    if not a.pk.same_key(b.pk) or a.key_id != b.key_id:
        raise KeyMismatchError(
            f"cannot add ciphertexts under keys {a.key_id!r} and {b.key_id!r}")
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    data = [he_add(x, y, a.pk) for x, y in zip(a.data, b.data)]
    return CipherMatrix(shape=a.shape, data=data, key_id=a.key_id, pk=a.pk)


def aggregate_ciphertexts(parts: list) -> CipherMatrix:
    """The server's half: fold ciphertext matrices without any secret."""
    if not parts:
        raise ValueError("nothing to aggregate")
    acc = parts[0]
    for cm in parts[1:]:
        acc = cm_add(acc, cm)
    return acc


def secure_aggregate(messages: list, keypairs: dict,
                     codec: FixedPointCodec) -> dict:
    """Run the whole round: encrypt per sender, sum per destination, decrypt.

    ``messages`` is a list of ``{"src": ..., "dest": ..., "matrix": ...}``;
    ``keypairs`` maps destination id to its PaillierKeypair.  Returns the
    decoded per-destination sums.  In the live system the three stages run
    on different parties; here they share a process but not key material:
    the aggregation stage sees only ``CipherMatrix`` objects.
    """
    by_dest = {}
    for msg in messages:
        dest = msg["dest"]
        if dest not in keypairs:
            raise KeyMismatchError(f"no keypair registered for {dest!r}")
        pk = keypairs[dest].public
        cm = encrypt_matrix(msg["matrix"], pk, codec, key_id=dest)
        by_dest.setdefault(dest, []).append(cm)
    out = {}
    for dest, parts in by_dest.items():
        shapes = {cm.shape for cm in parts}
        if len(shapes) > 1:
            raise ValueError(f"mixed shapes for {dest!r}: {sorted(shapes)}")
        total = aggregate_ciphertexts(parts)
        out[dest] = decrypt_matrix(total, keypairs[dest], codec)
    return out
