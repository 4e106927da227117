"""Shared deterministic primitives: hash oracle, XOR strings, prime-order group, amounts, ids.

Everything here is a pure function of its inputs (plus, for the seeded hash
backend, the seed), so simulations replay byte-for-byte.  Values are plain
Python types: digests and preimages are ``bytes`` of :data:`DIGEST_SIZE`,
amounts are non-negative ints in base units (:data:`COIN` units per coin),
group elements and scalars are ints.
"""

from __future__ import annotations

import hashlib
import hmac
from dataclasses import dataclass
from fractions import Fraction

DIGEST_SIZE = 32
PREIMAGE_SIZE = 32

# Fixed-point money: integer base units, 10^8 per coin (so "0.25 coins" is exact).
COIN = 10**8

# Txids are 128-bit truncations of a digest, compared as integers.
TXID_BITS = 128


class LengthMismatch(ValueError):
    """Byte strings of unequal or unexpected length where fixed length is required."""


# ---------------------------------------------------------------------------
# Hash oracle
# ---------------------------------------------------------------------------

class HashOracle:
    """Hash function H used for all conditions and identifiers.

    Two backends:

    * ``sha256`` (default): the real thing; digests are stable across runs.
    * ``prf``: HMAC-SHA256 keyed with a seed.  Same signature and digest
      size, but per-seed independent, so tests can brute-force preimages
      over small input spaces and re-seed to get fresh "random oracles".
    """

    def __init__(self, backend: str = "sha256", seed: bytes = b""):
        if backend not in ("sha256", "prf"):
            raise ValueError(f"unknown hash backend: {backend}")
        self.backend = backend
        self.seed = seed

    def hash(self, data: bytes) -> bytes:
        if self.backend == "sha256":
            return hashlib.sha256(data).digest()
        return hmac.new(self.seed, data, hashlib.sha256).digest()

    def __repr__(self) -> str:
        return f"HashOracle({self.backend!r})"


def xor(a: bytes, b: bytes) -> bytes:
    """Bitwise XOR of two equal-length byte strings."""
    if len(a) != len(b):
        raise LengthMismatch(f"xor of {len(a)} bytes with {len(b)} bytes")
    return bytes(x ^ y for x, y in zip(a, b))


ZERO_PREIMAGE = bytes(PREIMAGE_SIZE)


def xor_many(values) -> bytes:
    out = ZERO_PREIMAGE
    for v in values:
        out = xor(out, v)
    return out


def sample_preimage(rng) -> bytes:
    """Draw a uniform 32-byte string from a ``random.Random``-like rng."""
    return rng.randbytes(PREIMAGE_SIZE)


def to_hex(b: bytes) -> str:
    """Canonical encoding for byte fields in files and logs: lowercase, no prefix."""
    return b.hex()


def from_hex(s: str) -> bytes:
    return bytes.fromhex(s)


# ---------------------------------------------------------------------------
# Prime-order group (Schnorr subgroup of Z_P^*, P = 2q+1 safe prime)
# ---------------------------------------------------------------------------

# Test-size group: order small enough that exhaustive discrete-log loops run
# in seconds, which several oracles below rely on.
TEST_MODULUS = 80387          # safe prime, = 2 * 40193 + 1
TEST_ORDER = 40193            # prime order of the quadratic-residue subgroup
TEST_GENERATOR = 4            # 2^2, a generator of that subgroup

# Production-size alternative: RFC 3526 group 14 (2048-bit MODP, a safe prime).
# g = 4 generates the prime-order subgroup of quadratic residues.
MODP_2048 = int(
    "FFFFFFFFFFFFFFFFC90FDAA22168C234C4C6628B80DC1CD129024E088A67CC74"
    "020BBEA63B139B22514A08798E3404DDEF9519B3CD3A431B302B0A6DF25F1437"
    "4FE1356D6D51C245E485B576625E7EC6F44C42E9A637ED6B0BFF5CB6F406B7ED"
    "EE386BFB5A899FA5AE9F24117C4B1FE649286651ECE45B3DC2007CB8A163BF05"
    "98DA48361C55D39A69163FA8FD24CF5F83655D23DCA3AD961C62F356208552BB"
    "9ED529077096966D670C354E4ABC9804F1746C08CA18217C32905E462E36CE3B"
    "E39E772C180E86039B2783A2EC07A28FB5C55DF06F4C52C9DE2BCBF695581718"
    "3995497CEA956AE515D2261898FA051015728E5A8AACAA68FFFFFFFFFFFFFFFF",
    16,
)


@dataclass(frozen=True)
class Group:
    """Cyclic group of prime order written multiplicatively; elements are ints mod modulus."""

    modulus: int
    order: int
    generator: int

    def pow(self, base: int, e: int) -> int:
        return pow(base, e % self.order, self.modulus)

    def mul(self, a: int, b: int) -> int:
        return (a * b) % self.modulus

    @property
    def identity(self) -> int:
        return 1

    def scalar(self, x: int) -> int:
        return x % self.order

    def random_scalar(self, rng) -> int:
        return rng.randrange(self.order)

    def contains(self, a: int) -> bool:
        return 0 < a < self.modulus and pow(a, self.order, self.modulus) == 1

    def dlog_brute_force(self, target: int) -> int:
        """Exhaustive discrete log; only sensible for the test-size group."""
        acc = 1
        for e in range(self.order):
            if acc == target:
                return e
            acc = self.mul(acc, self.generator)
        raise ValueError("element not in the subgroup")


TEST_GROUP = Group(TEST_MODULUS, TEST_ORDER, TEST_GENERATOR)
PRODUCTION_GROUP = Group(MODP_2048, (MODP_2048 - 1) // 2, 4)


def group_pow(base: int, e: int, group: Group = TEST_GROUP) -> int:
    return group.pow(base, e)


def group_mul(a: int, b: int, group: Group = TEST_GROUP) -> int:
    return group.mul(a, b)


# ---------------------------------------------------------------------------
# Amounts
# ---------------------------------------------------------------------------

def coins(text) -> int:
    """Parse a decimal coin amount ("2.75", 3, Fraction) into exact base units.

    Raises ValueError if the amount is negative or not representable in base units.
    """
    frac = Fraction(str(text)) * COIN
    if frac.denominator != 1:
        raise ValueError(f"{text} is not a whole number of base units")
    units = int(frac)
    if units < 0:
        raise ValueError("amounts are non-negative")
    return units


def format_coins(units: int) -> str:
    """Render base units as a decimal coin string with no trailing zeros ("2.75")."""
    whole, frac = divmod(units, COIN)
    if frac == 0:
        return str(whole)
    return f"{whole}.{frac:08d}".rstrip("0")


def checked_sub(a: int, b: int) -> int:
    """a - b, refusing to go negative (amounts are unsigned)."""
    if b > a:
        raise ValueError(f"amount underflow: {a} - {b}")
    return a - b


# ---------------------------------------------------------------------------
# Identifiers
# ---------------------------------------------------------------------------
#
# UserId is an opaque string with the strict total order of str comparison.
# ChannelId is derived from the endpoint pair plus an open-sequence number so
# the same pair can hold several channels at once.

def channel_id(u1: str, u2: str, seq: int) -> str:
    return f"{u1}~{u2}#{seq}"


def derive_txid(oracle: HashOracle, sender: str, nonce: int) -> int:
    """128-bit totally ordered payment id: hash(senderId || nonce), truncated."""
    digest = oracle.hash(sender.encode() + nonce.to_bytes(16, "big"))
    return int.from_bytes(digest[: TXID_BITS // 8], "big")
