"""Conditional-payment contracts: HTLC, the multi-hop XOR-chained setup, and DLTC.

The multi-hop setup is the heart of the construction.  The sender draws one
fresh random string per hop and builds the hop conditions

    y_i = H(x_i XOR x_{i+1} XOR ... XOR x_n)

so that a preimage for y_{i+1} plus the local string x_i immediately yields a
preimage for y_i (XOR in the released value).  Conditions at different hops
are therefore independent digests, yet settlement still cascades backwards
from the receiver.  Each hop gets a proof that its condition is consistent
with the next one without learning the inner XOR sum; the proof system is an
interface with two simulation backends (see ProofSystem).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Optional

from .errors import (
    AlreadySettled,
    BadPreimage,
    BadSolution,
    Expired,
    InsufficientCapacity,
    NotYetExpired,
)
from .primitives import Group, HashOracle, TEST_GROUP, sample_preimage, to_hex, xor, xor_many

if TYPE_CHECKING:
    from .channel import ChannelState

LOCKED = "Locked"
FULFILLED = "Fulfilled"
REFUNDED = "Refunded"


# ---------------------------------------------------------------------------
# Proof system
# ---------------------------------------------------------------------------
#
# Statement: (y_next, y_this, x_this).  A witness w satisfies it when
# H(w) == y_next and H(w XOR x_this) == y_this.

Statement = tuple[bytes, bytes, bytes]

BACKEND_TAGS = {"revealing": b"\x01", "oracle": b"\x02"}


def statement_bytes(statement: Statement) -> bytes:
    y_next, y_this, x_this = statement
    return y_next + y_this + x_this


def statement_holds(oracle: HashOracle, statement: Statement, witness: bytes) -> bool:
    y_next, y_this, x_this = statement
    return oracle.hash(witness) == y_next and oracle.hash(xor(witness, x_this)) == y_this


def encode_proof(backend: str, payload: bytes) -> bytes:
    return BACKEND_TAGS[backend] + len(payload).to_bytes(4, "big") + payload


def decode_proof(proof: bytes) -> Optional[tuple[bytes, bytes]]:
    """Split a proof into (backend tag, payload); None if malformed."""
    if len(proof) < 5:
        return None
    tag, length = proof[:1], int.from_bytes(proof[1:5], "big")
    payload = proof[5:]
    if len(payload) != length:
        return None
    return tag, payload


class ProofSystem:
    """Pluggable prover/verifier for the hop-consistency statements.

    Backends:

    * ``revealing`` — the proof simply is the witness.  Complete and sound,
      and cheap, but obviously not zero-knowledge: anyone holding the proof
      learns the downstream release value.  Good for functional tests.
    * ``oracle`` — an in-simulation registry.  prove() checks the witness
      and records the statement; the proof bytes are a keyed digest of the
      statement only, so they carry no witness information (zero-knowledge
      by construction inside the simulation).  verify() succeeds only for
      registered statements, so proofs cannot be forged for false ones.

    A real NIZK prover (e.g. a circuit-based one) would slot in as a third
    backend; none is built here.
    """

    def __init__(self, backend: str, oracle: HashOracle, registry_key: bytes = b"registry"):
        if backend not in BACKEND_TAGS:
            raise ValueError(f"unknown proof backend: {backend}")
        self.backend = backend
        self.oracle = oracle
        self._registry_key = registry_key
        self._registry: dict[bytes, bytes] = {}

    def _tag_for(self, stmt: bytes) -> bytes:
        return self.oracle.hash(self._registry_key + stmt)

    def prove(self, statement: Statement, witness: bytes) -> bytes:
        if not statement_holds(self.oracle, statement, witness):
            raise BadPreimage("witness does not satisfy the statement")
        if self.backend == "revealing":
            return encode_proof("revealing", witness)
        stmt = statement_bytes(statement)
        tag = self._tag_for(stmt)
        self._registry[stmt] = tag
        return encode_proof("oracle", tag)

    def verify(self, statement: Statement, proof: bytes) -> bool:
        decoded = decode_proof(proof)
        if decoded is None:
            return False
        tag, payload = decoded
        if tag == BACKEND_TAGS["revealing"]:
            return statement_holds(self.oracle, statement, payload)
        if tag == BACKEND_TAGS["oracle"]:
            stmt = statement_bytes(statement)
            return self._registry.get(stmt) == payload
        return False


# ---------------------------------------------------------------------------
# Multi-hop setup
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class HopSetup:
    x: bytes                      # the hop's local random string
    y: bytes                      # the hop's lock condition
    proof: Optional[bytes]        # consistency proof toward the next hop; None on the last


@dataclass(frozen=True)
class MultiHopSetup:
    hops: tuple[HopSetup, ...]

    def __len__(self) -> int:
        return len(self.hops)


def setup_htlc(n: int, rng, oracle: HashOracle, proofs: ProofSystem) -> MultiHopSetup:
    """Sender-side setup for an n-hop chain (hop n is the receiver's).

    Draws n independent strings, builds the XOR-chained conditions, and
    attaches to every hop but the last a proof tying its condition to the
    next hop's.
    """
    if n < 1:
        raise ValueError("need at least one hop")
    xs = [sample_preimage(rng) for _ in range(n)]
    ys = [oracle.hash(xor_many(xs[i:])) for i in range(n)]
    hops = []
    for i in range(n):
        proof = None
        if i < n - 1:
            witness = xor_many(xs[i + 1:])
            proof = proofs.prove((ys[i + 1], ys[i], xs[i]), witness)
        hops.append(HopSetup(xs[i], ys[i], proof))
    return MultiHopSetup(tuple(hops))


def verify_hop(statement: Statement, proof: bytes, proofs: ProofSystem) -> bool:
    return proofs.verify(statement, proof)


def derive_upstream(x_this: bytes, r: bytes, y_next: bytes, oracle: HashOracle) -> bytes:
    """Turn a preimage for the next hop's condition into one for this hop's."""
    if oracle.hash(r) != y_next:
        raise BadPreimage("release value does not open the downstream condition")
    return xor(x_this, r)


# ---------------------------------------------------------------------------
# HTLC
# ---------------------------------------------------------------------------

@dataclass
class HtlcContract:
    """Hold of `value` on a channel: payee claims with a preimage of `condition`
    strictly before round `timeout`; from `timeout` on the payer takes it back."""

    payer: str
    payee: str
    condition: bytes
    value: int
    timeout: int
    status: str = LOCKED
    release: Optional[bytes] = None      # preimage recorded at fulfillment
    contested: bool = False              # True forces the settlement onto the ledger

    def to_dict(self) -> dict:
        return {
            "payer": self.payer,
            "payee": self.payee,
            "y": to_hex(self.condition),
            "value": self.value,
            "timeout": self.timeout,
            "status": self.status,
        }


@dataclass
class Settlement:
    kind: str          # "fulfilled" | "refunded"
    value: int
    release: Optional[bytes] = None


def lock(channel: "ChannelState", contract: HtlcContract) -> None:
    """Attach a contract to a channel, consuming capacity."""
    if contract.value > channel.cap:
        raise InsufficientCapacity(
            f"lock of {contract.value} exceeds remaining capacity {channel.cap}")
    channel.cap -= contract.value
    channel.contracts[to_hex(contract.condition)] = contract


def fulfill(contract: HtlcContract, r: bytes, now: int, oracle: HashOracle) -> Settlement:
    if contract.status != LOCKED:
        raise AlreadySettled(contract.status)
    if oracle.hash(r) != contract.condition:
        raise BadPreimage("wrong preimage")
    if now >= contract.timeout:
        raise Expired(f"fulfill at {now} >= timeout {contract.timeout}")
    contract.status = FULFILLED
    contract.release = r
    return Settlement("fulfilled", contract.value, r)


def refund(contract: HtlcContract, now: int) -> Settlement:
    if contract.status != LOCKED:
        raise AlreadySettled(contract.status)
    if now < contract.timeout:
        raise NotYetExpired(f"refund at {now} < timeout {contract.timeout}")
    contract.status = REFUNDED
    return Settlement("refunded", contract.value)


# ---------------------------------------------------------------------------
# DLTC (discrete-log time-lock contract)
# ---------------------------------------------------------------------------
#
# Same shape as the HTLC but the condition is a group element Z' and the
# solution a scalar z' with g^{z'} = Z'.  Per-hop blinding with a fresh z
# makes the conditions along a path independent uniform elements.

@dataclass
class DltcContract:
    payer: str
    payee: str
    condition: int               # group element Z'
    value: int
    timeout: int
    status: str = LOCKED
    release: Optional[int] = None

    def to_dict(self) -> dict:
        return {
            "payer": self.payer,
            "payee": self.payee,
            "Z": self.condition,
            "value": self.value,
            "timeout": self.timeout,
            "status": self.status,
        }


def dltc_challenge(rng, group: Group = TEST_GROUP) -> tuple[int, int]:
    """Receiver draws x and publishes X = g^x."""
    x = group.random_scalar(rng)
    return x, group.pow(group.generator, x)


def dltc_blind(big_x: int, z: int, group: Group = TEST_GROUP) -> int:
    """Blind a challenge with a hop offset: Z' = X * g^z."""
    return group.mul(big_x, group.pow(group.generator, z))


def dltc_fulfill(contract: DltcContract, z_prime: int, now: int,
                 group: Group = TEST_GROUP) -> Settlement:
    if contract.status != LOCKED:
        raise AlreadySettled(contract.status)
    if group.pow(group.generator, z_prime) != contract.condition:
        raise BadSolution("g^z' does not match the contract condition")
    if now >= contract.timeout:
        raise Expired(f"fulfill at {now} >= timeout {contract.timeout}")
    contract.status = FULFILLED
    contract.release = z_prime % group.order
    return Settlement("fulfilled", contract.value)


def dltc_refund(contract: DltcContract, now: int) -> Settlement:
    if contract.status != LOCKED:
        raise AlreadySettled(contract.status)
    if now < contract.timeout:
        raise NotYetExpired(f"refund at {now} < timeout {contract.timeout}")
    contract.status = REFUNDED
    return Settlement("refunded", contract.value)


def dltc_derive(z_prime: int, z_out: int, z_in: int, group: Group = TEST_GROUP) -> int:
    """Solution for the incoming contract from the outgoing one's solution.

    The outgoing condition was X·g^{z_out} and the incoming one X·g^{z_in};
    stripping one offset and adding the other moves the solution upstream.
    """
    return (z_prime - z_out + z_in) % group.order
