"""Channel state shared by two users, open/close lifecycle, and the two-party
agreement rule that keeps the endpoint replicas identical.

Each endpoint holds its own replica of a ChannelState; replicas are never
shared memory.  Every mutation travels as a ChannelEvent through an
agreement exchange: both sides learn both proposal sets, sort them with the
same deterministic rule, and apply them through the same effect function, so
after each exchange the serialized replicas are byte-identical.

The merge order is: events from the endpoint with the higher UserId first;
within one proposer accept before abort before forward; ties broken by
decreasing payment identifier (Txid where present, otherwise the numeric
value of the hop condition digest).
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from typing import Callable, Optional

from .contracts import HtlcContract, LOCKED
from .errors import (
    InsufficientCapacity,
    InsufficientFunds,
    InvalidBalance,
    PeerRejected,
    PendingContracts,
    StateDivergence,
)
from .ledger import Ledger, close_entry, open_entry
from .primitives import HashOracle, channel_id

UNIDIRECTIONAL = "Unidirectional"
BIDIRECTIONAL = "Bidirectional"

# Event decisions, in their fixed application order.
ACCEPT = "accept"
ABORT = "abort"
FORWARD = "forward"
_TYPE_ORDER = {ACCEPT: 0, ABORT: 1, FORWARD: 2}


@dataclass(frozen=True)
class ChannelEvent:
    decision: str                 # forward | abort | accept
    payload: dict                 # contract terms or release data (hex-encoded bytes)
    origin: str                   # proposing UserId

    def payment_key(self) -> int:
        """Identifier used for the decreasing-order tiebreak."""
        if "txid" in self.payload and self.payload["txid"] is not None:
            return int(self.payload["txid"])
        return int(self.payload["y"], 16)

    def to_dict(self) -> dict:
        return {"decision": self.decision, "payload": self.payload, "origin": self.origin}


@dataclass
class InflightRecord:
    """Shared bookkeeping for one in-flight or queued payment on a channel."""

    txid: Optional[int]
    y: str                        # outgoing condition digest, hex
    value: int
    timeout: int

    def to_dict(self) -> dict:
        return {"txid": self.txid, "y": self.y, "value": self.value, "timeout": self.timeout}


@dataclass
class ChannelState:
    id: str
    left: str                     # payer side for a unidirectional channel
    right: str
    cap: int                      # remaining unidirectional capacity
    timeout: int
    fee: int
    initial: int = 0
    direction_mode: str = UNIDIRECTIONAL
    # Bidirectional mode balances; unused in unidirectional mode.
    bal_left: int = 0
    bal_right: int = 0
    total: int = 0
    contracts: dict[str, HtlcContract] = field(default_factory=dict)
    cur: list[InflightRecord] = field(default_factory=list)
    queue: list[InflightRecord] = field(default_factory=list)
    settled_to_peer: int = 0      # cumulative value paid left -> right
    closed: bool = False

    def partner_of(self, user: str) -> str:
        return self.right if user == self.left else self.left

    def locked_total(self) -> int:
        return sum(c.value for c in self.contracts.values() if c.status == LOCKED)

    def distribution(self) -> dict[str, int]:
        """Current agreed split, assuming no contracts remain locked."""
        return {self.left: self.initial - self.settled_to_peer,
                self.right: self.settled_to_peer}

    def to_json(self) -> str:
        if self.direction_mode == BIDIRECTIONAL:
            balance = {"L": self.bal_left, "R": self.bal_right, "T": self.total}
        else:
            balance = {"cap": self.cap}
        return json.dumps({
            "id": self.id,
            "endpoints": [self.left, self.right],
            **balance,
            "cur": [r.to_dict() for r in self.cur],
            "queue": [r.to_dict() for r in self.queue],
            "timeout": self.timeout,
            "fee": self.fee,
        }, sort_keys=True)

    def replica_digest(self, oracle: HashOracle) -> bytes:
        """Digest of the full shared state, including contracts; used for the
        byte-equality assertion between endpoint replicas."""
        contracts = {y: c.to_dict() for y, c in sorted(self.contracts.items())}
        blob = self.to_json() + json.dumps(contracts, sort_keys=True) + str(self.settled_to_peer)
        return oracle.hash(blob.encode())


# ---------------------------------------------------------------------------
# Lifecycle
# ---------------------------------------------------------------------------

def open_channel(ledger: Ledger, wallets: dict[str, int], u1: str, u2: str,
                 beta: int, timeout: int, fee: int,
                 peer_authorizes: bool = True) -> ChannelState:
    """Fund a fresh unidirectional channel u1 -> u2 and record it on the ledger."""
    if u1 == u2:
        raise ValueError("channel endpoints must be distinct users")
    if peer_authorizes is not True:
        raise PeerRejected(f"{u2} did not authorize the channel")
    if wallets.get(u1, 0) < beta:
        raise InsufficientFunds(f"{u1} owns {wallets.get(u1, 0)} < deposit {beta}")
    seq = sum(1 for e in ledger.entries
              if e.kind == "ChannelOpen"
              and e.payload["left"] == u1 and e.payload["right"] == u2)
    cid = channel_id(u1, u2, seq)
    ledger.append(open_entry(cid, u1, u2, beta, timeout, fee, metadata=f"fee={fee}"))
    wallets[u1] -= beta
    return ChannelState(id=cid, left=u1, right=u2, cap=beta, timeout=timeout,
                        fee=fee, initial=beta)


def open_bidirectional(ledger: Ledger, wallets: dict[str, int], u1: str, u2: str,
                       deposit_left: int, deposit_right: int, timeout: int,
                       fee: int, peer_authorizes: bool = True) -> ChannelState:
    if u1 == u2:
        raise ValueError("channel endpoints must be distinct users")
    if peer_authorizes is not True:
        raise PeerRejected(f"{u2} did not authorize the channel")
    if wallets.get(u1, 0) < deposit_left:
        raise InsufficientFunds(f"{u1} owns {wallets.get(u1, 0)} < deposit {deposit_left}")
    if wallets.get(u2, 0) < deposit_right:
        raise InsufficientFunds(f"{u2} owns {wallets.get(u2, 0)} < deposit {deposit_right}")
    total = deposit_left + deposit_right
    seq = sum(1 for e in ledger.entries
              if e.kind == "ChannelOpen"
              and e.payload["left"] == u1 and e.payload["right"] == u2)
    cid = channel_id(u1, u2, seq)
    ledger.append(open_entry(cid, u1, u2, total, timeout, fee, metadata=f"fee={fee}"))
    wallets[u1] -= deposit_left
    wallets[u2] -= deposit_right
    return ChannelState(id=cid, left=u1, right=u2, cap=0, timeout=timeout, fee=fee,
                        initial=total, direction_mode=BIDIRECTIONAL,
                        bal_left=deposit_left, bal_right=deposit_right, total=total)


def close_channel(ledger: Ledger, wallets: dict[str, int], state: ChannelState,
                  balances: dict[str, int], peer_authorizes: bool = True) -> None:
    """Cooperative close at the current agreed balance; refuses while any
    contract is still locked (closing mid-contract would burn the held funds)."""
    if peer_authorizes is not True:
        raise PeerRejected("peer did not authorize the close")
    if state.locked_total() > 0 or state.queue:
        raise PendingContracts(f"{state.id} has unresolved contracts")
    if balances != state.distribution():
        raise InvalidBalance(f"{balances} is not the agreed split {state.distribution()}")
    ledger.append(close_entry(state.id, balances))
    for user, share in balances.items():
        wallets[user] = wallets.get(user, 0) + share
    state.closed = True


def bidirectional_update(state: ChannelState, direction: str, v: int) -> None:
    """Shift v across a bidirectional channel: (L, R, T) -> (L-v, R+v, T) for LtoR."""
    if state.direction_mode != BIDIRECTIONAL:
        raise ValueError(f"{state.id} is not bidirectional")
    if direction == "LtoR":
        if state.bal_left < v or state.bal_right + v > state.total:
            raise InsufficientCapacity(f"LtoR {v} on (L={state.bal_left}, R={state.bal_right}, T={state.total})")
        state.bal_left -= v
        state.bal_right += v
    elif direction == "RtoL":
        if state.bal_right < v or state.bal_left + v > state.total:
            raise InsufficientCapacity(f"RtoL {v} on (L={state.bal_left}, R={state.bal_right}, T={state.total})")
        state.bal_right -= v
        state.bal_left += v
    else:
        raise ValueError(f"unknown direction {direction!r}")


# ---------------------------------------------------------------------------
# Agreement
# ---------------------------------------------------------------------------

def merge_events(events_left: list[ChannelEvent], events_right: list[ChannelEvent],
                 left_id: str, right_id: str) -> list[ChannelEvent]:
    """Deterministic merge of the two proposal sets (identical at both ends)."""
    def sort_one(events: list[ChannelEvent]) -> list[ChannelEvent]:
        return sorted(events, key=lambda e: (_TYPE_ORDER[e.decision], -e.payment_key()))

    first, second = (events_right, events_left) if right_id > left_id else (events_left, events_right)
    return sort_one(first) + sort_one(second)


# The effect function receives (state, event) and returns a result record the
# caller can react to; the payment module supplies it.
EffectFn = Callable[[ChannelState, ChannelEvent], dict]


def agree(state: ChannelState, events_left: list[ChannelEvent],
          events_right: list[ChannelEvent],
          apply_fn: EffectFn) -> tuple[list[ChannelEvent], ChannelState, list[tuple[str, dict]]]:
    """One agreement exchange, as a pure function.

    Returns the merged order, the new state (the input is not mutated), and
    the outbound list of (user, result record) notifications that the effect
    function produced.  Both endpoints run this with the same arguments and
    obtain identical results; the simulator runs it once per replica and
    asserts the digests match.
    """
    new_state = copy.deepcopy(state)
    ordered = merge_events(events_left, events_right, state.left, state.right)
    outbound: list[tuple[str, dict]] = []
    for event in ordered:
        result = apply_fn(new_state, event)
        for target in (state.left, state.right):
            outbound.append((target, result))
    return ordered, new_state, outbound


def assert_replicas_match(a: ChannelState, b: ChannelState, oracle: HashOracle) -> None:
    if a.replica_digest(oracle) != b.replica_digest(oracle):
        raise StateDivergence(f"replicas of {a.id} diverged")
