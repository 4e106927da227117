"""Reference model: the network as a single trusted clearinghouse.

Instead of channels, contracts, and messages, one bookkeeper holds every
balance and runs each payment as a short interactive protocol: check
feasibility along the whole path, ask each user on the path whether to let
the payment through, then commit or roll back. Two variants:

* the blocking variant handles one payment at a time and knows nothing of
  identifiers; each hop sees a fresh opaque handle.
* the non-blocking variant threads one totally ordered identifier through
  the whole path, and a payment meeting a saturated link either waits
  behind the current holder (if its identifier is higher) or gives up (if
  lower).  Waiting suffixes resume when a rollback frees the link.

The protocol stack in `payment` and `rayo` must land on the same final
balances this model produces under some assignment of user decisions; the
harness performs that comparison.  Keeping this file free of any import
from the protocol modules is deliberate: the two routes to an answer stay
independent.

Bookkeeping detail that differs from a naive transcription: ledger entries
here record the locked amount of each in-flight hold rather than a residual
snapshot, because with queued payments two holds on one link can roll back
in either order, and residual snapshots would go stale.  Residual capacity
is always recomputed as the opening deposit minus live holds.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .errors import PcnError, ScenarioInvalid

SUCCEEDED = "Succeeded"
ABORTED = "Aborted"
PARTIAL = "Partial"
IN_FLIGHT = "InFlight"
QUEUED = "Queued"


class IdealAbort(PcnError):
    """An operation the clearinghouse refuses outright."""


@dataclass
class IdealEntry:
    """One hold or settled slice of a link's capacity."""

    channel: str
    amount: int                   # coins this entry keeps locked or settled
    timeout: int
    handle: Optional[int] = None  # None while in flight, set once committed
    txid: Optional[int] = None
    owner: Optional[int] = None   # submitting payment, for rollback bookkeeping
    position: int = 0             # hop index within the owning payment

    @property
    def committed(self) -> bool:
        return self.handle is not None


@dataclass
class WaitingSuffix:
    """Remaining hops of a payment parked at a saturated link."""

    txid: int
    channels: list[str]
    value: int
    timeouts: list[int]

    def to_dict(self) -> dict:
        return {"txid": self.txid, "channels": list(self.channels),
                "value": self.value, "timeouts": list(self.timeouts)}


@dataclass
class IdealState:
    board: list = field(default_factory=list)          # append-only; len = time
    entries: list[IdealEntry] = field(default_factory=list)
    closed: set = field(default_factory=set)
    waiting: list[WaitingSuffix] = field(default_factory=list)
    byzantine: set = field(default_factory=set)        # links exempt from checks
    _handles: "itertools.count" = field(default_factory=lambda: itertools.count(1))

    def now(self) -> int:
        return len(self.board)

    def next_handle(self) -> int:
        return next(self._handles)

    def open_record(self, cid: str) -> Optional[dict]:
        for record in self.board:
            if record.get("kind") == "open" and record.get("cid") == cid:
                return record
        return None

    def residual(self, cid: str) -> int:
        record = self.open_record(cid)
        if record is None:
            raise IdealAbort(f"unknown link {cid}")
        return record["value"] - sum(e.amount for e in self.entries
                                     if e.channel == cid)

    def paid_through(self, cid: str) -> int:
        return sum(e.amount for e in self.entries
                   if e.channel == cid and e.committed)

    def balances(self) -> dict:
        out = {}
        for record in self.board:
            if record.get("kind") != "open":
                continue
            cid = record["cid"]
            out[cid] = {"capacity": self.residual(cid),
                        "paid_to_peer": self.paid_through(cid)}
        return out


def tick(state: IdealState) -> None:
    """Advance model time by one board entry."""
    state.board.append({"kind": "padding"})


def ideal_open(state: IdealState, cid: str, value: int, timeout: int, fee: int,
               authorize: bool = True) -> int:
    """Register a link with deposit `value`; the peer may refuse."""
    if not cid or value <= 0:
        raise IdealAbort(f"malformed open for {cid!r}")
    if state.open_record(cid) is not None:
        raise IdealAbort(f"duplicate link {cid}")
    if not authorize:
        raise IdealAbort(f"peer refused {cid}")
    handle = state.next_handle()
    state.board.append({"kind": "open", "cid": cid, "value": value,
                        "timeout": timeout, "fee": fee, "handle": handle})
    return handle


def ideal_close(state: IdealState, cid: str) -> dict:
    """Settle a link onto the board; allowed once its timeouts have passed."""
    record = state.open_record(cid)
    if record is None:
        raise IdealAbort(f"unknown link {cid}")
    committed = [e for e in state.entries if e.channel == cid and e.committed]
    inner = max((e.timeout for e in committed), default=record["timeout"])
    if cid in state.closed or record["timeout"] > state.now() or inner > state.now():
        raise IdealAbort(f"cannot close {cid} yet")
    settlement = {"kind": "close", "cid": cid, "residual": state.residual(cid),
                  "paid": state.paid_through(cid)}
    state.board.append(settlement)
    state.closed.add(cid)
    return settlement


def required_amounts(state: IdealState, path: Sequence[str], value: int) -> list[int]:
    """Coins each link must hold: the payment plus every fee still owed
    downstream of that link."""
    fees = []
    for cid in path:
        record = state.open_record(cid)
        if record is None:
            raise IdealAbort(f"unknown link {cid}")
        fees.append(record["fee"])
    return [value + sum(fees[i + 1:]) for i in range(len(path))]


@dataclass
class PayOutcome:
    status: str
    reason: Optional[str] = None
    at: Optional[int] = None          # failing hop index, when relevant
    handles: list = field(default_factory=list)
    notifications: list = field(default_factory=list)

    def succeeded(self) -> bool:
        return self.status == SUCCEEDED


def _feasible(state: IdealState, cid: str, amount: int) -> bool:
    if cid in state.closed:
        return False
    if cid in state.byzantine:
        return True
    return state.residual(cid) >= amount


def ideal_pay(state: IdealState, path: Sequence[str], value: int,
              timeouts: Sequence[int],
              decisions: Optional[Sequence[bool]] = None) -> PayOutcome:
    """One blocking payment, start to finish.

    `decisions[i]` is the reply of the user on the receiving side of
    `path[i]`; omitted means everyone lets the payment through.  A refusal
    at hop j rolls back every hold up to and including j and commits the
    rest, so the refusing user covers the downstream amount out of pocket.
    """
    k = len(path)
    if k == 0 or len(timeouts) != k:
        raise IdealAbort("path and timeout vector disagree")
    if decisions is None:
        decisions = [True] * k
    if len(decisions) != k:
        raise IdealAbort("decision vector length mismatch")

    amounts = required_amounts(state, path, value)
    owner = state.next_handle()
    handles = [state.next_handle() for _ in range(k)]
    notifications = []
    added: list[IdealEntry] = []
    for i, cid in enumerate(path):
        notifications.append(
            {"to": i, "handle": handles[i],
             "next_handle": handles[i + 1] if i + 1 < k else None,
             "link": cid, "amount": amounts[i], "timeout": timeouts[i]})
        if i > 0 and timeouts[i - 1] < timeouts[i]:
            for entry in added:
                state.entries.remove(entry)
            return PayOutcome(ABORTED, reason="timeout", at=i,
                              notifications=notifications)
        if not _feasible(state, cid, amounts[i]):
            for entry in added:
                state.entries.remove(entry)
            return PayOutcome(ABORTED, reason="capacity", at=i,
                              notifications=notifications)
        entry = IdealEntry(channel=cid, amount=amounts[i], timeout=timeouts[i],
                           owner=owner, position=i)
        state.entries.append(entry)
        added.append(entry)

    refusals = [i for i, ok in enumerate(decisions) if not ok]
    j = max(refusals) if refusals else None
    if j is None:
        for i, entry in enumerate(added):
            entry.handle = handles[i]
            notifications.append({"to": i, "success": handles[i]})
        return PayOutcome(SUCCEEDED, handles=handles, notifications=notifications)
    for i in range(j, -1, -1):
        state.entries.remove(added[i])
        notifications.append({"to": i, "refused": handles[i]})
    for i in range(j + 1, k):
        added[i].handle = handles[i]
        notifications.append({"to": i, "success": handles[i]})
    status = ABORTED if j == k - 1 else PARTIAL
    return PayOutcome(status, reason="refused", at=j, handles=handles,
                      notifications=notifications)


# ---------------------------------------------------------------------------
# Non-blocking variant
# ---------------------------------------------------------------------------

@dataclass
class _NbPayment:
    txid: int
    path: list[str]
    value: int
    timeouts: list[int]
    amounts: list[int]
    entries: list[IdealEntry] = field(default_factory=list)
    queued_at: Optional[int] = None
    status: str = IN_FLIGHT
    reason: Optional[str] = None


class NonblockingModel:
    """The clearinghouse extended with the wait-or-yield discipline.

    Submissions either lock the whole path (awaiting decisions), park a
    suffix behind a saturated link, or abort under the identifier rule.
    Rollbacks re-run parked suffixes, highest identifier first.
    """

    def __init__(self, state: IdealState):
        self.state = state
        self.payments: dict[int, _NbPayment] = {}

    # -- queries -----------------------------------------------------------

    def status_of(self, txid: int) -> str:
        return self.payments[txid].status

    def outcome(self, txid: int) -> PayOutcome:
        p = self.payments[txid]
        return PayOutcome(p.status, reason=p.reason, at=p.queued_at)

    def _inflight_on(self, cid: str) -> list[IdealEntry]:
        return [e for e in self.state.entries
                if e.channel == cid and not e.committed and e.txid is not None]

    # -- submission --------------------------------------------------------

    def submit(self, txid: int, path: Sequence[str], value: int,
               timeouts: Sequence[int]) -> str:
        if txid in self.payments:
            raise IdealAbort(f"duplicate identifier {txid}")
        if len(path) == 0 or len(timeouts) != len(path):
            raise IdealAbort("path and timeout vector disagree")
        payment = _NbPayment(txid=txid, path=list(path), value=value,
                             timeouts=list(timeouts),
                             amounts=required_amounts(self.state, path, value))
        self.payments[txid] = payment
        self._advance(payment, start=0)
        return payment.status

    def _advance(self, payment: _NbPayment, start: int) -> None:
        """Lock hops from `start` on, stopping at saturation or the end."""
        for i in range(start, len(payment.path)):
            cid = payment.path[i]
            amount = payment.amounts[i]
            if i > 0 and payment.timeouts[i - 1] < payment.timeouts[i]:
                self._rollback(payment, reason="timeout")
                return
            if not _feasible(self.state, cid, amount):
                holders = self._inflight_on(cid)
                if any(payment.txid > e.txid for e in holders):
                    payment.queued_at = i
                    payment.status = QUEUED
                    self.state.waiting.append(WaitingSuffix(
                        txid=payment.txid, channels=payment.path[i:],
                        value=payment.value, timeouts=payment.timeouts[i:]))
                    return
                self._rollback(payment,
                               reason="capacity" if not holders else "txid-order")
                return
            entry = IdealEntry(channel=cid, amount=amount,
                               timeout=payment.timeouts[i], txid=payment.txid,
                               owner=payment.txid, position=i)
            self.state.entries.append(entry)
            payment.entries.append(entry)
        payment.queued_at = None
        payment.status = IN_FLIGHT

    # -- decisions ---------------------------------------------------------

    def decide(self, txid: int, decisions: Optional[Sequence[bool]] = None) -> str:
        payment = self.payments[txid]
        if payment.status != IN_FLIGHT or payment.queued_at is not None:
            raise IdealAbort(f"{txid} is not awaiting decisions")
        k = len(payment.path)
        if decisions is None:
            decisions = [True] * k
        refusals = [i for i, ok in enumerate(decisions) if not ok]
        j = max(refusals) if refusals else None
        if j is None:
            for entry in payment.entries:
                entry.handle = txid
            payment.status = SUCCEEDED
            return payment.status
        for i in range(j, -1, -1):
            self.state.entries.remove(payment.entries[i])
        payment.entries = payment.entries[j + 1:]
        for entry in payment.entries:
            entry.handle = txid
        payment.status = ABORTED if j == k - 1 else PARTIAL
        payment.reason = "refused"
        self._resume_waiting()
        return payment.status

    # -- wait-list machinery -----------------------------------------------

    def _rollback(self, payment: _NbPayment, reason: str) -> None:
        for entry in reversed(payment.entries):
            self.state.entries.remove(entry)
        payment.entries = []
        payment.status = ABORTED
        payment.reason = reason
        self._resume_waiting()

    def _resume_waiting(self) -> None:
        """Re-run parked suffixes whose head link now has room, highest
        identifier first.  Each resume locks at least its head hop, so any
        re-park lands strictly deeper and the loop terminates."""
        while True:
            ready = []
            for suffix in self.state.waiting:
                payment = self.payments[suffix.txid]
                amount = payment.amounts[payment.queued_at]
                head = suffix.channels[0]
                if head in self.state.byzantine or self.state.residual(head) >= amount:
                    ready.append(suffix)
            if not ready:
                return
            suffix = max(ready, key=lambda s: s.txid)
            self.state.waiting.remove(suffix)
            payment = self.payments[suffix.txid]
            start = payment.queued_at
            payment.queued_at = None
            payment.status = IN_FLIGHT
            self._advance(payment, start=start)

    def finalize(self, decisions_by_txid: Optional[dict] = None) -> dict:
        """Drain the wait list and decide whatever is still pending.

        Parked payments that never resume are aborted, lowest identifier
        first; each abort frees its prefix, which may resume others.  Any
        payment left awaiting decisions is decided with the supplied vector,
        everyone agreeing by default.  Returns final statuses by identifier.
        """
        decisions_by_txid = decisions_by_txid or {}
        while True:
            pending = sorted(t for t, p in self.payments.items()
                             if p.status == IN_FLIGHT and p.queued_at is None)
            for txid in pending:
                self.decide(txid, decisions_by_txid.get(txid))
            queued = sorted(t for t, p in self.payments.items()
                            if p.status == QUEUED)
            if not queued:
                if not any(p.status == IN_FLIGHT for p in self.payments.values()):
                    break
                continue
            victim = self.payments[queued[0]]
            for suffix in list(self.state.waiting):
                if suffix.txid == victim.txid:
                    self.state.waiting.remove(suffix)
            self._rollback(victim, reason="starved")
        return {t: p.status for t, p in self.payments.items()}


# ---------------------------------------------------------------------------
# Scenario-level drivers (shared metrics schema with the protocol runner)
# ---------------------------------------------------------------------------

def state_from_channels(channels: Sequence[dict],
                        byzantine: Sequence[str] = ()) -> IdealState:
    """Build a model state holding the given links.

    Each channel dict needs cid, value (deposit), timeout, fee."""
    state = IdealState(byzantine=set(byzantine))
    for spec in channels:
        try:
            ideal_open(state, spec["cid"], spec["value"], spec["timeout"],
                       spec["fee"])
        except KeyError as missing:
            raise ScenarioInvalid(f"channel record lacks {missing}") from None
    return state
