"""Multi-hop payment protocol over hash-locked channels.

The sender plans the whole payment: per-hop amounts (each intermediary keeps
its forwarding fee), per-hop timeouts (each one round-trip shorter than the
previous, so an upstream contract always outlives its downstream one), and
the chain of lock conditions produced by `contracts.setup_htlc`.  The hop
data reaches every intermediary over the anonymous transport before any
channel is touched.

Locks then advance strictly hop by hop: a node offers its outgoing contract
only after its incoming contract is in place, so at no point does an honest
node have money locked downstream without matching cover upstream.  Once the
receiver's contract lands and her margin check passes, she releases her
preimage and the settlement wave runs back: each fulfilled outgoing contract
lets the payer derive the preimage for its own incoming one.  Any failed
check turns into an abort on the node's incoming channel instead, cancelling
contracts back to the sender; nothing downstream of a refusal was ever
locked, so an abort leaves every balance untouched.

All channel mutations go through `channel_effect`, the single function both
endpoint replicas apply during agreement.  In non-blocking mode it defers the
saturated-capacity outcome to the queue discipline in `rayo`.

Status strings follow the payment lifecycle: InFlight, Queued (waiting in
some channel's queue), Succeeded, Aborted with a reason tag.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from . import rayo
from .channel import ABORT, ACCEPT, FORWARD, ChannelEvent, InflightRecord
from .contracts import (FULFILLED, LOCKED, HtlcContract, derive_upstream, fulfill,
                        lock, refund, setup_htlc, verify_hop)
from .errors import (AlreadySettled, BadPreimage, Expired, InsufficientCapacity,
                     PathInvalid, UnknownTxid)
from .ledger import fulfill_entry, refund_entry
from .primitives import from_hex, sample_preimage, to_hex
from .simnet import Node, Simulator

MODE_FULGOR = "fulgor"
MODE_RAYO = "rayo"

IN_FLIGHT = "InFlight"
QUEUED = "Queued"
SUCCEEDED = "Succeeded"
ABORTED = "Aborted"


# ---------------------------------------------------------------------------
# Planning helpers
# ---------------------------------------------------------------------------

def route_amounts(value: int, fees: list[int]) -> list[int]:
    """Lock amount per channel: the receiver gets exactly `value`, and every
    channel upstream adds the forwarding fees of the channels after it."""
    return [value + sum(fees[i + 1:]) for i in range(len(fees))]


def route_timeouts(now: int, hops: int, delta: int) -> list[int]:
    """Per-channel timeouts, each `delta` below the previous.

    The base is sized for the full round trip: the lock wave takes one round
    per hop, the release wave roughly one more, and every hop still needs a
    positive claim margin when the release reaches it.  2*hops+1 gaps above
    `now` leave all of that with room to spare.
    """
    base = now + delta * (2 * hops + 1)
    return [base - (i + 1) * delta for i in range(hops)]


@dataclass
class HopMessage:
    """Per-hop payload of the anonymous dispatch.

    Intermediaries get the full tuple; the receiver's form carries only her
    preimage share, condition, and incoming-contract terms.
    """

    form: str                     # "intermediate" | "receiver"
    x: bytes
    y_in: bytes
    cid_in: str
    value: int                    # intermediaries: outgoing amount; receiver: incoming
    t_in: int
    y_out: Optional[bytes] = None
    cid_out: Optional[str] = None
    t_out: Optional[int] = None
    proof: Optional[bytes] = None
    txid: Optional[int] = None

    def to_payload(self) -> dict:
        payload = {
            "form": self.form,
            "x": to_hex(self.x),
            "y_in": to_hex(self.y_in),
            "cid_in": self.cid_in,
            "value": self.value,
            "t_in": self.t_in,
        }
        if self.form == "intermediate":
            payload.update({"y_out": to_hex(self.y_out), "cid_out": self.cid_out,
                            "t_out": self.t_out, "proof": to_hex(self.proof)})
        if self.txid is not None:
            payload["txid"] = self.txid
        return payload

    @classmethod
    def from_payload(cls, payload: dict) -> Optional["HopMessage"]:
        try:
            form = payload["form"]
            common = dict(form=form, x=from_hex(payload["x"]),
                          y_in=from_hex(payload["y_in"]), cid_in=payload["cid_in"],
                          value=int(payload["value"]), t_in=int(payload["t_in"]),
                          txid=payload.get("txid"))
            if form == "intermediate":
                return cls(y_out=from_hex(payload["y_out"]), cid_out=payload["cid_out"],
                           t_out=int(payload["t_out"]), proof=from_hex(payload["proof"]),
                           **common)
            if form == "receiver":
                return cls(**common)
        except (KeyError, TypeError, ValueError):
            return None
        return None


@dataclass
class Payment:
    """Harness-side record of one payment; nodes never read each other's."""

    pid: str
    mode: str
    txid: Optional[int]
    path: list[str]               # channel ids, sender side first
    users: list[str]
    value: int
    amounts: list[int]
    timeouts: list[int]
    conditions: list[str]         # per-channel condition digests, hex
    status: str = IN_FLIGHT
    reason: Optional[str] = None
    queued_at: Optional[int] = None
    issue_round: Optional[int] = None
    terminal_round: Optional[int] = None

    def terminal(self) -> bool:
        return self.status in (SUCCEEDED, ABORTED)

    def status_label(self) -> str:
        if self.status == ABORTED:
            return f"Aborted({self.reason})"
        if self.status == QUEUED:
            return f"Queued({self.queued_at})"
        return self.status

    def to_dict(self) -> dict:
        record = {
            "path": list(self.path),
            "value": self.value,
            "status": self.status_label(),
            "hops": [{"value": v, "timeout": t, "condition": y}
                     for v, t, y in zip(self.amounts, self.timeouts, self.conditions)],
            "rounds": (None if self.terminal_round is None or self.issue_round is None
                       else self.terminal_round - self.issue_round),
        }
        if self.mode == MODE_RAYO:
            record["txid"] = self.txid
        return record


def mark(sim: Simulator, pid: str, status: str, reason: Optional[str] = None,
         queued_at: Optional[int] = None) -> None:
    payment = sim.payments.get(pid)
    if payment is None or payment.terminal():
        return
    payment.status = status
    payment.reason = reason
    payment.queued_at = queued_at
    if payment.terminal():
        payment.terminal_round = sim.round


# ---------------------------------------------------------------------------
# The shared channel-event effect
# ---------------------------------------------------------------------------

def channel_effect(state, event: ChannelEvent, *, now: int, oracle, mode: str,
                   delta: int, byzantine: bool = False) -> dict:
    """Apply one agreed event to a channel replica and report what happened.

    Both endpoint replicas run this with identical inputs, so any
    nondeterminism here would show up as replica divergence; everything is a
    pure function of (state, event, now).
    """
    payload = event.payload
    y_hex = payload.get("y")
    if not isinstance(y_hex, str):
        return {"error": "malformed"}

    if event.decision == FORWARD:
        if y_hex in state.contracts:
            return {"error": "duplicate"}
        try:
            value = int(payload["value"])
            timeout = int(payload["timeout"])
        except (KeyError, TypeError, ValueError):
            return {"error": "malformed"}
        if value <= 0:
            return {"error": "malformed"}
        txid = payload.get("txid")
        if value > state.cap and not byzantine:
            if mode == MODE_RAYO:
                record = InflightRecord(txid=txid, y=y_hex, value=value, timeout=timeout)
                if rayo.on_forward_saturated(state, record) == "queued":
                    return {"queued": True, "y": y_hex}
                return {"error": "capacity" if not state.cur else "txid-order"}
            return {"error": "capacity"}
        contract = HtlcContract(payer=state.left, payee=state.right,
                                condition=from_hex(y_hex), value=value, timeout=timeout)
        if value > state.cap:
            # Byzantine channel: both endpoints assert capacity they do not
            # have, and nothing in the protocol can call the lie out.
            state.cap -= value
            state.contracts[y_hex] = contract
        else:
            lock(state, contract)
        if mode == MODE_RAYO:
            state.cur.append(InflightRecord(txid=txid, y=y_hex, value=value,
                                            timeout=timeout))
        return {"applied": FORWARD, "y": y_hex, "value": value}

    if event.decision == ACCEPT:
        contract = state.contracts.get(y_hex)
        if contract is None:
            return {"error": "unknown"}
        try:
            release = from_hex(payload["release"])
        except (KeyError, TypeError, ValueError):
            return {"error": "malformed"}
        try:
            fulfill(contract, release, now, oracle)
        except BadPreimage:
            return {"error": "bad-preimage"}
        except Expired:
            return {"error": "expired"}
        except AlreadySettled:
            return {"error": "settled"}
        state.settled_to_peer += contract.value
        result = {"applied": ACCEPT, "y": y_hex, "value": contract.value}
        if mode == MODE_RAYO and payload.get("txid") is not None:
            try:
                rayo.on_accept_cleanup(state, payload["txid"])
            except UnknownTxid:
                result["warning"] = "unknown-txid"
        return result

    if event.decision == ABORT:
        contract = state.contracts.get(y_hex)
        if contract is None:
            # Defensive: an abort can only race a queued entry, never a lock.
            before = len(state.queue)
            state.queue = [r for r in state.queue if r.y != y_hex]
            return {"applied": ABORT, "y": y_hex, "noop": before == len(state.queue)}
        if contract.status != LOCKED:
            return {"error": "settled"}
        # Cooperative cancel: both parties agreed, so no timeout wait applies.
        contract.status = "Refunded"
        state.cap += contract.value
        result = {"applied": ABORT, "y": y_hex}
        if mode == MODE_RAYO:
            result.update(rayo.on_abort_requeue(state, payload.get("txid"), now, delta))
        return result

    return {"error": "malformed"}


# ---------------------------------------------------------------------------
# Bookkeeping: protocol events -> payment statuses
# ---------------------------------------------------------------------------

def update_bookkeeping(sim: Simulator, cid: str, event: ChannelEvent,
                       result: dict) -> None:
    """Map applied channel events onto the harness-side payment table."""

    def locate(y_hex: str) -> tuple[Optional[str], Optional[int]]:
        return sim.payment_index.get(y_hex, (None, None))

    y_hex = event.payload.get("y")
    pid, idx = locate(y_hex) if isinstance(y_hex, str) else (None, None)
    if pid is not None:
        if result.get("queued"):
            mark(sim, pid, QUEUED, queued_at=idx)
        elif result.get("applied") == ACCEPT and idx == 0:
            mark(sim, pid, SUCCEEDED)
        elif result.get("applied") == ABORT and idx == 0:
            mark(sim, pid, ABORTED, reason=event.payload.get("reason", "abort"))
        elif result.get("error") in ("capacity", "txid-order") and idx == 0:
            mark(sim, pid, ABORTED, reason=result["error"])
    dequeued = result.get("dequeued")
    if dequeued is not None:
        dq_pid, dq_idx = locate(dequeued.y)
        if dq_pid is not None:
            mark(sim, dq_pid, IN_FLIGHT)
    for record in result.get("eroded") or ():
        er_pid, er_idx = locate(record.y)
        if er_pid is not None and er_idx == 0:
            mark(sim, er_pid, ABORTED, reason="margin")


# ---------------------------------------------------------------------------
# Node logic
# ---------------------------------------------------------------------------

@dataclass
class HopRecord:
    x: bytes
    y_in: bytes
    y_out: bytes
    proof: bytes
    cid_in: str
    cid_out: str
    value_out: int
    t_in: int
    t_out: int
    txid: Optional[int] = None


@dataclass
class ReceiverRecord:
    x: bytes
    y: bytes
    cid: str
    value: int
    timeout: int
    txid: Optional[int] = None


@dataclass
class SenderRecord:
    pid: str
    cid: str
    y: bytes
    txid: Optional[int] = None


class PaymentNode(Node):
    """Protocol behavior of one user: sender, intermediary, and receiver roles
    all live here; which one applies is decided by what the node has stored
    for the condition digest an event names."""

    def __init__(self, user: str):
        super().__init__(user)
        self.hop_records: dict[str, HopRecord] = {}        # keyed by y_in hex
        self.by_out: dict[str, str] = {}                   # y_out hex -> y_in hex
        self.receiver_records: dict[str, ReceiverRecord] = {}
        self.sent: dict[str, SenderRecord] = {}            # keyed by first y hex
        self.pending_accepts: dict[tuple[str, str], dict] = {}

    # -- sender ------------------------------------------------------------

    def on_issue(self, sim: Simulator, env) -> None:
        payload = env.payload
        try:
            self.pay_sender(sim, payload["payment"], payload["path"],
                            int(payload["value"]), payload.get("nonce"))
        except InsufficientCapacity:
            pass            # recorded as an aborted payment; nothing was sent

    def pay_sender(self, sim: Simulator, pid: str, path: list[str], value: int,
                   nonce: Optional[int] = None) -> str:
        """Plan, set up, and launch a payment along `path` (channel ids).

        Returns the first-hop condition digest as handle.  A first channel
        too small for the total raises InsufficientCapacity before anything
        leaves this node; the payment is recorded as aborted."""
        users = self._chain_users(sim, path)
        hops = len(path)
        fees = [sim.channels[cid].replica_left.fee for cid in path]
        amounts = route_amounts(value, fees)
        timeouts = route_timeouts(sim.now(), hops, sim.delta)
        setup = setup_htlc(hops, sim.rng, sim.oracle, sim.proofs)
        txid = None
        if sim.mode == MODE_RAYO:
            if nonce is None:
                nonce = sim.rng.getrandbits(64)
            txid = rayo.txid_assign(sim.oracle, self.user, nonce)

        conditions = [to_hex(h.y) for h in setup.hops]
        payment = Payment(pid=pid, mode=sim.mode, txid=txid, path=list(path),
                          users=users, value=value, amounts=amounts,
                          timeouts=timeouts, conditions=conditions,
                          issue_round=sim.round)
        sim.payments[pid] = payment
        for idx, y_hex in enumerate(conditions):
            sim.payment_index[y_hex] = (pid, idx)

        first = sim.channel_view(path[0], self.user)
        misreporting = self.policy is not None and self.policy.misreport_capacity
        if amounts[0] > first.cap and not misreporting:
            mark(sim, pid, ABORTED, reason="sender-capacity")
            raise InsufficientCapacity(
                f"{path[0]}: need {amounts[0]}, capacity {first.cap}")

        for i in range(1, hops):
            message = HopMessage(form="intermediate", x=setup.hops[i - 1].x,
                                 y_in=setup.hops[i - 1].y, cid_in=path[i - 1],
                                 value=amounts[i], t_in=timeouts[i - 1],
                                 y_out=setup.hops[i].y, cid_out=path[i],
                                 t_out=timeouts[i], proof=setup.hops[i - 1].proof,
                                 txid=txid)
            sim.send(self.user, users[i], "hop", message.to_payload(), anonymous=True)
        last = HopMessage(form="receiver", x=setup.hops[-1].x, y_in=setup.hops[-1].y,
                          cid_in=path[-1], value=amounts[-1], t_in=timeouts[-1],
                          txid=txid)
        sim.send(self.user, users[-1], "hop", last.to_payload(), anonymous=True)

        y0 = conditions[0]
        self.sent[y0] = SenderRecord(pid=pid, cid=path[0], y=setup.hops[0].y, txid=txid)
        sim.propose(self.user, path[0], ChannelEvent(
            FORWARD, {"y": y0, "value": amounts[0], "timeout": timeouts[0],
                      "txid": txid}, self.user))
        return y0

    def _chain_users(self, sim: Simulator, path: list[str]) -> list[str]:
        if not path:
            raise PathInvalid("empty path")
        users = []
        for i, cid in enumerate(path):
            pair = sim.channels.get(cid)
            if pair is None:
                raise PathInvalid(f"unknown channel {cid}")
            if i == 0:
                if pair.left != self.user:
                    raise PathInvalid(f"path does not start at {self.user}")
                users.append(pair.left)
            elif pair.left != users[-1]:
                raise PathInvalid(f"{cid} does not continue the chain")
            users.append(pair.right)
        return users

    # -- hop data (anonymous dispatch) --------------------------------------

    def on_hop(self, sim: Simulator, env) -> None:
        message = HopMessage.from_payload(env.payload)
        if message is None:
            return
        if message.form == "receiver":
            self.receiver_records[to_hex(message.y_in)] = ReceiverRecord(
                x=message.x, y=message.y_in, cid=message.cid_in,
                value=message.value, timeout=message.t_in, txid=message.txid)
            return
        y_in_hex = to_hex(message.y_in)
        self.hop_records[y_in_hex] = HopRecord(
            x=message.x, y_in=message.y_in, y_out=message.y_out,
            proof=message.proof, cid_in=message.cid_in, cid_out=message.cid_out,
            value_out=message.value, t_in=message.t_in, t_out=message.t_out,
            txid=message.txid)
        self.by_out[to_hex(message.y_out)] = y_in_hex

    # -- reacting to agreed channel events ----------------------------------

    def on_channel_event(self, sim: Simulator, cid: str, event: ChannelEvent,
                         result: dict) -> None:
        pair = sim.channels[cid]
        i_am_payer = (self.user == pair.left)
        y_hex = event.payload.get("y")
        applied = result.get("applied")
        error = result.get("error")

        if applied == FORWARD and not i_am_payer:
            self._payee_on_lock(sim, cid, y_hex)
        elif error in ("capacity", "txid-order") and event.decision == FORWARD \
                and i_am_payer and event.origin == self.user:
            self._abort_upstream_of(sim, y_hex, reason=error)
        elif applied == ACCEPT:
            if i_am_payer:
                self._payer_on_accept(sim, y_hex, event.payload.get("release"))
            else:
                self.pending_accepts.pop((cid, y_hex), None)
        elif applied == ABORT and i_am_payer:
            self._abort_upstream_of(sim, y_hex,
                                    reason=event.payload.get("reason", "abort"))
        self._handle_queue_motion(sim, cid, result, i_am_payer)

    def on_queue_update(self, sim: Simulator, cid: str, result: dict) -> None:
        pair = sim.channels[cid]
        self._handle_queue_motion(sim, cid, result, self.user == pair.left)

    def _handle_queue_motion(self, sim: Simulator, cid: str, result: dict,
                             i_am_payer: bool) -> None:
        dequeued = result.get("dequeued")
        if dequeued is not None and not i_am_payer:
            self._payee_on_lock(sim, cid, dequeued.y)
        if i_am_payer:
            for record in result.get("eroded") or ():
                self._abort_upstream_of(sim, record.y, reason="margin")

    # -- payee side: the lock wave ------------------------------------------

    def _payee_on_lock(self, sim: Simulator, cid: str, y_hex: str) -> None:
        if self.policy is not None and self.policy.withhold_release:
            return
        if y_hex in self.receiver_records:
            self.pay_receiver(sim, cid, y_hex)
        elif y_hex in self.hop_records:
            self.pay_intermediate(sim, cid, y_hex)
        else:
            self._propose_abort(sim, cid, y_hex, "no-data", None)

    def pay_intermediate(self, sim: Simulator, cid: str, y_hex: str) -> None:
        """Forward-or-abort decision once this node's incoming lock is agreed."""
        record = self.hop_records[y_hex]
        if self.policy is not None and self.policy.early_abort:
            self._propose_abort(sim, cid, y_hex, "adversary", record.txid)
            return
        if self.policy is not None and self.policy.forge_preimage:
            junk = sample_preimage(sim.rng)
            sim.propose(self.user, cid, ChannelEvent(
                ACCEPT, {"y": y_hex, "release": to_hex(junk), "txid": record.txid},
                self.user))
            return

        incoming = sim.channel_view(cid, self.user).contracts.get(y_hex)
        out_pair = sim.channels.get(record.cid_out)
        reason = None
        if incoming is None or record.cid_in != cid:
            reason = "no-data"
        elif incoming.timeout != record.t_in or record.t_out != record.t_in - sim.delta:
            reason = "timeout"
        elif out_pair is None or out_pair.left != self.user:
            reason = "path"
        elif incoming.value - record.value_out != out_pair.replica_left.fee:
            reason = "fee"
        elif not verify_hop((record.y_out, record.y_in, record.x), record.proof,
                            sim.proofs):
            reason = "proof"
        if reason is not None:
            self._propose_abort(sim, cid, y_hex, reason, record.txid)
            return

        out_view = out_pair.replica_for(self.user)
        if record.value_out > out_view.cap and sim.mode != MODE_RAYO:
            self._propose_abort(sim, cid, y_hex, "capacity", record.txid)
            return
        # In non-blocking mode the saturated case is proposed anyway; the
        # effect function queues it or rejects it under the identifier rule.
        sim.propose(self.user, record.cid_out, ChannelEvent(
            FORWARD, {"y": to_hex(record.y_out), "value": record.value_out,
                      "timeout": record.t_out, "txid": record.txid}, self.user))

    def pay_receiver(self, sim: Simulator, cid: str, y_hex: str) -> None:
        """Release-or-abort decision for the receiver's incoming lock."""
        record = self.receiver_records[y_hex]
        incoming = sim.channel_view(cid, self.user).contracts.get(y_hex)
        now = sim.now()
        if incoming is None or record.cid != cid:
            self._propose_abort(sim, cid, y_hex, "no-data", record.txid)
            return
        if sim.oracle.hash(record.x) != record.y or incoming.value != record.value:
            self._propose_abort(sim, cid, y_hex, "receiver-check", record.txid)
            return
        if incoming.timeout <= now + sim.delta:
            self._propose_abort(sim, cid, y_hex, "margin", record.txid)
            return
        if self.policy is not None and self.policy.forge_preimage:
            release = sample_preimage(sim.rng)
        else:
            release = record.x
        sim.propose(self.user, cid, ChannelEvent(
            ACCEPT, {"y": y_hex, "release": to_hex(release), "txid": record.txid},
            self.user))
        self.pending_accepts[(cid, y_hex)] = {"round": sim.round, "release": release}

    # -- payer side: settlement and abort waves ------------------------------

    def _payer_on_accept(self, sim: Simulator, y_hex: str, release_hex: str) -> None:
        if release_hex is None:
            return
        release = from_hex(release_hex)
        y_in_hex = self.by_out.get(y_hex)
        if y_in_hex is not None:
            record = self.hop_records[y_in_hex]
            upstream = derive_upstream(record.x, release, record.y_out, sim.oracle)
            sim.propose(self.user, record.cid_in, ChannelEvent(
                ACCEPT, {"y": y_in_hex, "release": to_hex(upstream),
                         "txid": record.txid}, self.user))
            self.pending_accepts[(record.cid_in, y_in_hex)] = {
                "round": sim.round, "release": upstream}
        # A sender's own first-hop contract being accepted needs no further
        # action; bookkeeping marks the payment Succeeded.

    def _abort_upstream_of(self, sim: Simulator, y_out_hex: str, reason: str) -> None:
        y_in_hex = self.by_out.get(y_out_hex)
        if y_in_hex is None:
            return                # sender-side: bookkeeping already recorded it
        record = self.hop_records[y_in_hex]
        self._propose_abort(sim, record.cid_in, y_in_hex, reason, record.txid)

    def _propose_abort(self, sim: Simulator, cid: str, y_hex: str, reason: str,
                       txid: Optional[int]) -> None:
        sim.propose(self.user, cid, ChannelEvent(
            ABORT, {"y": y_hex, "reason": reason, "txid": txid}, self.user))

    # -- enforcement and recovery --------------------------------------------

    def on_settlement_phase(self, sim: Simulator) -> None:
        """Claim on the ledger when a cooperative accept went unanswered.

        An accept proposed in round r lands in round r+1 or not at all; a
        partner who stays silent past that is treated as unresponsive and the
        payee takes the contract to the ledger while its margin lasts."""
        stale = [key for key, info in self.pending_accepts.items()
                 if sim.round > info["round"]]
        for key in sorted(stale):
            cid, y_hex = key
            info = self.pending_accepts.pop(key)
            view = sim.channel_view(cid, self.user)
            contract = view.contracts.get(y_hex)
            if contract is not None and contract.status == LOCKED:
                enforce_fulfill(sim, cid, y_hex, info["release"])

    def on_catch_up(self, sim: Simulator) -> None:
        """Back online: claim whatever became claimable while unreachable."""
        for y_in_hex in sorted(self.hop_records):
            record = self.hop_records[y_in_hex]
            in_view = sim.channel_view(record.cid_in, self.user)
            incoming = in_view.contracts.get(y_in_hex)
            if incoming is None or incoming.status != LOCKED:
                continue
            out_pair = sim.channels.get(record.cid_out)
            if out_pair is None:
                continue
            outgoing = out_pair.replica_for(self.user).contracts.get(to_hex(record.y_out))
            if outgoing is not None and outgoing.status == FULFILLED \
                    and outgoing.release is not None:
                upstream = derive_upstream(record.x, outgoing.release, record.y_out,
                                           sim.oracle)
                sim.propose(self.user, record.cid_in, ChannelEvent(
                    ACCEPT, {"y": y_in_hex, "release": to_hex(upstream),
                             "txid": record.txid}, self.user))
                self.pending_accepts[(record.cid_in, y_in_hex)] = {
                    "round": sim.round, "release": upstream}
        for y_hex in sorted(self.receiver_records):
            record = self.receiver_records[y_hex]
            view = sim.channel_view(record.cid, self.user)
            incoming = view.contracts.get(y_hex)
            if incoming is not None and incoming.status == LOCKED:
                if not (self.policy is not None and self.policy.withhold_release):
                    self.pay_receiver(sim, record.cid, y_hex)


# ---------------------------------------------------------------------------
# Phase helpers wired into the simulator
# ---------------------------------------------------------------------------

def enforce_fulfill(sim: Simulator, cid: str, y_hex: str, release: bytes) -> None:
    """Unilateral, ledger-recorded claim of a locked contract.

    Applied to both replicas at once: the ledger entry is public, so the
    silent partner's replica reflects it whether they are listening or not.
    """
    pair = sim.channels[cid]
    for replica in (pair.replica_left, pair.replica_right):
        contract = replica.contracts[y_hex]
        fulfill(contract, release, sim.now(), sim.oracle)
        replica.settled_to_peer += contract.value
        replica.cur = [r for r in replica.cur if r.y != y_hex]
    sim.ledger.append(fulfill_entry(cid, y_hex, to_hex(release)))
    pid, idx = sim.payment_index.get(y_hex, (None, None))
    if pid is not None and idx == 0:
        mark(sim, pid, SUCCEEDED)


def settle_on_expiry(sim: Simulator) -> list[tuple[str, str]]:
    """Refund every locked contract whose timeout has arrived.

    The refund is unilateral (the payer reclaims on the ledger), restores
    channel capacity on both replicas, and drops any in-flight record.  A
    payment with any refunded hop is marked aborted with reason "timeout".
    """
    refunded = []
    now = sim.now()
    for cid in sorted(sim.channels):
        pair = sim.channels[cid]
        for y_hex in sorted(pair.replica_left.contracts):
            lead = pair.replica_left.contracts[y_hex]
            if lead.status != LOCKED or now < lead.timeout:
                continue
            for replica in (pair.replica_left, pair.replica_right):
                contract = replica.contracts[y_hex]
                refund(contract, now)
                replica.cap += contract.value
                replica.cur = [r for r in replica.cur if r.y != y_hex]
            sim.ledger.append(refund_entry(cid))
            refunded.append((cid, y_hex))
            pid, _ = sim.payment_index.get(y_hex, (None, None))
            if pid is not None:
                mark(sim, pid, ABORTED, reason="timeout")
    return refunded


def queue_maintenance(sim: Simulator) -> None:
    """Per-round queue sweep for non-blocking mode; see `rayo.sweep`."""
    if sim.mode != MODE_RAYO:
        return
    now = sim.now()
    for cid in sorted(sim.channels):
        pair = sim.channels[cid]
        if not pair.replica_left.queue:
            continue
        result = rayo.sweep(pair.replica_left, now, sim.delta)
        rayo.sweep(pair.replica_right, now, sim.delta)
        if result["eroded"] or result["dequeued"] is not None:
            dequeued = result.get("dequeued")
            if dequeued is not None:
                dq = sim.payment_index.get(dequeued.y)
                if dq is not None:
                    mark(sim, dq[0], IN_FLIGHT)
            for record in result["eroded"]:
                er = sim.payment_index.get(record.y)
                if er is not None and er[1] == 0:
                    mark(sim, er[0], ABORTED, reason="margin")
            for user in sorted((pair.left, pair.right)):
                node = sim.nodes[user]
                if not sim._node_offline(user, sim.round):
                    node.on_queue_update(sim, cid, result)


def wire_protocol(sim: Simulator) -> Simulator:
    """Attach the payment protocol's phase logic to a bare simulator."""
    sim.effect_fn = channel_effect
    sim.expiry_fn = settle_on_expiry
    sim.sweep_fns = [queue_maintenance]
    sim.bookkeep_fn = update_bookkeeping
    return sim
