"""Non-blocking extension of the payment protocol ("rayo" mode).

Blocking multi-hop payments deadlock when two of them cross the same pair of
saturated channels in opposite wave order: each holds the capacity the other
needs and neither can proceed or retreat.  The fix built here gives every
payment a globally ordered 128-bit identifier and lets a channel queue a
payment that cannot fit right now, provided it outranks at least one of the
payments currently holding capacity.  The outranked payment will lose the
same comparison somewhere else on its own path, abort, and free capacity; the
abort pops the highest-ranked queued payment and locks it in.  Among any set
of conflicting payments that could each succeed alone, the one with the
greatest identifier therefore always terminates.

Queue and in-flight records live on the shared channel state and are only
ever mutated through the channel agreement step, so both endpoint replicas
see identical queues.  The records carry nothing but (identifier, condition
digest, value, timeout); hop secrets stay on the nodes.

The original scheme leaves one corner open: a queued payment whose timeout
margin erodes while it waits would, if locked late, leave the payee no time
to claim.  Dequeue therefore refuses entries with ``timeout - now <= delta``
and aborts them upstream instead, and a per-round sweep applies the same rule
to entries stuck behind capacity that was freed without an abort event (for
example by an expiry refund).
"""

from __future__ import annotations

from typing import Optional

from .channel import ChannelState, InflightRecord
from .contracts import HtlcContract, lock
from .errors import UnknownTxid
from .primitives import HashOracle, derive_txid, from_hex


def txid_assign(oracle: HashOracle, sender: str, nonce: int) -> int:
    """Totally ordered payment identifier; equal at every hop of one payment."""
    return derive_txid(oracle, sender, nonce)


def queue_admissible(state: ChannelState, txid: int) -> bool:
    """A payment may wait only if it outranks something currently in flight.

    Otherwise it could wait forever: every in-flight payment outranks it, so
    each of them may itself be queued elsewhere behind this one.
    """
    return any(txid > rec.txid for rec in state.cur if rec.txid is not None)


def on_forward_saturated(state: ChannelState, record: InflightRecord) -> str:
    """Forward checks passed but capacity is short: queue or give up.

    Returns ``"queued"`` after appending to the shared queue, or ``"abort"``
    when no in-flight record has a smaller identifier (including the case of
    an empty ``cur``, where no future abort could ever free capacity).
    """
    if record.txid is not None and queue_admissible(state, record.txid):
        state.queue.append(record)
        return "queued"
    return "abort"


def on_accept_cleanup(state: ChannelState, txid: int) -> None:
    """Drop the settled payment's in-flight record; capacity stays consumed.

    Queued entries are deliberately not dequeued here: an accept settles
    value, it does not free anything.
    """
    for i, rec in enumerate(state.cur):
        if rec.txid == txid:
            del state.cur[i]
            return
    raise UnknownTxid(f"no in-flight record with identifier {txid}")


def _pop_max(queue: list[InflightRecord]) -> InflightRecord:
    best = max(range(len(queue)), key=lambda i: queue[i].txid)
    return queue.pop(best)


def _lock_record(state: ChannelState, record: InflightRecord) -> None:
    contract = HtlcContract(payer=state.left, payee=state.right,
                            condition=from_hex(record.y),
                            value=record.value, timeout=record.timeout)
    lock(state, contract)
    state.cur.append(record)


def on_abort_requeue(state: ChannelState, txid: Optional[int], now: int,
                     delta: int) -> dict:
    """Post-abort bookkeeping: clear ``cur``, then promote from the queue.

    Pops the single highest-identifier entry per freed slot.  An entry whose
    timeout margin eroded while queued is discarded (reported under
    ``"eroded"`` so the payer can abort it upstream) and the next one is
    tried.  The promoted entry, if any, is locked directly from the shared
    record and reported under ``"dequeued"``.
    """
    if txid is not None:
        for i, rec in enumerate(state.cur):
            if rec.txid == txid:
                del state.cur[i]
                break
    result: dict = {"eroded": [], "dequeued": None}
    while state.queue:
        candidate = _pop_max(state.queue)
        if candidate.timeout - now <= delta:
            result["eroded"].append(candidate)
            continue
        if candidate.value <= state.cap:
            _lock_record(state, candidate)
            result["dequeued"] = candidate
        else:
            # Still does not fit; re-run the admission rule rather than
            # silently re-queueing, since cur has changed.
            if queue_admissible(state, candidate.txid):
                state.queue.append(candidate)
            else:
                result["eroded"].append(candidate)
        break
    return result


def sweep(state: ChannelState, now: int, delta: int) -> dict:
    """Per-round queue maintenance, applied identically on both replicas.

    Discards entries whose margin eroded, then locks the best remaining entry
    if capacity happens to be free (the only way that arises without an abort
    event is an expiry refund, which restores capacity unilaterally).
    """
    eroded = [rec for rec in state.queue if rec.timeout - now <= delta]
    if eroded:
        state.queue = [rec for rec in state.queue if rec.timeout - now > delta]
    result: dict = {"eroded": eroded, "dequeued": None}
    if state.queue:
        best = max(state.queue, key=lambda rec: rec.txid)
        if best.value <= state.cap:
            state.queue.remove(best)
            _lock_record(state, best)
            result["dequeued"] = best
    return result
