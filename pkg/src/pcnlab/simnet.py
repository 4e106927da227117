"""Deterministic round-based network for driving channel protocols.

Time advances in fixed communication rounds.  Every envelope deposited in
round r is delivered in round r+1, so the absence of a message is observable
by the next round.  Within a round, deliveries to one recipient happen in a
schedule-controlled permutation; exploring those permutations is how the
test-suite exercises message races without threads or wall-clock time.

A simulator round runs six phases, in order:

1. delivery of due envelopes (adversary screening applied per envelope),
2. channel agreement: proposals delivered this round are merged per channel
   in a canonical order and applied to both endpoint replicas through an
   injected effect function, after which endpoint hooks fire,
3. injected per-round sweeps (queue maintenance in non-blocking mode),
4. injected expiry settlement plus per-node settlement hooks,
5. ledger padding, so the bulletin-board clock ticks at least once per round,
6. round report.

The protocol logic itself (what an event does to a channel, when contracts
expire) is injected as callables, keeping this module a pure transport and
scheduling layer.

Anonymous envelopes model sender-hiding delivery as an ideal service: the
recipient learns no origin and every anonymous envelope is padded to one
fixed size, so length reveals nothing about path position either.
"""

from __future__ import annotations

import itertools
import json
import random
from copy import deepcopy
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional

from .channel import ChannelEvent, ChannelState, assert_replicas_match, merge_events, open_channel
from .contracts import LOCKED, ProofSystem
from .errors import BoundExceeded
from .ledger import Ledger, PADDING
from .primitives import HashOracle

DIRECT = "Direct"
ANONYMOUS = "Anonymous"

# One fixed size for every anonymous envelope, dimensioned for the longest
# admissible path (10 hops) with the larger proof backend.
ANON_PADDED_BYTES = 2048
MAX_PATH_LENGTH = 10


@dataclass
class Envelope:
    seq: int
    sender: str
    recipient: str
    kind: str                     # "hop" | "propose" | "issue" | test-defined
    payload: dict
    anonymity: str = DIRECT
    deposit_round: int = 0
    size: int = 0                 # padded length for Anonymous, actual otherwise


@dataclass
class AdversaryPolicy:
    """Behavior of a corrupted node.

    Corruption hands the node's state to the policy (``captured``) and routes
    every envelope touching the node through ``action_for``.  The scripted
    misbehavior flags are consulted by the protocol node's own hooks, so one
    policy object can express the standard strategies without subclassing.
    """

    offline_until: Optional[int] = None
    withhold_release: bool = False
    early_abort: bool = False
    forge_preimage: bool = False
    misreport_capacity: bool = False
    envelope_action: Optional[Callable[[Envelope, int], tuple]] = None
    observed: Optional[list] = None      # pass a list to record this node's view
    captured: object = None

    def is_offline(self, rnd: int) -> bool:
        return self.offline_until is not None and rnd < self.offline_until

    def observe(self, record: dict) -> None:
        if self.observed is not None:
            self.observed.append(record)

    def action_for(self, env: Envelope, rnd: int) -> tuple:
        if self.is_offline(rnd):
            return ("drop",)
        if self.envelope_action is not None:
            action = self.envelope_action(env, rnd)
            if action is not None:
                return action
        return ("deliver",)


@dataclass(frozen=True)
class Schedule:
    """Delivery-order choices; replaying one reproduces the identical trace.

    ``choices`` maps (round, recipient, class) to a permutation of that
    batch.  Batches without an entry fall back to the seeded shuffle when
    ``seed`` is set, or to deposit order (and the simulator records the open
    choice point for the enumerator).
    """

    seed: Optional[int] = None
    choices: tuple = ()           # ((key, perm), ...) kept sorted

    def lookup(self, key: tuple) -> Optional[tuple]:
        for k, perm in self.choices:
            if k == key:
                return perm
        return None

    def extend(self, key: tuple, perm: tuple) -> "Schedule":
        return Schedule(self.seed, tuple(sorted(self.choices + ((key, perm),))))

    @property
    def label(self) -> str:
        if self.seed is not None:
            return f"seed:{self.seed}"
        if not self.choices:
            return "deposit-order"
        parts = [f"r{key[0]}/{key[1]}/{key[2]}:" + "".join(map(str, perm))
                 for key, perm in self.choices]
        return "enum[" + ";".join(parts) + "]"


@dataclass
class ChannelPair:
    """The two endpoint replicas of one channel plus shared metadata."""

    cid: str
    left: str
    right: str
    replica_left: ChannelState
    replica_right: ChannelState
    byzantine: bool = False       # both endpoints corrupt: capacity lies allowed

    def replica_for(self, user: str) -> ChannelState:
        return self.replica_left if user == self.left else self.replica_right


@dataclass
class RoundReport:
    round: int
    delivered: int = 0
    dropped: int = 0
    applied: int = 0

    def to_dict(self) -> dict:
        return {"round": self.round, "delivered": self.delivered,
                "dropped": self.dropped, "applied": self.applied}


class Node:
    """Base participant: run-to-completion handlers over a private mailbox."""

    def __init__(self, user: str):
        self.user = user
        self.policy: Optional[AdversaryPolicy] = None

    def handle_envelope(self, sim: "Simulator", env: Envelope) -> None:
        handler = getattr(self, "on_" + env.kind.replace("-", "_"), None)
        if handler is not None:
            handler(sim, env)

    # Hook points driven by the simulator phases; subclasses override.

    def on_channel_event(self, sim: "Simulator", cid: str, event: ChannelEvent,
                         result: dict) -> None:
        pass

    def on_queue_update(self, sim: "Simulator", cid: str, result: dict) -> None:
        pass

    def on_settlement_phase(self, sim: "Simulator") -> None:
        pass

    def on_catch_up(self, sim: "Simulator") -> None:
        pass


class Simulator:
    def __init__(self, *, oracle: HashOracle, proofs=None, seed: int = 7,
                 mode: str = "fulgor", delta: int = 2,
                 schedule: Optional[Schedule] = None, max_rounds: int = 500):
        self.oracle = oracle
        self.proofs = proofs if proofs is not None else ProofSystem("revealing", oracle)
        self.rng = random.Random(seed)
        self.seed = seed
        self.mode = mode
        self.delta = delta
        self.schedule = schedule or Schedule()
        self._sched_rng = random.Random(self.schedule.seed)
        self.max_rounds = max_rounds

        self.ledger = Ledger()
        self.wallets: dict[str, int] = {}
        self.nodes: dict[str, Node] = {}
        self.channels: dict[str, ChannelPair] = {}
        self.corrupted: set[str] = set()

        self.round = 0
        self._pool: list[Envelope] = []
        self._seq = 0
        self._arrived: dict[str, list[ChannelEvent]] = {}
        self.unconstrained: list[tuple[tuple, int]] = []

        self.trace: list[dict] = []
        self.reports: list[RoundReport] = []
        self.message_count = 0
        self.byte_count = 0
        self.dropped_count = 0

        # Observability for payments, filled in by the protocol layer.
        self.payments: dict[str, object] = {}
        self.payment_index: dict[str, tuple[str, int]] = {}

        # Protocol wiring (see payment.wire_protocol).
        self.effect_fn: Optional[Callable] = None
        self.expiry_fn: Optional[Callable] = None
        self.sweep_fns: list[Callable] = []
        self.bookkeep_fn: Optional[Callable] = None

    # -- setup ------------------------------------------------------------

    def add_node(self, node: Node) -> Node:
        self.nodes[node.user] = node
        self.wallets.setdefault(node.user, 0)
        return node

    def add_channel(self, u1: str, u2: str, beta: int, timeout: int,
                    fee: int) -> ChannelPair:
        state = open_channel(self.ledger, self.wallets, u1, u2, beta, timeout, fee)
        pair = ChannelPair(cid=state.id, left=u1, right=u2,
                           replica_left=state, replica_right=deepcopy(state))
        self.channels[state.id] = pair
        return pair

    def corrupt(self, user: str, policy: AdversaryPolicy) -> None:
        node = self.nodes[user]
        node.policy = policy
        policy.captured = node
        self.corrupted.add(user)
        if policy.misreport_capacity:
            for pair in self.channels.values():
                if {pair.left, pair.right} <= self.corrupted:
                    left_pol = self.nodes[pair.left].policy
                    right_pol = self.nodes[pair.right].policy
                    if (left_pol and left_pol.misreport_capacity
                            and right_pol and right_pol.misreport_capacity):
                        pair.byzantine = True

    def inject(self, user: str, to: str, kind: str, payload: dict,
               anonymous: bool = False) -> None:
        """Deposit an arbitrary message on behalf of a (corrupted) user."""
        self.deposit(user, to, kind, payload, anonymous, self.round)

    # -- transport --------------------------------------------------------

    def deposit(self, sender: str, to: str, kind: str, payload: dict,
                anonymous: bool, deposit_round: int) -> Envelope:
        raw = json.dumps(payload, sort_keys=True).encode()
        if anonymous and len(raw) > ANON_PADDED_BYTES:
            raise ValueError("anonymous payload exceeds the fixed padded size")
        env = Envelope(seq=self._seq, sender=sender, recipient=to, kind=kind,
                       payload=payload,
                       anonymity=ANONYMOUS if anonymous else DIRECT,
                       deposit_round=deposit_round,
                       size=ANON_PADDED_BYTES if anonymous else len(raw))
        self._seq += 1
        self._pool.append(env)
        return env

    def send(self, sender: str, to: str, kind: str, payload: dict,
             anonymous: bool = False) -> Envelope:
        return self.deposit(sender, to, kind, payload, anonymous, self.round)

    def propose(self, user: str, cid: str, event: ChannelEvent) -> None:
        """Queue a channel event for the next agreement exchange.

        The proposal travels as a real envelope to the partner; it takes
        effect on both replicas only once delivered, so a dropped proposal
        simply never happens and the channel stays consistent.
        """
        pair = self.channels[cid]
        if user not in (pair.left, pair.right):
            raise ValueError(f"{user} is not an endpoint of {cid}")
        partner = pair.replica_left.partner_of(user)
        self.send(user, partner, "propose", {"cid": cid, "event": event.to_dict()})

    def channel_view(self, cid: str, user: str) -> ChannelState:
        return self.channels[cid].replica_for(user)

    def now(self) -> int:
        return self.ledger.now()

    # -- scheduling internals ---------------------------------------------

    def _order_for(self, rnd: int, recipient: str, klass: str, count: int) -> tuple:
        if count <= 1:
            return tuple(range(count))
        key = (rnd, recipient, klass)
        chosen = self.schedule.lookup(key)
        if chosen is not None:
            return chosen
        if self.schedule.seed is not None:
            order = list(range(count))
            self._sched_rng.shuffle(order)
            return tuple(order)
        self.unconstrained.append((key, count))
        return tuple(range(count))

    def _screen(self, env: Envelope, rnd: int) -> tuple:
        for user in (env.sender, env.recipient):
            node = self.nodes.get(user)
            if node is not None and node.policy is not None:
                action = node.policy.action_for(env, rnd)
                if action[0] != "deliver":
                    return action
        return ("deliver",)

    @staticmethod
    def _identifier_fields(env: Envelope) -> dict:
        payload = env.payload
        fields = {}
        if isinstance(payload, dict):
            event = payload.get("event")
            source = event.get("payload", {}) if isinstance(event, dict) else payload
            txid = source.get("txid")
            y = source.get("y") or source.get("y_in")
            if txid is not None:
                fields["txid"] = txid
            if y is not None:
                fields["y"] = y
        return fields

    def _deliver(self, env: Envelope, report: RoundReport) -> None:
        report.delivered += 1
        self.message_count += 1
        self.byte_count += env.size
        line = {"round": self.round, "to": env.recipient, "kind": env.kind}
        if env.anonymity != ANONYMOUS:
            line["from"] = env.sender
        line.update(self._identifier_fields(env))
        self.trace.append(line)

        node = self.nodes.get(env.recipient)
        if node is None:
            return
        if node.policy is not None:
            node.policy.observe(dict(line))
        if env.kind == "propose":
            payload = env.payload if isinstance(env.payload, dict) else {}
            cid = payload.get("cid")
            raw_event = payload.get("event")
            pair = self.channels.get(cid)
            if pair is None or not isinstance(raw_event, dict):
                return
            if env.sender not in (pair.left, pair.right):
                return          # proposals are authenticated between partners
            event = ChannelEvent(decision=raw_event.get("decision", ""),
                                 payload=raw_event.get("payload", {}),
                                 origin=env.sender)
            self._arrived.setdefault(cid, []).append(event)
            return
        node.handle_envelope(self, env)

    # -- the round pipeline -----------------------------------------------

    def step(self) -> RoundReport:
        self.round += 1
        rnd = self.round
        report = RoundReport(round=rnd)
        entries_before = len(self.ledger.entries)

        # Phase 1: deliveries.  Anonymous batches go before direct ones for
        # each recipient; the schedule permutes within each batch.
        due = [e for e in self._pool if e.deposit_round == rnd - 1]
        self._pool = [e for e in self._pool if e.deposit_round != rnd - 1]
        by_recipient: dict[str, dict[str, list[Envelope]]] = {}
        for env in due:
            slot = by_recipient.setdefault(env.recipient, {ANONYMOUS: [], DIRECT: []})
            slot[env.anonymity].append(env)
        for recipient in sorted(by_recipient):
            for klass in (ANONYMOUS, DIRECT):
                batch = sorted(by_recipient[recipient][klass], key=lambda e: e.seq)
                for idx in self._order_for(rnd, recipient, klass, len(batch)):
                    env = batch[idx]
                    action = self._screen(env, rnd)
                    if action[0] == "drop":
                        report.dropped += 1
                        self.dropped_count += 1
                        continue
                    if action[0] == "delay":
                        env.deposit_round = rnd - 1 + max(1, int(action[1]))
                        self._pool.append(env)
                        continue
                    if action[0] == "substitute":
                        env.payload = self._coerce_payload(action[1])
                    self._deliver(env, report)

        # Phase 2: agreement application.
        arrived, self._arrived = self._arrived, {}
        for cid in sorted(arrived):
            pair = self.channels[cid]
            lefts = [e for e in arrived[cid] if e.origin == pair.left]
            rights = [e for e in arrived[cid] if e.origin == pair.right]
            for event in merge_events(lefts, rights, pair.left, pair.right):
                result = self._apply_event(pair, event)
                report.applied += 1
                if self.bookkeep_fn is not None:
                    self.bookkeep_fn(self, cid, event, result)
                for user in sorted((pair.left, pair.right)):
                    node = self.nodes[user]
                    if node.policy is not None:
                        node.policy.observe({"round": rnd, "kind": "channel-event",
                                             "cid": cid, "decision": event.decision,
                                             **{k: v for k, v in event.payload.items()
                                                if k in ("y", "txid")}})
                    if not self._node_offline(user, rnd):
                        node.on_channel_event(self, cid, event, result)

        # Phase 3: per-round sweeps (queue maintenance and the like).
        for sweep_fn in self.sweep_fns:
            sweep_fn(self)

        # Phase 4: expiry settlement, then per-node settlement hooks.
        if self.expiry_fn is not None:
            self.expiry_fn(self)
        for user in sorted(self.nodes):
            if not self._node_offline(user, rnd):
                self.nodes[user].on_settlement_phase(self)
        for user in sorted(self.nodes):
            policy = self.nodes[user].policy
            if policy is not None and policy.offline_until == rnd:
                self.nodes[user].on_catch_up(self)

        # Phase 5: the bulletin-board clock ticks at least once per round.
        if len(self.ledger.entries) == entries_before:
            self.ledger.append(PADDING)

        self.reports.append(report)
        return report

    def _apply_event(self, pair: ChannelPair, event: ChannelEvent) -> dict:
        kwargs = dict(now=self.ledger.now(), oracle=self.oracle, mode=self.mode,
                      delta=self.delta, byzantine=pair.byzantine)
        result = self.effect_fn(pair.replica_left, event, **kwargs)
        self.effect_fn(pair.replica_right, event, **kwargs)
        if not pair.byzantine:
            assert_replicas_match(pair.replica_left, pair.replica_right, self.oracle)
        return result

    def _node_offline(self, user: str, rnd: int) -> bool:
        policy = self.nodes[user].policy
        return policy is not None and policy.is_offline(rnd)

    @staticmethod
    def _coerce_payload(raw) -> dict:
        if isinstance(raw, dict):
            return raw
        if isinstance(raw, (bytes, bytearray)):
            try:
                decoded = json.loads(raw.decode())
                return decoded if isinstance(decoded, dict) else {"malformed": True}
            except (UnicodeDecodeError, json.JSONDecodeError):
                return {"malformed": True}
        return {"malformed": True}

    # -- run control -------------------------------------------------------

    def quiescent(self) -> bool:
        if self._pool or self._arrived:
            return False
        for payment in self.payments.values():
            if not payment.terminal():
                return False
        for pair in self.channels.values():
            state = pair.replica_left
            if state.queue:
                return False
            if any(c.status == LOCKED for c in state.contracts.values()):
                return False
        return True

    def run_until_quiescent(self, max_rounds: Optional[int] = None) -> int:
        limit = max_rounds if max_rounds is not None else self.max_rounds
        while self.round < limit:
            self.step()
            if self.quiescent():
                break
        return self.round


# ---------------------------------------------------------------------------
# Schedule exploration
# ---------------------------------------------------------------------------

def enumerate_schedules(build_and_run: Callable[[Schedule], Simulator],
                        bound: int = 1000) -> Iterator[tuple[Schedule, Simulator]]:
    """Depth-first sweep of every distinct per-round delivery permutation.

    ``build_and_run`` must construct a fresh simulator for the given schedule
    and run it to quiescence.  Runs that hit an unconstrained choice point
    are used only to discover the branch and are discarded; fully constrained
    runs are yielded with their schedules.  Raises BoundExceeded once more
    than ``bound`` complete schedules have been produced, at which point the
    caller should fall back to seeded sampling.
    """
    stack = [Schedule()]
    produced = 0
    while stack:
        sched = stack.pop()
        sim = build_and_run(sched)
        if sim.unconstrained:
            key, count = sim.unconstrained[0]
            for perm in sorted(itertools.permutations(range(count)), reverse=True):
                stack.append(sched.extend(key, perm))
            continue
        produced += 1
        if produced > bound:
            raise BoundExceeded(f"schedule count exceeds bound {bound}")
        yield sched, sim


def sample_schedules(build_and_run: Callable[[Schedule], Simulator],
                     seeds: Iterator[int]) -> Iterator[tuple[Schedule, Simulator]]:
    """Seeded random fallback for scenarios too branchy to enumerate."""
    for seed in seeds:
        sched = Schedule(seed=seed)
        yield sched, build_and_run(sched)
