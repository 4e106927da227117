"""Trusted append-only bulletin board; its length is the protocol clock.

There is no consensus layer here: a single writer (the simulator scheduler)
appends entries and everyone reads immutable snapshots.  Time passes by
appending entries, so ``now()`` is simply the entry count; idle rounds are
represented by explicit Padding entries.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterator

from .errors import AlreadyClosed, DuplicateChannelId, UnknownChannel

KINDS = ("ChannelOpen", "ChannelClose", "HtlcFulfill", "HtlcRefund", "Padding")


@dataclass(frozen=True)
class LedgerEntry:
    kind: str
    payload: dict

    def to_json(self, index: int) -> str:
        return json.dumps(
            {"index": index, "kind": self.kind, "payload": self.payload},
            sort_keys=True,
        )


def open_entry(channel_id: str, u1: str, u2: str, beta: int, timeout: int,
               fee: int, metadata: str = "") -> LedgerEntry:
    # The fee (and any other user topology data) rides in the open entry's
    # metadata so peers can learn it from the public transcript.
    return LedgerEntry("ChannelOpen", {
        "channel": channel_id, "left": u1, "right": u2, "beta": beta,
        "timeout": timeout, "fee": fee, "metadata": metadata,
    })


def close_entry(channel_id: str, balances: dict) -> LedgerEntry:
    return LedgerEntry("ChannelClose", {"channel": channel_id, "balances": dict(balances)})


def fulfill_entry(channel_id: str, y_hex: str, r_hex: str) -> LedgerEntry:
    return LedgerEntry("HtlcFulfill", {"channel": channel_id, "y": y_hex, "r": r_hex})


def refund_entry(channel_id: str) -> LedgerEntry:
    return LedgerEntry("HtlcRefund", {"channel": channel_id})


PADDING = LedgerEntry("Padding", {})


@dataclass
class Ledger:
    """Append-only entry list; ``now()`` equals the number of entries."""

    entries: list[LedgerEntry] = field(default_factory=list)
    _open_channels: set[str] = field(default_factory=set)
    _closed_channels: set[str] = field(default_factory=set)

    def now(self) -> int:
        return len(self.entries)

    def append(self, entry: LedgerEntry) -> int:
        if entry.kind not in KINDS:
            raise ValueError(f"unknown entry kind {entry.kind!r}")
        if entry.kind == "ChannelOpen":
            cid = entry.payload["channel"]
            if cid in self._open_channels or cid in self._closed_channels:
                raise DuplicateChannelId(cid)
            if entry.payload["beta"] <= 0:
                raise ValueError("channel deposit must be positive")
            if entry.payload["left"] == entry.payload["right"]:
                raise ValueError("channel endpoints must be distinct users")
            self._open_channels.add(cid)
        elif entry.kind in ("ChannelClose", "HtlcFulfill", "HtlcRefund"):
            cid = entry.payload["channel"]
            if cid in self._closed_channels:
                raise AlreadyClosed(cid)
            if cid not in self._open_channels:
                raise UnknownChannel(cid)
            if entry.kind == "ChannelClose":
                self._open_channels.discard(cid)
                self._closed_channels.add(cid)
        index = len(self.entries)
        self.entries.append(entry)
        return index

    def advance_time(self, rounds: int) -> None:
        if rounds < 0:
            raise ValueError("cannot rewind time")
        for _ in range(rounds):
            self.append(PADDING)

    def read(self) -> tuple[LedgerEntry, ...]:
        """Immutable snapshot of the full transcript."""
        return tuple(self.entries)

    def open_channels(self) -> frozenset[str]:
        return frozenset(self._open_channels)

    def dump(self) -> Iterator[str]:
        """One JSON object per line: {index, kind, payload}."""
        for i, entry in enumerate(self.entries):
            yield entry.to_json(i)


def replay(lines) -> Ledger:
    """Rebuild a ledger from its dump; used as the transcript-stability oracle."""
    ledger = Ledger()
    for line in lines:
        obj = json.loads(line)
        ledger.append(LedgerEntry(obj["kind"], obj["payload"]))
    return ledger
