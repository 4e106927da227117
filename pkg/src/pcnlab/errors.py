"""Exception types raised across the package, grouped by the layer that owns them."""

from __future__ import annotations


class PcnError(Exception):
    """Base class for all domain errors."""


# Ledger layer

class DuplicateChannelId(PcnError):
    pass


class UnknownChannel(PcnError):
    pass


class AlreadyClosed(PcnError):
    pass


# Channel layer

class InsufficientFunds(PcnError):
    pass


class PeerRejected(PcnError):
    pass


class DuplicateChannel(PcnError):
    pass


class PendingContracts(PcnError):
    pass


class InvalidBalance(PcnError):
    pass


class InsufficientCapacity(PcnError):
    pass


class StateDivergence(PcnError):
    """Replica digests differ after an agreement round (test-only assertion)."""


# Contract layer

class BadPreimage(PcnError):
    pass


class Expired(PcnError):
    pass


class NotYetExpired(PcnError):
    pass


class AlreadySettled(PcnError):
    pass


class BadSolution(PcnError):
    pass


# Payment layer

class PathInvalid(PcnError):
    pass


class UnknownTxid(PcnError):
    """Accept or abort named an identifier with no in-flight record: a
    protocol-violation signal, not a recoverable condition."""


# Simulation / harness layer

class BoundExceeded(PcnError):
    """Schedule enumeration would exceed the configured event bound."""


class ScenarioInvalid(PcnError):
    pass


class TooLarge(PcnError):
    """Brute-force check asked to cover more cases than its factorial bound."""
