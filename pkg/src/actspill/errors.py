"""Exception types shared across the package."""

from __future__ import annotations


class ActspillError(Exception):
    """Base class for all package errors."""


class InvalidConfig(ActspillError):
    """A configuration violates one or more invariants.

    ``violations`` lists every offending field as ``"field: message"`` so a
    caller sees the full report in one failure.
    """

    def __init__(self, violations: list[str]):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


# -- analytical models ------------------------------------------------------

class EmptyCostList(ActspillError):
    pass


class NonPositiveStepTime(ActspillError):
    pass


class TooFewLayers(ActspillError):
    pass


class DegenerateSweep(ActspillError):
    pass


# -- cache engine -----------------------------------------------------------

class UnknownScope(ActspillError):
    """Pack or unpack arrived with no active module scope."""


class MismatchedScope(ActspillError):
    """Module enter/exit hints arrived unbalanced."""


class UnknownId(ActspillError):
    """An id the cache has never seen."""


class LostTensor(ActspillError):
    """An id whose record was already released."""


# -- storage backends -------------------------------------------------------

class BackendFull(ActspillError):
    pass


class DuplicateId(ActspillError):
    pass


class NotFound(ActspillError):
    pass


class NotYetDurable(ActspillError):
    """Load attempted before the store ticket completed."""


# -- harness / analysis -----------------------------------------------------

class MalformedTrace(ActspillError):
    pass


class OutOfMemory(ActspillError):
    """A strategy's activation peak does not fit the device budget."""
