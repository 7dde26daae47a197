"""Exception hierarchy for wattledger."""

from __future__ import annotations


class WattLedgerError(Exception):
    """Base class for all wattledger errors."""


class ValidationError(WattLedgerError):
    """A value violates a type or range constraint."""


class MarkerParseError(WattLedgerError):
    """A marker wire line is malformed or semantically invalid."""


class IntegrationError(WattLedgerError):
    """A span cannot be integrated (too few overlapping samples)."""

    def __init__(self, message: str, overlapping_samples: int = 0):
        super().__init__(message)
        self.overlapping_samples = overlapping_samples


class SourceUnavailableError(WattLedgerError):
    """A power source backend is not usable on this host."""


class SourceRangeError(WattLedgerError):
    """A replayed source was read outside its recorded time range."""


class TraceFormatError(WattLedgerError):
    """A persisted trace file is corrupt beyond the final partial line."""


class IncompleteRunError(WattLedgerError):
    """A run directory is missing one of its required files."""


class EndpointError(WattLedgerError):
    """The control endpoint cannot be bound (collision or bad path)."""


class SimulationError(WattLedgerError):
    """A workload profile cannot be executed as configured."""
