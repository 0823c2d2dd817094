"""Exception taxonomy shared across the package.

Every error raised by the library derives from :class:`HotspotError` so
callers (notably the CLI) can map failures to stable exit codes: data
problems vs. numeric problems vs. usage problems.
"""

from __future__ import annotations


class HotspotError(Exception):
    """Base class for all library errors."""


class DataError(HotspotError):
    """Input data is malformed or violates a precondition."""


class NumericError(HotspotError):
    """A numeric computation produced non-finite values."""


# --- calendar / windowing ---------------------------------------------------

class WindowOutOfRange(DataError):
    """A requested month window extends outside the study period."""


# --- ingestion ---------------------------------------------------------------

class ParseError(DataError):
    """A CSV row could not be parsed; carries the offending line number."""

    def __init__(self, path, line_no: int, message: str):
        self.path = str(path)
        self.line_no = line_no
        super().__init__(f"{self.path}:{line_no}: {message}")


class DuplicateTract(DataError):
    """Two tract rows share the same id."""


# --- features / spatial -------------------------------------------------------

class EmptyWindow(DataError):
    """Standardization fit window contains no days."""


class InsufficientHistory(DataError):
    """Look-back reaches before the first day of the study period."""


class NotEnoughTracts(DataError):
    """Fewer tracts than neighbors-plus-target required by the grid."""


class ArityError(DataError):
    """Wrong number of neighbors handed to the grid arrangement."""


# --- model engine -------------------------------------------------------------

class ShapeError(DataError):
    """Tensor shape incompatible with the architecture descriptor."""


class FormatVersionError(DataError):
    """Weights file written by an unknown format version."""


class CorruptFile(DataError):
    """Weights file failed checksum or structural validation."""


class ArchitectureMismatch(DataError):
    """Weights file descriptor differs from the expected architecture."""


# --- training / evaluation ------------------------------------------------------

class EmptyTrainingSet(DataError):
    """No trainable samples remain after history filtering."""


class DomainMismatch(DataError):
    """Ensemble members predict over different (tract, day) domains."""


class EmptyDomain(DataError):
    """Metric requested over an empty prediction domain."""


class InvalidF1(DataError):
    """F1 inputs outside [0, 1] or negative."""
