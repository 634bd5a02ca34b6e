"""Exception types shared across the package."""


class VecconError(Exception):
    """Base class for all package errors."""


class InvalidSystemSize(VecconError):
    """System size below the minimum of 5 processes, or id out of range."""


class DuplicateOrigination(VecconError):
    """One originator produced two distinct messages of the same kind in a round."""


class ConflictingValue(VecconError):
    """Two messages attribute different values to the same originator slot."""


class EmptyVector(VecconError):
    """A vector operation received a vector with no usable slots."""


class NoSuchMessage(VecconError):
    """A delivery selector named an envelope that is not in the buffer."""


class MultipleCrashes(VecconError):
    """A crash specification named more than one process."""


class StalledRun(VecconError):
    """No deliverable envelope remains while a correct process is undecided."""


class ScriptDesync(VecconError):
    """A scenario script referenced a message the protocol never generated."""


class StateSpaceBudgetExceeded(VecconError):
    """Exhaustive exploration hit its node budget; carries the partial report."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class UnclassifiableOutcome(VecconError):
    """A synchronous-sweep outcome fell outside the known classification rows."""


class CheckpointCorrupt(VecconError):
    """A sweep checkpoint failed validation and cannot be resumed."""
