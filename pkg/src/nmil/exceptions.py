"""Exception hierarchy shared by every nmil module."""


class NmilError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(NmilError, ValueError):
    """Operand shapes do not agree."""


class DegenerateInputError(NmilError, ValueError):
    """Empty bag, empty axis or any other input with nothing to reduce."""


class StructureError(NmilError, ValueError):
    """Bag tree depth or layout does not match what the caller expects."""


class ContractError(NmilError, ValueError):
    """A precondition that is not about shapes was violated."""


class StateError(NmilError, RuntimeError):
    """Operation called in the wrong lifecycle state (e.g. double backward)."""


class FormatError(NmilError, ValueError):
    """Malformed binary or text input file."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class GenerationError(NmilError, RuntimeError):
    """Dataset generation could not satisfy its constraints."""


class TrainingDivergenceError(NmilError, RuntimeError):
    """Loss became non-finite during training."""

    def __init__(self, epoch, sample, value):
        super().__init__(
            f"non-finite loss {value!r} at epoch {epoch}, sample {sample}"
        )
        self.epoch = epoch
        self.sample = sample


class UndefinedAUCError(NmilError, ValueError):
    """No bag had both positive and negative members to rank."""
