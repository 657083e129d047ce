"""Exception hierarchy shared by every stage of the pipeline.

The CLI maps these onto process exit codes: invalid input -> 2,
numerical failure -> 3, I/O and checkpoint failures -> 4.
"""


class NhwcError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


class InvalidInputError(NhwcError, ValueError):
    exit_code = 2


class SequenceTooLongError(InvalidInputError):
    """Raised when an assembled LM sequence does not fit the context window."""

    def __init__(self, length, limit):
        super().__init__(f"sequence of length {length} exceeds max_sequence_len {limit}")
        self.length = length
        self.limit = limit


class NumericalError(NhwcError, ArithmeticError):
    exit_code = 3


class CheckpointError(NhwcError, OSError):
    exit_code = 4


class MagicError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class IntegrityError(CheckpointError):
    pass


class StageError(NhwcError):
    """Wraps a failure inside one stage of the end-to-end pipeline."""

    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 4 if isinstance(cause, OSError) else 1)
