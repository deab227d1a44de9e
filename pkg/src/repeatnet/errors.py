"""Exception hierarchy.

Every error carries the CLI exit code it maps to: 2 for usage errors,
3 for data errors, 4 for numeric failures.
"""


class RepeatNetError(Exception):
    exit_code = 1


class UsageError(RepeatNetError):
    exit_code = 2


class ContractError(UsageError):
    """A caller violated an operation's precondition."""


class DimensionError(ContractError, ValueError):
    pass


class DataError(RepeatNetError):
    exit_code = 3


class ParseError(DataError):
    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}:"
        if line is not None:
            where += f"{line}:"
        super().__init__(f"{where} {message}" if where else message)


class EmptyDatasetError(DataError):
    pass


class VocabularyError(DataError):
    pass


class CheckpointError(DataError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class NumericError(RepeatNetError):
    exit_code = 4


class EmptySupportError(NumericError):
    """Raised by a masked softmax when every entry of a row is masked."""
