"""Exception hierarchy. The CLI maps each family onto a stable exit code."""


class RtcnnError(Exception):
    """Base class for every error raised by this package."""

    exit_code = 5


class ShapeError(RtcnnError, ValueError):
    exit_code = 4


class ContractError(RtcnnError):
    """A precondition of an operation was violated (missing cache, bad target...)."""

    exit_code = 4


class ConfigError(RtcnnError, ValueError):
    exit_code = 4


class DataError(RtcnnError, ValueError):
    exit_code = 3


class ParseError(DataError):
    def __init__(self, message, row=None):
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)
        self.row = row


class UnsupportedFormatError(ParseError):
    pass


class WeightFileError(RtcnnError):
    exit_code = 3


class BadMagicError(WeightFileError):
    pass


class VersionMismatchError(WeightFileError):
    pass


class ChecksumError(WeightFileError):
    pass


class TruncatedFileError(WeightFileError):
    pass
