"""Exception types raised across the package."""


class PoseBertError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(PoseBertError, ValueError):
    pass


class DegenerateInput(PoseBertError, ValueError):
    pass


class DegenerateBatch(PoseBertError, ValueError):
    pass


class DegenerateConfiguration(PoseBertError, ValueError):
    pass


class AllMasked(PoseBertError, ValueError):
    """Raised when some query has no attendable key."""


class TooShort(PoseBertError, ValueError):
    pass


class EmptyDomain(PoseBertError, ValueError):
    pass


class BatchTooSmall(PoseBertError, ValueError):
    pass


class NumericError(PoseBertError, ArithmeticError):
    pass


class ConfigError(PoseBertError, ValueError):
    """Invalid run configuration; ``path`` names the offending field."""

    def __init__(self, path, message):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class ParseError(PoseBertError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class UnsupportedVersion(PoseBertError, ValueError):
    pass


class CheckpointIOError(PoseBertError, OSError):
    pass


class VersionMismatch(PoseBertError, ValueError):
    pass


class CorruptFile(PoseBertError, ValueError):
    pass


class SequenceMismatch(PoseBertError, KeyError):
    """Prediction and ground-truth files disagree on sequence ids or lengths."""

    def __str__(self):
        return str(self.args[0]) if self.args else ""
