"""Exception hierarchy shared by every module of the package."""


class InnError(Exception):
    """Base class for all errors raised by innlab."""


class DimensionError(InnError, ValueError):
    pass


class LabelError(InnError, ValueError):
    pass


class ConfigError(InnError, ValueError):
    pass


class ContractError(InnError, RuntimeError):
    """An operation was called outside its documented contract."""


class NonFiniteError(InnError, ArithmeticError):
    pass


class DeterminismError(InnError, RuntimeError):
    pass


class TrainingError(InnError, RuntimeError):
    pass


class CheckpointError(InnError, ValueError):
    pass


class MagicError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class TruncationError(CheckpointError):
    pass


class ParseError(InnError, ValueError):
    pass


class FormatMagicError(ParseError):
    """A dataset file does not start with the expected magic number."""


class CountMismatchError(ParseError):
    """Paired image and label files disagree on the record count."""
