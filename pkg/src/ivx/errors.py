"""Exception types raised across the package."""


class IvxError(Exception):
    """Base class for every error raised by ivx."""


class ConfigurationError(IvxError, ValueError):
    pass


class ShapeError(IvxError, ValueError):
    pass


class EmptyInputError(IvxError, ValueError):
    pass


class InsufficientDataError(IvxError, ValueError):
    """Too few frames, vectors or trials for the requested estimate."""


class DataError(IvxError, ValueError):
    pass


class NumericalError(IvxError, ArithmeticError):
    pass


class DegenerateError(IvxError, ValueError):
    """Degenerate labels or vectors (single class, zero-norm vector, ...)."""


class KindMismatchError(IvxError, ValueError):
    pass


class FusionError(IvxError, ValueError):
    pass


class ProtocolError(IvxError, ValueError):
    """Evaluation protocol violated (split sizes, train/eval overlap)."""


class FormatError(IvxError, ValueError):
    """Unsupported or malformed audio file."""


class CorruptionError(IvxError, ValueError):
    """Model container is truncated or internally inconsistent."""


class UnsupportedVersionError(CorruptionError):
    pass
