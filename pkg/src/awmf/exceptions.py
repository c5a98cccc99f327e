"""Exception hierarchy shared across the package."""


class AWMFError(Exception):
    """Base class for all package errors."""


class ShapeError(AWMFError, ValueError):
    """Operand extents do not satisfy an operation's contract."""


class NonFiniteError(AWMFError, FloatingPointError):
    """A forward value or gradient became NaN/Inf."""


class ConfigError(AWMFError, ValueError):
    """Invalid configuration or geometry."""


class DataError(AWMFError, ValueError):
    """Invalid or missing input data."""


class DivergenceError(AWMFError, RuntimeError):
    """Training produced a non-finite loss or gradient."""


class CheckpointError(AWMFError):
    """Base class for checkpoint decoding failures."""


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class ImageFormatError(DataError):
    """Base class for PGM/PPM decoding failures."""


class ImageHeaderError(ImageFormatError):
    pass


class ImageExtentError(ImageFormatError):
    pass


class ImageTruncatedError(ImageFormatError):
    pass
