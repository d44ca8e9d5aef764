"""Exception types shared across the package."""


class TinyembedError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(TinyembedError, ValueError):
    """Operand shapes do not satisfy a kernel's shape rule."""


class TapeError(TinyembedError, RuntimeError):
    """Misuse of the autodiff tape (non-scalar loss, double backward, ...)."""


class ConfigError(TinyembedError, ValueError):
    """Invalid configuration value or malformed config file."""


class DataFormatError(TinyembedError, ValueError):
    """Malformed dataset file; message names the offending line."""


class AdapterError(TinyembedError, RuntimeError):
    """Adapter lifecycle misuse (merging twice, merging in training mode, ...)."""


class CheckpointError(TinyembedError, RuntimeError):
    """Corrupted checkpoint file or checkpoint/model mismatch."""


class NonFiniteLossError(TinyembedError, RuntimeError):
    """Training produced a NaN/inf loss; message carries the batch diagnostic."""


class DegenerateEvaluationError(TinyembedError, ValueError):
    """Spearman correlation is undefined (a constant input list)."""
