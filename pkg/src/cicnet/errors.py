"""Exception hierarchy shared by every cicnet module."""


class CicError(Exception):
    """Base class for all cicnet errors."""


class ShapeError(CicError, ValueError):
    """Tensor or configuration shapes do not line up."""


class NumericError(CicError, ArithmeticError):
    """A NaN or Inf appeared where finite values are required."""


class DegenerateStatisticsError(NumericError):
    """Batch statistics were requested over fewer than two elements."""


class ParameterError(CicError, ValueError):
    """A scalar hyperparameter is outside its valid range."""


class LabelError(CicError, ValueError):
    """Class label outside [0, class_count)."""


class ConfigError(CicError, ValueError):
    """A network configuration violates a structural constraint."""


class FormatError(CicError, ValueError):
    """A data or checkpoint file is malformed."""


class CompatibilityError(CicError):
    """A checkpoint was written for a different network configuration."""


class DivergenceError(NumericError):
    """Training produced a non-finite update."""
