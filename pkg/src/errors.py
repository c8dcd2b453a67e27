"""Exception types raised across the training engine."""


class EngineError(Exception):
    """Base class for every error the engine raises on purpose."""
    pass


class ShapeError(EngineError):
    """Raised when tensor shapes are inconsistent with an operation."""
    pass


class ParameterError(EngineError):
    """Raised when a numeric parameter is outside its valid range."""
    pass


class DataError(EngineError):
    """Raised when input data is empty or carries invalid labels."""
    pass


class NumericError(EngineError):
    """Raised when a computation produces non-finite values."""
    pass


class StateError(EngineError):
    """Raised when an object is used in the wrong lifecycle state."""
    pass


class FormatError(EngineError):
    """Raised when a dataset file does not match its binary layout."""
    pass


class ConsistencyError(EngineError):
    """Raised when paired dataset files disagree with each other."""
    pass


class CalibrationError(EngineError):
    """Raised when the calibration epoch cannot produce a class average."""
    pass


class ConfigError(EngineError):
    """Raised when a configuration value cannot be parsed or is invalid."""
    pass


class UsageError(EngineError):
    """Raised when the command line or config file names unknown keys."""
    pass


class ReportError(EngineError):
    """Raised when a report artifact cannot be written."""
    pass
