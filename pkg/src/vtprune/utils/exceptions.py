"""Custom exceptions for vtprune."""


class VtPruneError(Exception):
    """Base exception for all vtprune errors."""

    pass


class ShapeError(VtPruneError):
    """Raised when matrix or token dimensions do not line up."""

    pass


class ArgumentError(VtPruneError):
    """Raised when a scalar argument is outside its valid range."""

    pass


class ContractError(VtPruneError):
    """Raised when an input breaks an operation's documented contract."""

    pass


class NumericError(VtPruneError):
    """Raised when an operation produces NaN or Inf."""

    pass


class TrainingError(VtPruneError):
    """Raised when training diverges."""

    def __init__(self, step: int, message: str):
        super().__init__(f"training diverged at step {step}: {message}")
        self.step = step


class ConfigError(ArgumentError):
    """Raised when a run configuration cannot be parsed."""

    def __init__(self, key: str, message: str):
        super().__init__(f"config key '{key}': {message}")
        self.key = key


class ReportIOError(VtPruneError):
    """Raised when a report file cannot be written."""

    def __init__(self, path, message: str):
        super().__init__(f"cannot write report {path}: {message}")
        self.path = path
