"""Exception types shared across the package."""


class ScanError(Exception):
    """Base class for errors raised by scan_xai."""


class DomainError(ScanError, ValueError):
    """An argument is outside the mathematical domain of an operation."""


class ConfigurationError(ScanError):
    """Incompatible models, layers, or settings."""


class TrainingError(ScanError, RuntimeError):
    """Training diverged; carries the last good state when one exists."""

    def __init__(self, message, last_good_state=None, diagnostics=None):
        super().__init__(message)
        self.last_good_state = last_good_state
        self.diagnostics = diagnostics or {}
