from typing import Optional


class DgpError(Exception):
    """Base class for every error raised by dgp_mcem."""


class KernelInputError(DgpError, ValueError):
    pass


class DegenerateConstraintError(DgpError):
    """Two constraint points are closer than the separation threshold."""

    def __init__(self, message: str, min_gap: Optional[float] = None):
        super().__init__(message)
        self.min_gap = min_gap


class NotPositiveDefiniteError(DgpError):
    """Cholesky failed at the largest jitter on the ladder."""

    def __init__(self, message: str, jitter: float):
        super().__init__(message)
        self.jitter = jitter


class McemError(DgpError):
    pass


class ConfigError(DgpError, ValueError):
    pass


class DegenerateDensityError(DgpError):
    pass


class CsvFormatError(DgpError, ValueError):
    def __init__(self, message: str, line: Optional[int] = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class SimulationError(DgpError):
    pass
