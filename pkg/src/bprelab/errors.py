"""Exception taxonomy shared across the package."""


class BPRELabError(Exception):
    """Base class for all package errors."""


class DomainError(BPRELabError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class DeltaBoundError(DomainError):
    """A scenario's mean-matrix entry ratio exceeds the declared bound."""


class DegenerateModelError(BPRELabError):
    """The model is degenerate for the requested computation (e.g. |M| = 0)."""


class UnsupportedFamilyError(BPRELabError):
    """An offspring family does not support the requested operation."""


class UnsupportedDimensionError(BPRELabError):
    """Structured grids only cover small type counts (p <= 3)."""


class BudgetError(BPRELabError):
    """An enumeration or iteration cap was exceeded."""


class ConvergenceError(BPRELabError):
    """Iterative solver failed to reach its tolerance."""

    def __init__(self, message: str, last_residual: float | None = None):
        super().__init__(message)
        self.last_residual = last_residual


class ParticleCapError(BPRELabError):
    """Population simulation exceeded its particle cap.

    Carries the partial trajectory simulated so far.
    """

    def __init__(self, message: str, trajectory=None):
        super().__init__(message)
        self.trajectory = trajectory


class ConfigError(BPRELabError):
    """A run configuration failed validation.

    ``key_path`` names the offending configuration key.
    """

    def __init__(self, message: str, key_path: str = ""):
        super().__init__(f"{key_path}: {message}" if key_path else message)
        self.key_path = key_path
