from typing import List, Optional


class MsScatterError(Exception):
    """Base class for all toolkit errors."""


class FieldValidationError(MsScatterError, ValueError):
    """Field samples are non-finite, mis-shaped, or on incompatible grids."""


class DilationAliasingError(MsScatterError, ValueError):
    """Dilation would fold mass from outside the box back into it."""


class CoverageError(MsScatterError, ValueError):
    """Requested time lies outside the stored trajectory window."""


class StencilError(MsScatterError, ValueError):
    """Not enough consecutive time nodes for a finite-difference stencil."""


class WindowError(MsScatterError, ValueError):
    """Decay-fit window is too short."""


class StepSizeError(MsScatterError, RuntimeError):
    """Adaptive sub-step fell below the minimum step size."""


class ToleranceError(MsScatterError, RuntimeError):
    """A verification failed its stated tolerance."""


class ConfigError(MsScatterError, ValueError):
    """Run configuration violates a constraint.

    Args:
        reason: Machine-readable reason code (e.g. "beta_alpha_constraint")
        message: Human-readable description
    """

    def __init__(self, reason: str, message: str):
        super().__init__(f"{reason}: {message}")
        self.reason = reason


class NonContractionError(MsScatterError, RuntimeError):
    """The fixed-point iteration stopped contracting."""

    def __init__(self, ratios: List[float], message: Optional[str] = None):
        history = ", ".join(f"{r:.3g}" for r in ratios)
        super().__init__(message or f"Gamma map is not contracting (ratios: {history}); increase T")
        self.ratios = list(ratios)
