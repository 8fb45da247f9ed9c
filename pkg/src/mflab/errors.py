"""Typed exceptions shared across the package."""


class MflabError(Exception):
    """Base class for all package errors."""


class DimensionMismatch(MflabError):
    """An array argument has the wrong shape for the declared dimensions."""


class UnboundedKernel(MflabError):
    """A sup-norm dependent quantity was requested for an unbounded kernel."""


class DegenerateDiffusion(MflabError):
    """min eig(sigma sigma^T) is at or below the degeneracy tolerance."""


class TooFewParticles(MflabError):
    """Interacting dynamics need at least two particles."""


class NumericalBlowup(MflabError):
    """A simulated state became non-finite.

    Carries the step index at which the first non-finite value appeared.
    """

    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(message or f"non-finite state at step {step}")


class GridMismatch(MflabError):
    """Two objects that must share a time grid do not."""


class OraclePDFailure(MflabError):
    """Covariance propagation left the positive-definite cone."""

    def __init__(self, t: float, message: str = ""):
        self.t = t
        super().__init__(message or f"covariance not positive definite at t={t}")


class SupportViolation(MflabError):
    """A measure puts mass where the reference measure has none."""


class ConfigError(MflabError):
    """An experiment configuration failed validation."""
