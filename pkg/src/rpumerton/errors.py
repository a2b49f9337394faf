"""Exception types shared across the package."""


class RpuMertonError(Exception):
    """Base class for all package-specific errors."""


class NonPositiveSigma(RpuMertonError):
    """A volatility coefficient evaluated to a non-positive value."""


class CorrelationOutOfRange(RpuMertonError):
    """Stock-factor correlation outside the open interval (-1, 1)."""


class TemperatureNonPositive(RpuMertonError):
    """Temperature must be strictly positive on the grid (or identically zero)."""


class PicardDivergence(RpuMertonError):
    """Picard iteration hit its cap with residual above tolerance."""


class NonFiniteField(RpuMertonError):
    """A PDE solve produced NaN or infinity mid-march."""


class NonFinitePath(RpuMertonError):
    """A simulated trajectory produced NaN or infinity."""


class DegeneratePolicy(RpuMertonError):
    """Operation requires strictly positive policy variance."""


class OutOfDomain(RpuMertonError):
    """Query point lies outside the grid rectangle."""


class InsufficientGrids(RpuMertonError):
    """Convergence probe needs at least three grids."""


class DegenerateData(RpuMertonError):
    """Order check received values indistinguishable from zero."""


class GammaOutOfRange(RpuMertonError):
    """Risk aversion outside the range required by the operation."""


class ConditionViolated(RpuMertonError):
    """Premise of the finite-time explosion formula does not hold."""


class StepSizeUnderflow(RpuMertonError):
    """ODE integrator could not resolve the trajectory near the singularity."""


class ParseError(RpuMertonError):
    """Scenario document is not well-formed JSON."""


class SchemaError(RpuMertonError):
    """Scenario document has unknown or missing keys."""


class RangeError(RpuMertonError):
    """Scenario value outside its admissible range."""
