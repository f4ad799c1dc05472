"""Exception hierarchy for the ToA SLAM back-end."""
from typing import Optional


class ToaSlamError(Exception):
    """Base class for every error raised by this package"""


class ConfigError(ToaSlamError):
    """Scenario or application config could not be parsed"""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DegenerateGeometry(ToaSlamError):
    """Point sets too degenerate to fix a rotation"""


class ZeroVariance(ToaSlamError):
    """Estimate points coincide, scale undefined"""


class InvalidInitialValue(ToaSlamError):
    """Initial value not valid for the variable kind"""


class SingularSystem(ToaSlamError):
    """Normal equations rank-deficient even with damping"""


class NoFreeVariables(ToaSlamError):
    """Nothing left to optimize"""


class NeverOptimized(ToaSlamError):
    """Marginal information requested before any optimization"""


class DegenerateRange(ToaSlamError):
    """Receiver maps onto the station position"""


class NoToaFactors(ToaSlamError):
    """Refinement needs at least one ToA factor"""


class NotMonocular(ToaSlamError):
    """Scale refinement requested outside monocular mode"""


class EmptyStream(ToaSlamError):
    """Odometry stream has no keyframe interval"""


class NonMonotonicTimestamps(ToaSlamError):
    """Stream timestamps go backwards"""


class TooFewWaypoints(ToaSlamError):
    """Synthetic trajectory needs at least two waypoints"""


class TooFewPoses(ToaSlamError):
    """Fewer than three associated pose pairs"""


class AssociationError(ToaSlamError):
    """Timestamps could not be associated within the window"""


class SingularGeometry(ToaSlamError):
    """GDOP design matrix is rank-deficient"""


class AllSingular(ToaSlamError):
    """Every trajectory sample had singular GDOP geometry"""
