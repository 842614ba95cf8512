"""Exception types shared across the package."""


class BlockVioError(Exception):
    """Base class for all package-specific errors."""


class NonPositiveDepth(BlockVioError):
    """A point's camera-frame depth fell at or below the usable floor."""


class EmptyImuSpan(BlockVioError):
    """Preintegration was asked to run over fewer than two samples."""


class NonMonotoneTimestamps(BlockVioError):
    """Sample or frame timestamps are not strictly increasing."""


class NoValidReference(BlockVioError):
    """No admissible reference frame exists for an observation."""


class DimensionMismatch(BlockVioError):
    """An operand's shape disagrees with the state layout."""


class UninitializedState(BlockVioError):
    """A state element was used before it was given a value."""


class SingularEliminationBlock(BlockVioError):
    """A pivot block in the elimination was numerically singular."""


class DegeneratePredictionJacobian(BlockVioError):
    """The depth-transport derivative is too close to zero to invert."""


class SingularSystem(BlockVioError):
    """The assembled normal equations have no unique solution."""


class PlanStale(BlockVioError):
    """The elimination plan no longer matches the window structure."""


class DivergedSolve(BlockVioError):
    """The first optimizer iteration could not decrease the cost."""


class InsufficientPairs(BlockVioError):
    """Trajectory alignment was given fewer matched poses than it needs."""


class InvalidConfig(BlockVioError):
    """A configuration file or value is malformed or unknown."""


class InvalidScenario(BlockVioError):
    """A simulation scenario description is inconsistent."""


class DatasetIncomplete(BlockVioError):
    """A dataset directory is missing one of its required files."""
