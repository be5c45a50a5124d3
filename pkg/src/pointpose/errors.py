"""Exception types shared across the toolkit.

The CLI maps these onto exit codes: usage errors exit 1, data errors exit 2,
numerical failures exit 3.
"""


class PointPoseError(Exception):
    """Base class for all toolkit errors."""


class InvalidInputError(PointPoseError):
    """An operation was called with arguments violating its contract."""


class DataError(PointPoseError):
    """A file, dataset or record is malformed or inconsistent."""


class ConfigError(DataError):
    """A configuration value has the wrong type or an unusable value."""


class NumericalError(PointPoseError):
    """A numerical procedure failed (degeneracy, divergence)."""


class AlignmentError(NumericalError):
    """Rigid alignment failed (size mismatch or degenerate correspondences)."""


class PoseSolveError(NumericalError):
    """Pose recovery from box hypotheses failed."""


class DivergenceError(NumericalError):
    """Training produced a non-finite loss."""


class LayoutError(PointPoseError):
    """Scene layout sampling exhausted its retry budget."""
