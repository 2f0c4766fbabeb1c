"""Exception types raised by the misalign library."""


class MisalignError(Exception):
    """Base class for all library errors."""


class EmptyCloudError(MisalignError):
    """An operation received a point cloud with no points."""


class InvalidEpsilonError(MisalignError):
    """A point transformation error value was negative."""


class DegenerateHullError(MisalignError):
    """Convex hull construction failed (coplanar or collinear input)."""


class MalformedHullError(MisalignError):
    """A hull vertex has no usable hull neighbors."""


class NotEnoughPointsError(MisalignError):
    """More samples requested than points available."""


class InvalidDistanceError(MisalignError):
    """A sensor distance was zero or negative."""


class BadMeasureError(MisalignError):
    """Weights of a discrete measure are not positive or do not sum to one."""


class NoValidNeighborhoodsError(MisalignError):
    """Every local entropy in an aggregate was undefined."""


class TooFewPointsError(MisalignError):
    """Fewer points than attention neighbors requested."""


class TrainingDivergedError(MisalignError):
    """Training loss became non-finite."""

    def __init__(self, epoch: int):
        super().__init__(f"training loss became non-finite at epoch {epoch}")
        self.epoch = epoch


class DegenerateLabelsError(MisalignError):
    """A binary fit was attempted with only one class present."""


class DegenerateVarianceError(MisalignError):
    """Correlation requested for a zero-variance sequence."""


class NoCorrespondencesError(MisalignError):
    """ICP found no inlier correspondences at the initial transform."""


class EmptyScanError(MisalignError):
    """A simulated scan produced no hits."""
