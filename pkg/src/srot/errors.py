"""Exception types raised across the package."""


class SrotError(ValueError):
    """Base class for every error raised by :mod:`srot`."""


class InvalidWeights(SrotError):
    pass


class InvalidPoint(SrotError):
    pass


class InvalidMass(SrotError):
    pass


class EmptyMeasure(SrotError):
    pass


class MassMismatch(SrotError):
    pass


class SolverFailure(SrotError):
    pass


class UnsupportedCost(SrotError):
    pass


class InvalidArchitecture(SrotError):
    pass


class InvalidDataset(SrotError):
    pass


class InvalidGamma(SrotError):
    pass


class MismatchedReference(SrotError):
    pass


class DefinitionCheckFailed(SrotError):
    """A generated dataset violated the outlier-type inequality it was built for."""


class InvalidParameter(SrotError):
    pass
