"""Exception hierarchy shared across the package."""


class StreamSegError(Exception):
    """Base class for all errors raised by this package."""


# -- frame / field validation ------------------------------------------------

class EmptyFrame(StreamSegError):
    pass


class InvalidPose(StreamSegError):
    pass


class NonFiniteCoordinate(StreamSegError):
    pass


class UnknownRawId(StreamSegError):
    pass


class LengthMismatch(StreamSegError):
    pass


class ShapeMismatch(StreamSegError):
    pass


# -- spatial -----------------------------------------------------------------

class EmptyInput(StreamSegError):
    pass


class KTooLarge(StreamSegError):
    pass


# -- prototypes / temporal ---------------------------------------------------

class NoSeenClasses(StreamSegError):
    pass


class DegenerateVector(StreamSegError):
    pass


# -- model / training --------------------------------------------------------

class NoGroundTruth(StreamSegError):
    pass


class CheckpointMismatch(StreamSegError):
    pass


# -- stream I/O --------------------------------------------------------------

class ConfigInvalid(StreamSegError):
    pass


class IoFailure(StreamSegError):
    pass


class MalformedRecord(StreamSegError):
    pass


class PoseCountMismatch(StreamSegError):
    pass
