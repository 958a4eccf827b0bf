"""Exception hierarchy shared across all subsystems."""


class DynreconError(Exception):
    """Base class for all errors raised by this package."""


# geometry
class NonPositiveDepth(DynreconError):
    pass


class NonPositiveDisparity(DynreconError):
    pass


class EmptyInput(DynreconError):
    pass


class AllZeroWeights(DynreconError):
    pass


class DegenerateConfiguration(DynreconError):
    pass


# tracking
class MissingEdge(DynreconError):
    pass


class NoConnectedEdges(DynreconError):
    pass


class ZeroMeanFlow(DynreconError):
    pass


class SingularNormalEquations(DynreconError):
    pass


# masking
class EvenKernel(DynreconError):
    pass


class OracleFailure(DynreconError):
    pass


# depth
class NoValidSamples(DynreconError):
    pass


class ConstantMonoDepth(DynreconError):
    pass


class InsufficientOverlap(DynreconError):
    pass


# scaffold
class NoVisibleTimestep(DynreconError):
    pass


class MissingUpdate(DynreconError):
    pass


# splatting
class BehindCamera(DynreconError):
    pass


class StaleForwardState(DynreconError):
    pass


# reconstruction
class NoStaticPixels(DynreconError):
    pass


class EmptyMask(DynreconError):
    pass


class MissingAnchor(DynreconError):
    pass


class NonFiniteLoss(DynreconError):
    pass


# io / eval
class InsufficientAssociations(DynreconError):
    pass


class ShapeMismatch(DynreconError):
    pass


class InvalidSpec(DynreconError):
    pass


class ConfigError(DynreconError):
    pass
