"""Exception hierarchy shared by every module of the package."""


class DSBMMError(Exception):
    """Base class for all package errors."""


# graph-core
class PanelError(DSBMMError):
    pass


class SelfLoopPresent(PanelError):
    pass


class AsymmetricUndirectedLayer(PanelError):
    pass


class WeightIndicatorMismatch(PanelError):
    pass


class NonPositiveWeight(PanelError):
    pass


class ParseError(PanelError):
    pass


class IndexOutOfRange(PanelError):
    pass


class DuplicateDyadTime(PanelError):
    pass


class IoError(DSBMMError, OSError):
    pass


# samplers
class NonFiniteParameter(DSBMMError, ValueError):
    pass


class InvalidParameter(DSBMMError, ValueError):
    pass


class NotPositiveDefinite(DSBMMError, ValueError):
    pass


class NotASimplex(DSBMMError, ValueError):
    pass


# generator
class UnknownPreset(DSBMMError, KeyError):
    pass


class TooFewNodes(DSBMMError, ValueError):
    pass


class InvalidConfig(DSBMMError, ValueError):
    pass


class ZeroProbabilityEntry(DSBMMError, ValueError):
    pass


# model pieces
class StateOutOfRange(DSBMMError, ValueError):
    pass


class DimensionMismatch(DSBMMError, ValueError):
    pass


class InconsistentEdge(DSBMMError, ValueError):
    pass


class SingularDesign(DSBMMError, ValueError):
    pass


class NumericalUnderflow(DSBMMError, FloatingPointError):
    pass


# chains
class DegenerateClustering(DSBMMError):
    pass


class CorruptCheckpoint(DSBMMError):
    pass


class EmptyChain(DSBMMError, ValueError):
    pass


class MissingTruth(DSBMMError, ValueError):
    pass


class LengthMismatch(DSBMMError, ValueError):
    pass


class ConstantChain(DSBMMError, ValueError):
    pass
