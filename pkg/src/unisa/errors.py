"""Exception types raised across the package."""


class UnisaError(Exception):
    """Base class for all package errors."""


# tensor core
class ShapeMismatch(UnisaError, ValueError):
    pass


class UnboundLeaf(UnisaError):
    pass


class NonScalarRoot(UnisaError, ValueError):
    pass


class UnknownParameter(UnisaError, KeyError):
    pass


class DegenerateNorm(UnisaError, ValueError):
    pass


class NonFiniteValue(UnisaError, FloatingPointError):
    pass


# model
class NoiseOutOfBound(UnisaError, ValueError):
    pass


class MissingAnchor(UnisaError):
    pass


# clustering
class TooFewPoints(UnisaError, ValueError):
    pass


class EmptyInput(UnisaError, ValueError):
    pass


class LabelOutOfRange(UnisaError, ValueError):
    pass


class EmptyClusterSet(UnisaError, ValueError):
    pass


class NoAnchors(UnisaError, ValueError):
    pass


class MissingClassMap(UnisaError):
    pass


# losses
class NoNegatives(UnisaError, ValueError):
    pass


class DegenerateClusterCount(UnisaError, ValueError):
    pass


class SingleCluster(UnisaError, ValueError):
    pass


class EmptyBatch(UnisaError, ValueError):
    pass


# ball generator
class ZeroDirection(UnisaError, ArithmeticError):
    pass


# trainer / data
class EmptyTask(UnisaError, ValueError):
    pass


class ClassOverlap(UnisaError, ValueError):
    pass


class InvalidConfig(UnisaError, ValueError):
    pass


class NotEnoughClasses(UnisaError, ValueError):
    pass


class NotEnoughSamples(UnisaError, ValueError):
    pass


# cli / metrics
class ParseError(UnisaError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class ValidationError(UnisaError, ValueError):
    def __init__(self, field: str, message: str = "invalid value"):
        self.field = field
        super().__init__(f"{field}: {message}")


class LengthMismatch(UnisaError, ValueError):
    pass


class EmptyPredictions(UnisaError, ValueError):
    pass
