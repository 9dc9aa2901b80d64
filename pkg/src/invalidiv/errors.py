"""Exception and warning classes raised by invalidiv."""


class InvalidIVError(ValueError):
    """Base class for all errors raised by this package."""


class DimensionMismatch(InvalidIVError):
    pass


class RankDeficient(InvalidIVError):
    pass


class NonPositiveSE(InvalidIVError):
    pass


class EmptyInput(InvalidIVError):
    pass


class MissingSampleSize(InvalidIVError):
    pass


class EmptyValidSet(InvalidIVError):
    pass


class ZeroFirstStage(InvalidIVError):
    pass


class DegenerateK(InvalidIVError):
    pass


class NonPositiveLambda(InvalidIVError):
    pass


class Underidentified(InvalidIVError):
    pass


class CombinatorialLimit(InvalidIVError):
    pass


class InvalidAlphas(InvalidIVError):
    pass


class GridTooCoarse(InvalidIVError):
    pass


class GridTooFine(InvalidIVError):
    pass


class SplitTooSmall(InvalidIVError):
    pass


class WeakCurvatureError(InvalidIVError):
    """The nonlinear first stage carries no usable curvature."""


class HomoskedasticExposure(InvalidIVError):
    """The GENIUS interaction instruments have numerically zero covariance with D."""


class NumericalOverflow(InvalidIVError):
    pass


class OptimizerDiverged(InvalidIVError):
    pass


class InvalidScenario(InvalidIVError):
    pass


class UnknownMethod(InvalidIVError):
    pass


class MethodOptionError(InvalidIVError):
    pass


class ParseError(InvalidIVError):
    """Input could not be parsed; ``line`` is 1-based when known."""

    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}" if where else f"line {line}"
        super().__init__(f"{where}: {message}" if where else message)


class InvalidIVWarning(UserWarning):
    """Base class for diagnostic warnings."""


class WeakCurvature(InvalidIVWarning):
    pass


class Homoskedastic(InvalidIVWarning):
    pass


class IdentificationWeak(InvalidIVWarning):
    pass


class WeakInteractionInstrument(InvalidIVWarning):
    pass


class InitializerDegenerate(InvalidIVWarning):
    pass


class WeakFirstStage(InvalidIVWarning):
    pass


class CorrelatedInstruments(InvalidIVWarning):
    pass
