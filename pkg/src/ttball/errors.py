"""Exception types raised across the package."""


class TTBallError(Exception):
    """Base class for all package errors."""


class NonFiniteState(TTBallError):
    pass


class BadContact(TTBallError):
    pass


class NonUnitQuaternion(TTBallError):
    pass


class TooFewSamples(TTBallError):
    pass


class TimestampMismatch(TTBallError):
    pass


class NoConvergence(TTBallError):
    pass


class UnsortedInput(TTBallError):
    pass


class DegenerateVelocity(TTBallError):
    pass


class DegenerateCorners(TTBallError):
    pass


class DegenerateView(TTBallError):
    pass


class NoPairedSamples(TTBallError):
    pass


class PoolExhausted(TTBallError):
    pass


class BadProblem(TTBallError):
    pass


class InconsistentInputs(TTBallError):
    pass


class EmptyInput(TTBallError):
    pass


class ConfigError(TTBallError):
    pass
