"""Exception hierarchy shared by every subpackage.

The CLI prints ``error: <ClassName>: <message>`` for any of these, so the
class name is the machine-parsable error kind.
"""


class WsiInrError(Exception):
    pass


class ShapeError(WsiInrError, ValueError):
    """Operand shapes are incompatible with the requested op."""


class NumericalError(WsiInrError, FloatingPointError):
    """An op produced NaN or Inf from finite inputs, or a loss went non-finite."""


class ConfigError(WsiInrError, ValueError):
    pass


class DomainError(WsiInrError, ValueError):
    """A coordinate or pixel index lies outside its valid domain."""


class OracleInvalidError(WsiInrError):
    """The finite-difference oracle cannot be trusted (non-deterministic loss)."""


class GenerationError(WsiInrError):
    pass


class DataError(WsiInrError, IOError):
    pass


class CheckpointError(WsiInrError):
    pass


class InvariantViolation(WsiInrError, AssertionError):
    """An internal contract was broken, e.g. gradient reached a frozen group."""


class UsageError(WsiInrError, ValueError):
    """Bad command-line usage: unknown flag, missing argument, bad value."""


class GradcheckFailed(WsiInrError):
    pass
