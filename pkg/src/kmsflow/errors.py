"""Exception types shared across the package."""


class KmsFlowError(Exception):
    """Base class. Carries an optional residual for diagnostics."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class NonHermitian(KmsFlowError):
    pass


class NonSquare(KmsFlowError):
    pass


class NotPositive(KmsFlowError):
    pass


class NonPositiveInput(KmsFlowError):
    pass


class SizeTooLarge(KmsFlowError):
    pass


class ModelMismatch(KmsFlowError):
    pass


class NotInRelativeCommutant(KmsFlowError):
    pass


class UnsupportedTarget(KmsFlowError):
    pass


class NegativeL0(KmsFlowError):
    pass


class PreconditionViolated(KmsFlowError):
    pass


class ConstraintViolated(KmsFlowError):
    pass


class InvalidMu(KmsFlowError):
    pass


class NegativeTime(KmsFlowError):
    pass


class NotErgodic(KmsFlowError):
    pass


class NoConvergence(KmsFlowError):
    pass


class DecompositionFailed(KmsFlowError):
    pass


class RangeMismatch(KmsFlowError):
    pass


class NonDiagonalizable(KmsFlowError):
    pass


class InconsistentSystem(KmsFlowError):
    def __init__(self, message, residual=None, solution=None):
        super().__init__(message, residual)
        self.solution = solution


class NotCalibrated(KmsFlowError):
    pass


class CalibrationFailed(KmsFlowError):
    pass


class OutOfRange(KmsFlowError):
    pass


class PositivityLost(KmsFlowError):
    pass


class TailNotBounded(KmsFlowError):
    pass


class NoLinearRelation(KmsFlowError):
    pass


class InvalidParameters(KmsFlowError):
    pass


class ConventionRejected(KmsFlowError):
    pass


class ConfigInvalid(KmsFlowError):
    pass
