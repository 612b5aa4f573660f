"""Exception hierarchy shared by every builder.

Each error carries the name of the stage that raised it so that command-line
reports can say where a pipeline stopped.
"""


class SquashError(Exception):
    stage = "unknown"

    def __init__(self, message, stage=None):
        super().__init__(message)
        if stage is not None:
            self.stage = stage


class CertificateFailure(SquashError):
    """Base class for failures that mean an activation could not be certified."""

    stage = "certify"


class NonDifferentiable(CertificateFailure):
    pass


class ZeroDerivative(CertificateFailure):
    pass


class LambdaUnderflow(CertificateFailure):
    stage = "identity"


class NoWindowFound(CertificateFailure):
    stage = "window"


class NotIncreasing(CertificateFailure):
    stage = "window"


class CertificateError(CertificateFailure):
    pass


class IterationCap(CertificateFailure):
    stage = "step"


class MonotonicityLoss(CertificateFailure):
    stage = "step"


class DimensionMismatch(SquashError, ValueError):
    stage = "netir"


class ActivationMismatch(SquashError, ValueError):
    stage = "netir"


class IndexOutOfRange(SquashError, IndexError):
    stage = "netir"


class BudgetInfeasible(SquashError):
    pass


class VerificationFailed(SquashError):
    pass


class GapTooSmall(SquashError):
    pass


class StepBuildFailed(SquashError):
    pass


class BandNotFound(SquashError):
    stage = "decoder"


class CodePointInfeasible(SquashError):
    stage = "decoder"


class InfeasibleTolerance(SquashError):
    stage = "select_parameters"


class SchemaError(SquashError, ValueError):
    stage = "io"
