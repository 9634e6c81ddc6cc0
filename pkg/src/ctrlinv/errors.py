"""Exception hierarchy.

Validation problems (bad arguments, malformed files) derive from
:class:`ValidationError`; failures of the numerics derive from
:class:`NumericalError`.  The CLI maps the two families to exit codes 2 and 3.
"""


class CtrlInvError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(CtrlInvError, ValueError):
    """Invalid user input (parameters, partitions, files)."""


class NumericalError(CtrlInvError, ArithmeticError):
    """A numerical routine failed or a structural assumption does not hold."""


class ParameterError(ValidationError):
    pass


class OutputSpecError(ValidationError):
    pass


class PlanError(ValidationError):
    pass


class ModelFileError(ValidationError):
    pass


class WiringError(ValidationError):
    pass


class ReductionError(NumericalError):
    pass


class ConsensusError(NumericalError):
    """The zero (consensus) eigenvalue is missing or not simple."""


class SynthesisError(NumericalError):
    pass


class RiccatiError(NumericalError):
    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class SpectrumError(NumericalError):
    pass


class TruncationError(NumericalError):
    pass


class StabilityError(NumericalError):
    def __init__(self, message, eigenvalues=None):
        super().__init__(message)
        self.eigenvalues = eigenvalues


class StageError(CtrlInvError):
    """Wraps an error raised inside a named design-pipeline stage."""

    def __init__(self, stage, cause):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause
