"""Exception hierarchy shared by the jumpex modules and the experiment pipeline."""


class JumpexError(ValueError):
    """Base class for every error raised on purpose by jumpex"""


class ConfigError(JumpexError):
    """A config file or CLI override is malformed; `field` names the dotted path"""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class ModelValidationError(JumpexError):
    """The market model violates one of its coefficient or jump-measure conditions"""


class DecompositionError(JumpexError):
    """A matrix handed to the PSD square root is asymmetric or indefinite"""

    def __init__(self, message: str, min_eigenvalue: float = float("nan")):
        self.min_eigenvalue = min_eigenvalue
        super().__init__(f"{message} (min eigenvalue {min_eigenvalue:.3e})")


class AdmissibilityError(JumpexError):
    """A control or law is not admissible (singular covariance, non-PD scale)"""


class UnsupportedJumpLawError(JumpexError):
    """The jump-size law has no quadrature rule"""


class UnsupportedCoefficientFamilyError(JumpexError, NotImplementedError):
    """Only constant and proportional coefficients have a closed-form alpha"""


class DomainError(JumpexError):
    """Argument outside the domain of a closed-form formula"""


class InconclusiveEstimateError(JumpexError):
    """A Monte Carlo denominator is statistically indistinguishable from zero"""


class DegenerateJumpError(JumpexError):
    """A simulated path produced a jump of Z equal to one"""


class InputError(JumpexError):
    """Bad input to an analysis routine (sample size, test-function support)"""
