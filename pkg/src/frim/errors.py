"""Exception hierarchy shared across the package."""


class FRIMError(Exception):
    """Base class for all package errors."""


class InputError(FRIMError):
    """Bad input data or configuration (CLI exit code 2)."""


class EmptyInputError(InputError):
    def __init__(self, msg="empty-input"):
        super().__init__(msg)


class SchemaError(InputError):
    """A mapped column is missing from the input file."""


class ValidationError(InputError):
    """Input values violate a dataset invariant."""


class BinningError(InputError):
    """Bin layout cannot be built or leaves a bin without records."""


class GLMMError(FRIMError):
    """A local GLMM could not be fit; the pipeline treats the bin as missing."""


class SingularDesignError(InputError):
    """Collinear fixed-effect columns; not recoverable by dropping a bin."""


class SmoothingError(FRIMError):
    pass


class MFPCAError(FRIMError):
    pass


class SamplerError(FRIMError):
    """Non-finite conditional covariance or similar chain-level failure."""


class ConvergenceBudgetError(FRIMError):
    """Too many replicates or bins failed (CLI exit code 3)."""
