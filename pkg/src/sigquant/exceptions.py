"""Exception hierarchy shared by every sigquant module."""


class SigquantError(Exception):
    """Base class for all library errors."""


class ConfigurationError(SigquantError, ValueError):
    """Inconsistent quantizer or run configuration."""


class NumericError(SigquantError, FloatingPointError):
    """A non-finite value appeared where a finite one is required."""


class ContractError(SigquantError, ValueError):
    """A precondition of an operation was violated (shapes, modes)."""


class CalibrationError(SigquantError, ValueError):
    """Scale or activation-range calibration saw degenerate data."""


class DegenerateInputError(SigquantError, ValueError):
    """Too few distinct values to form the requested clusters."""


class InitializationError(SigquantError, ValueError):
    """Initialized quantizer parameters violate their invariants."""


class DiagnosticError(SigquantError, ValueError):
    """A diagnostic could not be evaluated (e.g. empty grid)."""


class EncodingError(SigquantError, ValueError):
    """A value cannot be represented by the requested bit-packed codebook."""


class ParseError(SigquantError, ValueError):
    """Malformed dataset, config or model file."""


class DivergenceError(SigquantError, RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch, message=None):
        self.epoch = epoch
        super().__init__(message or f"training diverged at epoch {epoch}: non-finite loss")
