"""Exception types shared across the package."""


class EquifuseError(Exception):
    """Base class for every error raised by this package."""


class ContractError(EquifuseError, ValueError):
    """A documented precondition was violated by the caller."""


class ShapeError(ContractError):
    """Operand shapes are incompatible."""


class DomainError(ContractError):
    """A value lies outside an operation's numeric domain."""


class DegenerateInputError(ContractError):
    """Input is degenerate for the requested computation (e.g. a zero-norm row)."""


class NumericError(EquifuseError, ArithmeticError):
    """Non-finite values appeared where finite ones are required."""


class ConfigError(EquifuseError, ValueError):
    """Configuration file is missing, malformed, or inconsistent."""


class TrainingAbort(EquifuseError, RuntimeError):
    """Training hit a non-finite loss; carries diagnostics for triage."""

    def __init__(self, message, batch_id=None, energies=None):
        super().__init__(message)
        self.batch_id = batch_id
        self.energies = dict(energies) if energies else {}
