"""Exception types shared across the package."""


class MmasrError(Exception):
    """Base class for all package errors."""


class ShapeError(MmasrError, ValueError):
    """Operand shapes are incompatible for an operation."""


class ContractError(MmasrError):
    """A caller violated an operation's precondition."""


class InputError(MmasrError, ValueError):
    """Input data is invalid for the requested operation."""


class FormatError(MmasrError):
    """A file on disk does not match its documented format."""


class GenerationError(MmasrError):
    """Synthetic data generation could not satisfy its constraints."""


class AmbiguousMatch(MmasrError):
    """Visual decoding found several candidate bags within tolerance."""

    def __init__(self, message, candidates):
        super().__init__(message)
        self.candidates = candidates


class TrainingDivergence(MmasrError):
    """Training produced a non-finite loss.

    ``last_good`` holds the parameter snapshot from the last finite step.
    """

    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good
