"""Exception hierarchy shared by the library, the CLI and the service.

Every class carries the CLI exit code it maps to:
0 success, 2 I/O, 3 validation, 4 numerical failure.
"""

from typing import Optional, Sequence


class CovPropError(Exception):
    """Base class for all library errors."""

    exit_code: int = 3


class ShapeError(CovPropError):
    """Two shapes that must agree do not."""

    exit_code = 3

    def __init__(self, what: str, expected: Sequence[int], actual: Sequence[int]):
        self.expected = tuple(expected)
        self.actual = tuple(actual)
        super().__init__(f"{what}: expected shape {self.expected}, got {self.actual}")


class ValidationFailure(CovPropError):
    """A network spec, config or dataset violates an invariant."""

    exit_code = 3


class ModelFormatError(CovPropError):
    """The model file container cannot be decoded."""

    exit_code = 2


class VersionMismatchError(ModelFormatError):
    pass


class TruncatedPayloadError(ModelFormatError):
    pass


class ShapeInconsistencyError(ModelFormatError):
    pass


class DatasetError(CovPropError):
    exit_code = 2


class NumericalError(CovPropError):
    exit_code = 4


class DomainError(NumericalError):
    """An argument lies outside the mathematical domain of a function."""


class TrainingDivergedError(NumericalError):
    def __init__(self, epoch: int, batch: int, detail: Optional[str] = None):
        self.epoch = epoch
        self.batch = batch
        message = f"Loss became non-finite at epoch {epoch}, batch {batch}"
        super().__init__(f"{message}: {detail}" if detail else message)


class InvariantBreach(CovPropError):
    """Internal consistency check failed; indicates a bug rather than bad input."""

    exit_code = 4
