"""Exception hierarchy shared by the library and the command line."""


class CcnfError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


class ConfigError(CcnfError, ValueError):
    """Invalid run configuration; the message names the field."""

    exit_code = 2

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class DimensionalityError(CcnfError, ValueError):
    """Grid regions requested for a label space that is too large."""

    exit_code = 2


class InputError(CcnfError, ValueError):
    """Bad data handed to a library operation."""

    exit_code = 3


class ShapeError(InputError):
    """Array dimensions do not match what an operation expects."""


class DegenerateDataError(InputError):
    """Data that cannot be standardised (zero variance coordinate)."""


class ParseError(InputError):
    """A malformed series CSV file."""

    def __init__(self, message, row=None, series_id=None, step=None):
        self.row = row
        self.series_id = series_id
        self.step = step
        where = []
        if row is not None:
            where.append(f"row {row}")
        if series_id is not None:
            where.append(f"series {series_id}")
        if step is not None:
            where.append(f"step {step}")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(f"{prefix}{message}")


class TrainingDivergenceError(CcnfError):
    """The negative log-likelihood left the finite range during training."""

    exit_code = 4

    def __init__(self, message, last_finite_epoch=None):
        self.last_finite_epoch = last_finite_epoch
        if last_finite_epoch is not None:
            message = f"{message} (last finite epoch: {last_finite_epoch})"
        super().__init__(message)


class DensityEvaluationError(CcnfError):
    """A flow produced a non-finite intermediate while evaluating a density."""

    exit_code = 5


class ArtifactMismatchError(CcnfError):
    """Model, record or configuration hashes do not line up."""

    exit_code = 6


class ExportError(CcnfError):
    """Writing or reading an artifact file failed."""

    exit_code = 7


class OracleError(CcnfError):
    """The finite-difference oracle hit a non-finite evaluation."""
