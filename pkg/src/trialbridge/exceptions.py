"""Exception hierarchy.

Two families matter to callers: :class:`DataValidationError` for malformed
inputs or configuration (CLI exit code 2) and :class:`SolverError` for
numerical failures (CLI exit code 3).
"""

from __future__ import annotations

from typing import Sequence

import numpy as np


class TrialBridgeError(Exception):
    """Base class for all package errors."""


class DataValidationError(TrialBridgeError, ValueError):
    """Input data or configuration violates a documented contract."""


class SolverError(TrialBridgeError, RuntimeError):
    """A numerical routine failed to produce a usable answer."""


# -- data validation -------------------------------------------------------


class SchemaError(DataValidationError):
    """Covariate names are empty or duplicated."""


class MissingColumn(DataValidationError):
    def __init__(self, column: str, source: str = ""):
        self.column = column
        self.source = source
        where = f" in {source}" if source else ""
        super().__init__(f"missing required column {column!r}{where}")


class NonNumericCell(DataValidationError):
    def __init__(self, row: int, column: str, value: str, source: str = ""):
        self.row = row
        self.column = column
        self.value = value
        where = f"{source} " if source else ""
        super().__init__(
            f"{where}row {row}, column {column!r}: value {value!r} is not a finite number"
        )


class InvalidTreatmentCode(DataValidationError):
    def __init__(self, row: int, value, source: str = ""):
        self.row = row
        self.value = value
        where = f"{source} " if source else ""
        super().__init__(f"{where}row {row}: treatment code {value!r} is not 0 or 1")


class InvalidOutcomeCode(DataValidationError):
    def __init__(self, row: int, value, source: str = ""):
        self.row = row
        self.value = value
        where = f"{source} " if source else ""
        super().__init__(f"{where}row {row}: binary outcome {value!r} is not 0 or 1")


class NonPositiveDesignWeight(DataValidationError):
    def __init__(self, row: int, value):
        self.row = row
        self.value = value
        super().__init__(f"row {row}: design weight {value!r} is not positive")


class ArmEmpty(DataValidationError):
    def __init__(self, arm: int, source: str = "trial"):
        self.arm = arm
        self.source = source
        super().__init__(f"{source} sample has no units with a={arm}")


class ArmTooSmall(DataValidationError):
    def __init__(self, arm: int, rows: int, columns: int):
        self.arm = arm
        self.rows = rows
        self.columns = columns
        super().__init__(
            f"arm a={arm} has {rows} rows but the outcome design has {columns} columns"
        )


class DimensionMismatch(DataValidationError):
    """Array shapes disagree."""


class DegenerateColumn(DataValidationError):
    def __init__(self, column):
        self.column = column
        super().__init__(f"column {column!r} has zero weighted variance")


class EmptyGrid(DataValidationError):
    """A tuning grid was empty."""


# -- solver failures -------------------------------------------------------


class SingularJacobian(SolverError):
    def __init__(self, columns: Sequence):
        self.columns = list(columns)
        super().__init__(
            "calibration basis is rank deficient over the trial rows; "
            f"offending columns: {', '.join(map(str, self.columns))}"
        )


class NotConverged(SolverError):
    def __init__(self, message: str, last_iterate=None, residual_norm: float = np.nan,
                 iterations: int = 0):
        self.last_iterate = None if last_iterate is None else np.array(last_iterate)
        self.residual_norm = float(residual_norm)
        self.iterations = iterations
        super().__init__(
            f"{message} (iterations={iterations}, residual={self.residual_norm:.3g})"
        )


class RankDeficientDesign(SolverError):
    """Regression design matrix does not have full column rank."""


class Separation(SolverError):
    """Logistic fit diverges (perfect or quasi-perfect separation)."""


class AllFoldsFailed(SolverError):
    """Every cross-validation fit failed for every grid value."""


class TooManyFailures(SolverError):
    def __init__(self, failures: int, B: int):
        self.failures = failures
        self.B = B
        super().__init__(f"{failures} of {B} bootstrap replicates failed")


class EmptyKernelNeighborhood(SolverError):
    def __init__(self, index: int, arm: int):
        self.index = index
        self.arm = arm
        super().__init__(
            f"kernel weights for trial row {index} vanish within arm a={arm}"
        )


# -- Monte Carlo -------------------------------------------------------------


class ReplicateDataError(DataValidationError):
    def __init__(self, replicate: int, cause: str):
        self.replicate = replicate
        self.cause = cause
        super().__init__(f"replicate {replicate}: {cause}")

    def __reduce__(self):
        return type(self), (self.replicate, self.cause)


class ReplicateSolverError(SolverError):
    def __init__(self, replicate: int, cause: str):
        self.replicate = replicate
        self.cause = cause
        super().__init__(f"replicate {replicate}: {cause}")

    def __reduce__(self):
        return type(self), (self.replicate, self.cause)
