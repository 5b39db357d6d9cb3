"""
Domain errors raised by the reconstruction solvers.

Every error carries the name of the stage that raised it so the pipeline,
the CLI and the HTTP routes can report where a run broke down.
"""

from typing import Any, Optional


class ReconstructionError(Exception):
    """Base class for every failure of the reconstruction stack."""

    stage: str = "reconstruction"

    def __init__(self, message: str, *, stage: Optional[str] = None):
        super().__init__(message)
        if stage is not None:
            self.stage = stage


class StructuralError(ReconstructionError):
    """Matrix dimensions do not agree."""

    stage = "model"


class PreconditionError(ReconstructionError):
    """Input data does not satisfy the requirements of an operation."""


class NumericalError(ReconstructionError):
    """A factorization or solve failed (non-PD or singular operand)."""


class IterationLimitError(NumericalError):
    """A fixed-point iteration ran out of iterations."""

    def __init__(self, message: str, *, residual: float, iterations: int, stage: Optional[str] = None):
        super().__init__(message, stage=stage)
        self.residual = residual
        self.iterations = iterations


class RankDeficiencyError(NumericalError):
    """A regression Gram matrix is singular."""

    def __init__(self, message: str, *, step: Optional[int] = None, stage: Optional[str] = None):
        super().__init__(message, stage=stage)
        self.step = step


class DegenerateGeometryError(ReconstructionError):
    """Fitted trajectory lines are parallel or do not meet."""

    stage = "target-estimation"


class FilterUndefinedError(ReconstructionError):
    """C·B is rank deficient, so inputs cannot be recovered from outputs."""


class DomainError(ReconstructionError):
    """An argument lies outside the domain of a function (e.g. R not PD)."""


class AmbiguityError(ReconstructionError):
    """A multi-dimensional solution family holds no admissible weights."""

    stage = "weight-identification"

    def __init__(self, message: str, *, null_dimension: int, stage: Optional[str] = None):
        super().__init__(message, stage=stage)
        self.null_dimension = null_dimension


class IndefiniteWeightsError(ReconstructionError):
    """Recovered H or R is not positive definite after the sign fix."""

    stage = "weight-identification"


class HorizonSearchError(ReconstructionError):
    """Bracket expansion never found an ascending J_N."""

    stage = "horizon-search"


class FitError(ReconstructionError):
    """Polynomial baseline could not be fitted."""

    stage = "prediction"


class PipelineStageError(ReconstructionError):
    """A pipeline stage failed; the partial report is attached."""

    def __init__(self, stage: str, cause: Exception, report: Any):
        super().__init__(f"{stage}: {cause}", stage=stage)
        self.cause = cause
        self.report = report
