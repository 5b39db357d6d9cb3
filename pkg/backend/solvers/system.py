"""
Structural checks and coordinate conventions for LinearSystem.
"""

import numpy as np
from loguru import logger

from models.lqr_models import InvariantCheck, LinearSystem, SystemValidationReport
from solvers.errors import PreconditionError, StructuralError

CONTROLLABILITY_RTOL = 1e-10


def check_dimensions(system: LinearSystem) -> None:
    """
    Raise StructuralError unless A is n×n, B is n×m and C is n×n.

    C must be square and invertible, so the output dimension p equals n.
    """
    A, B, C = system.A, system.B, system.C
    if A.shape[0] != A.shape[1]:
        raise StructuralError(f"A must be square, got {A.shape}")
    n = A.shape[0]
    if B.shape[0] != n:
        raise StructuralError(f"B must have {n} rows, got {B.shape}")
    if C.shape[0] != C.shape[1]:
        raise StructuralError(f"C must be square, got {C.shape}")
    if C.shape[0] != n:
        raise StructuralError(f"C must be {n}×{n} (p = n), got {C.shape}")
    if system.noise_std.shape[0] != C.shape[0]:
        raise StructuralError(
            f"noise_std must have {C.shape[0]} entries, got {system.noise_std.shape[0]}")


def controllability_matrix(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    blocks = [B]
    for _ in range(A.shape[0] - 1):
        blocks.append(A @ blocks[-1])
    return np.hstack(blocks)


def _rank_check(name: str, M: np.ndarray, required: int, rtol: float) -> InvariantCheck:
    sv = np.linalg.svd(M, compute_uv=False)
    rank = int(np.sum(sv > rtol * sv[0])) if sv.size and sv[0] > 0 else 0
    margin = float(sv[required - 1]) if sv.size >= required else 0.0
    return InvariantCheck(name=name, passed=rank >= required, margin=margin,
                          detail=f"rank {rank} of {required}")


def validate_system(system: LinearSystem) -> SystemValidationReport:
    """
    Check the plant invariants and report the numeric margin of each.

    Args:
        system: Plant to check.

    Returns:
        Pass/fail per invariant; margins are smallest relevant singular values.

    Raises:
        StructuralError: If the dimensions disagree.
    """
    check_dimensions(system)
    n, m = system.n, system.m
    checks = [
        _rank_check("controllable", controllability_matrix(system.A, system.B), n, CONTROLLABILITY_RTOL),
        _rank_check("B full column rank", system.B, m, CONTROLLABILITY_RTOL),
        _rank_check("A invertible", system.A, n, CONTROLLABILITY_RTOL),
        _rank_check("C invertible", system.C, n, CONTROLLABILITY_RTOL),
        InvariantCheck(name="noise_std non-negative", passed=bool(np.all(system.noise_std >= 0)),
                       margin=float(np.min(system.noise_std))),
    ]
    report = SystemValidationReport(passed=all(c.passed for c in checks), n=n, m=m, p=system.p,
                                    checks=checks)
    if not report.passed:
        failed = ", ".join(c.name for c in checks if not c.passed)
        logger.debug("System validation failed: {}", failed)
    return report


def require_valid(system: LinearSystem) -> None:
    """Raise PreconditionError naming the failed invariants."""
    report = validate_system(system)
    if not report.passed:
        failed = "; ".join(f"{c.name} ({c.detail})" if c.detail else c.name
                           for c in report.checks if not c.passed)
        raise PreconditionError(f"invalid system: {failed}", stage="model")


def to_error_coordinates(initial: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Express a state relative to the target: x̄ − x_T."""
    initial = np.asarray(initial, dtype=float)
    target = np.asarray(target, dtype=float)
    if initial.shape != target.shape:
        raise StructuralError(f"state dimensions differ: {initial.shape} vs {target.shape}")
    return initial - target


def output_to_state(system: LinearSystem, outputs: np.ndarray) -> np.ndarray:
    """Invert the output map row-wise: C⁻¹y for each observation."""
    return np.linalg.solve(system.C, np.atleast_2d(outputs).T).T
