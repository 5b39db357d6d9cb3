"""
Linear-algebra helpers shared by the reconstruction solvers.

Symmetric matrices are flattened to their upper triangle with off-diagonal
entries weighted by sqrt(2), so the Euclidean norm of the coordinates equals
the Frobenius norm of the matrix.
"""

from typing import List, Sequence, Tuple

import numpy as np
from scipy import linalg

from solvers.errors import NumericalError

RANK_RTOL = 1e-8
SQRT2 = np.sqrt(2.0)


def svec_dim(n: int) -> int:
    return n * (n + 1) // 2


def svec(S: np.ndarray) -> np.ndarray:
    """
    Symmetric matrix to weighted upper-triangle coordinates.

    Args:
        S: n×n symmetric matrix.

    Returns:
        Vector of length n(n+1)/2, row-major over the upper triangle.
    """
    n = S.shape[0]
    rows, cols = np.triu_indices(n)
    weights = np.where(rows == cols, 1.0, SQRT2)
    return weights * S[rows, cols]


def smat(v: np.ndarray, n: int) -> np.ndarray:
    """Inverse of svec."""
    rows, cols = np.triu_indices(n)
    weights = np.where(rows == cols, 1.0, 1.0 / SQRT2)
    S = np.zeros((n, n))
    S[rows, cols] = weights * v
    S[cols, rows] = weights * v
    return S


def symmetric_basis(n: int) -> List[np.ndarray]:
    """Orthonormal basis of n×n symmetric matrices matching svec ordering."""
    return [smat(e, n) for e in np.eye(svec_dim(n))]


def diagonal_basis(n: int) -> List[np.ndarray]:
    return [np.diag(e) for e in np.eye(n)]


def symmetrize(S: np.ndarray) -> np.ndarray:
    return 0.5 * (S + S.T)


def numeric_rank(M: np.ndarray, rtol: float = RANK_RTOL) -> Tuple[int, np.ndarray]:
    """
    Numerical rank with singular values below rtol·σ_max counted as zero.

    Returns:
        (rank, singular values in descending order)
    """
    if M.size == 0:
        return 0, np.zeros(0)
    sv = linalg.svd(M, compute_uv=False)
    if sv[0] == 0.0:
        return 0, sv
    return int(np.sum(sv > rtol * sv[0])), sv


def min_eig(S: np.ndarray) -> float:
    return float(np.linalg.eigvalsh(symmetrize(S))[0])


def max_eig(S: np.ndarray) -> float:
    return float(np.linalg.eigvalsh(symmetrize(S))[-1])


def is_pd(S: np.ndarray, tol: float = 0.0) -> bool:
    return min_eig(S) > tol


def is_psd(S: np.ndarray, tol: float = 1e-10) -> bool:
    scale = max(1.0, float(np.max(np.abs(S)))) if S.size else 1.0
    return min_eig(S) >= -tol * scale


def spd_solve(S: np.ndarray, rhs: np.ndarray, what: str = "matrix") -> np.ndarray:
    """
    Solve S·X = rhs through a Cholesky factorization.

    Raises:
        NumericalError: If S is not positive definite.
    """
    try:
        factor = linalg.cho_factor(symmetrize(S))
    except linalg.LinAlgError as e:
        raise NumericalError(f"{what} is not positive definite: {e}") from e
    return linalg.cho_solve(factor, rhs)


def sqrtm_psd(S: np.ndarray, inverse: bool = False) -> np.ndarray:
    """Symmetric square root (or inverse square root) of a PSD matrix."""
    w, V = np.linalg.eigh(symmetrize(S))
    w = np.clip(w, 0.0, None)
    if inverse:
        if np.any(w <= 0.0):
            raise NumericalError("inverse square root of a singular matrix")
        w = 1.0 / w
    return (V * np.sqrt(w)) @ V.T


def project_psd(S: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(symmetrize(S))
    return (V * np.clip(w, 0.0, None)) @ V.T


def block_diag(blocks: Sequence[np.ndarray]) -> np.ndarray:
    return linalg.block_diag(*blocks)


def scale_matched_error(estimate: Sequence[np.ndarray], truth: Sequence[np.ndarray]) -> Tuple[float, float]:
    """
    Relative Frobenius error after matching the scale of the truth.

    The estimate [Ĥ Q̂ R̂] is compared with α·[H Q R] where α is the
    least-squares scale ⟨est, truth⟩ / ‖truth‖².

    Returns:
        (error, alpha)
    """
    est = np.concatenate([np.ravel(b) for b in estimate])
    ref = np.concatenate([np.ravel(b) for b in truth])
    ref_norm2 = float(ref @ ref)
    if ref_norm2 == 0.0:
        raise NumericalError("reference weights are all zero")
    alpha = float(est @ ref) / ref_norm2
    if alpha == 0.0:
        return float("inf"), alpha
    err = float(np.linalg.norm(est - alpha * ref) / np.linalg.norm(alpha * ref))
    return err, alpha


def relative_error(estimate: np.ndarray, truth: np.ndarray) -> float:
    return float(np.linalg.norm(estimate - truth) / np.linalg.norm(truth))
