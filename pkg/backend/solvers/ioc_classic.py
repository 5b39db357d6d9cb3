"""
Weight recovery for the classic objective x_NᵀHx_N + Σ (x_kᵀQx_k + u_kᵀRu_k)
from a gain sequence that ends at the final step.

Every gain satisfies RK_k = BᵀP_{k+1}A^c_k, and with the gains known P_{k+1}
is linear in (H, Q, R). Unrolling the recursion gives, for i = 1..T and
k = N − i,

    a_i (I_i ⊗ R) b_i = c_i diag(H, I_{i-1} ⊗ Q) d_i,

which is linear and homogeneous in the weights. The weights are recovered
from the structured null space of the stacked coefficient matrix, up to the
scale that no gain sequence can reveal.
"""

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger
from scipy import linalg, optimize

from lqr_utils import (RANK_RTOL, diagonal_basis, max_eig, min_eig, numeric_rank, project_psd, smat, sqrtm_psd,
                       svec, svec_dim, symmetric_basis, symmetrize)
from models.lqr_models import Feasibility, LinearSystem, SolveMode
from solvers.errors import AmbiguityError, IndefiniteWeightsError, PreconditionError
from solvers.system import check_dimensions

STAGE = "weight-identification"
NEAR_NULL_GAP = 1e2
REWEIGHT_ITERATIONS = 3
DIFF_STEP = 1e-7
COVARIANCE_RIDGE = 1e-9
INFEASIBLE = 1e3            # penalty floor of the condition search


class _ClosedLoopProducts:
    """Φ(j, s) = A^c_{j-1}···A^c_s over a window of gains, Φ(s, s) = I."""

    def __init__(self, A: np.ndarray, B: np.ndarray, gains: Sequence[np.ndarray]):
        self.Ac = [A - B @ K for K in gains]
        self.n = A.shape[0]

    def __call__(self, j: int, s: int) -> np.ndarray:
        out = np.eye(self.n)
        for r in range(s, j):
            out = self.Ac[r] @ out
        return out


@dataclass(frozen=True)
class GainRelationCoefficients:
    """
    Coefficients a_i (m×im), b_i (im×n), c_i (m×in), d_i (in×n) for i = 1..T,
    stored at list index i − 1.
    """
    a: List[np.ndarray]
    b: List[np.ndarray]
    c: List[np.ndarray]
    d: List[np.ndarray]
    n: int
    m: int

    @property
    def T(self) -> int:
        return len(self.a)

    def lhs(self, i: int, R: np.ndarray) -> np.ndarray:
        return self.a[i - 1] @ np.kron(np.eye(i), R) @ self.b[i - 1]

    def rhs(self, i: int, H: np.ndarray, Q: np.ndarray) -> np.ndarray:
        middle = linalg.block_diag(H, *([Q] * (i - 1)))
        return self.c[i - 1] @ middle @ self.d[i - 1]

    def residual(self, i: int, H: np.ndarray, Q: np.ndarray, R: np.ndarray) -> np.ndarray:
        return self.lhs(i, R) - self.rhs(i, H, Q)


def build_gain_relations(gains: Sequence[np.ndarray], system: LinearSystem) -> GainRelationCoefficients:
    """
    Coefficients of the linear weight relation from the last T gains.

    Args:
        gains: K_{N-T}..K_{N-1}, ordered and ending at the final step.
        system: Plant.
    """
    check_dimensions(system)
    gains = [np.asarray(K, dtype=float) for K in gains]
    T = len(gains)
    if T < 1:
        raise PreconditionError("at least one gain is required", stage=STAGE)
    A, B = system.A, system.B
    m = system.m
    Phi = _ClosedLoopProducts(A, B, gains)
    N = T
    a, b, c, d = [], [], [], []
    for i in range(1, T + 1):
        k = N - i
        later = range(k + 1, N)
        a.append(np.hstack([np.eye(m)] + [-B.T @ Phi(j, k + 1).T @ gains[j].T for j in later]))
        b.append(np.vstack([gains[k]] + [gains[j] @ Phi(j, k) for j in later]))
        c.append(B.T @ np.hstack([Phi(N, k + 1).T] + [Phi(j, k + 1).T for j in later]))
        d.append(np.vstack([Phi(N, k)] + [Phi(j, k) for j in later]))
    return GainRelationCoefficients(a=a, b=b, c=c, d=d, n=system.n, m=m)


@dataclass(frozen=True)
class StackedIdentificationSystem:
    """
    Φ_T·θ = 0 with θ = (svec H, svec Q, svec R).

    Phi_full is the same map over every matrix entry, without symmetry.
    """
    Phi_T: np.ndarray
    Phi_full: np.ndarray
    n: int
    m: int
    T: int

    @property
    def parameter_dim(self) -> int:
        return 2 * svec_dim(self.n) + svec_dim(self.m)

    @property
    def parameter_dim_full(self) -> int:
        return 2 * self.n * self.n + self.m * self.m

    @property
    def rank_threshold(self) -> int:
        """n² + n + (m² + m)/2."""
        return self.n * self.n + self.n + (self.m * self.m + self.m) // 2

    @property
    def block_scale(self) -> np.ndarray:
        """
        Weights w with ‖w ⊙ θ‖² = ‖H‖² + (T−1)‖Q‖² + T‖R‖², the norm of the
        full stacked parameter vector where R repeats T times and Q T−1
        times. Q counts once at T = 1, where it does not enter Φ_T.
        """
        h, r = svec_dim(self.n), svec_dim(self.m)
        return np.concatenate([np.ones(h), np.full(h, np.sqrt(max(self.T - 1, 1))), np.full(r, np.sqrt(self.T))])

    def theta(self, H: np.ndarray, Q: np.ndarray, R: np.ndarray) -> np.ndarray:
        return np.concatenate([svec(H), svec(Q), svec(R)])

    def weights(self, theta: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        h = svec_dim(self.n)
        return (smat(theta[:h], self.n), smat(theta[h:2 * h], self.n), smat(theta[2 * h:], self.m))


def _columns(coeffs: GainRelationCoefficients, basis_n: List[np.ndarray],
             basis_m: List[np.ndarray]) -> np.ndarray:
    n, m = coeffs.n, coeffs.m
    zero_n, zero_m = np.zeros((n, n)), np.zeros((m, m))
    columns = []
    for E in basis_n:
        columns.append(np.concatenate([-coeffs.rhs(i, E, zero_n).ravel() for i in range(1, coeffs.T + 1)]))
    for E in basis_n:
        columns.append(np.concatenate([-coeffs.rhs(i, zero_n, E).ravel() for i in range(1, coeffs.T + 1)]))
    for E in basis_m:
        columns.append(np.concatenate([coeffs.lhs(i, E).ravel() for i in range(1, coeffs.T + 1)]))
    return np.column_stack(columns)


def _unit_matrices(n: int) -> List[np.ndarray]:
    return [e.reshape(n, n) for e in np.eye(n * n)]


def build_stacked_system(coeffs: GainRelationCoefficients) -> StackedIdentificationSystem:
    """
    Stack the T relations into Φ_T, one column per symmetric coordinate.

    Repeated copies of R and Q across the blocks of each relation share a
    column, so their contributions are summed.
    """
    n, m = coeffs.n, coeffs.m
    Phi_T = _columns(coeffs, symmetric_basis(n), symmetric_basis(m))
    Phi_full = _columns(coeffs, _unit_matrices(n), _unit_matrices(m))
    return StackedIdentificationSystem(Phi_T=Phi_T, Phi_full=Phi_full, n=n, m=m, T=coeffs.T)


@dataclass(frozen=True)
class FeasibilityResult:
    status: Feasibility
    rank_symmetric: int
    rank_full: int
    parameter_dim: int
    rank_threshold: int
    null_dimension: int
    singular_values: np.ndarray


def feasibility_test(sysmat: StackedIdentificationSystem, rtol: float = RANK_RTOL) -> FeasibilityResult:
    """
    Exact recovery is possible only if Φ_T has a non-trivial structured null
    space, i.e. its numerical rank falls short of the number of free symmetric
    parameters n(n+1) + m(m+1)/2.
    """
    rank_sym, sv = numeric_rank(sysmat.Phi_T, rtol)
    rank_full, _ = numeric_rank(sysmat.Phi_full, rtol)
    dim = sysmat.parameter_dim
    status = Feasibility.EXACT_FEASIBLE if rank_sym < dim else Feasibility.INFEASIBLE
    logger.debug("Feasibility: rank {} (symmetric) / {} (full) against {} parameters -> {}",
                 rank_sym, rank_full, dim, status.value)
    return FeasibilityResult(status=status, rank_symmetric=rank_sym, rank_full=rank_full,
                             parameter_dim=dim, rank_threshold=sysmat.rank_threshold,
                             null_dimension=dim - rank_sym, singular_values=sv)


@dataclass(frozen=True)
class IdentifiabilityResult:
    count: int
    threshold: int
    identifiable: bool


def check_identifiability(system: LinearSystem, gains: Sequence[np.ndarray], window: Optional[int] = None,
                          diagonal: bool = False, rtol: float = RANK_RTOL) -> IdentifiabilityResult:
    """
    Count independent identifiability vectors over the last `window` gains.

    Step k contributes the coefficients of tr(E_a Bᵀ P_{k+1}(H, Q) B), bilinear
    in the coordinates E_a of R⁻¹ and the coordinates of (H, Q), where
    P_N = H and P_k = Q + AᵀP_{k+1}A^c_k with the gains held fixed. Unique
    recovery up to scale needs mn(n+1)(m+1)/2 independent vectors, or 2nm when
    every weight is diagonal.
    """
    check_dimensions(system)
    gains = [np.asarray(K, dtype=float) for K in gains]
    if window is not None:
        gains = gains[-window:]
    n, m = system.n, system.m
    A, B = system.A, system.B
    if diagonal:
        basis_n, basis_r = diagonal_basis(n), diagonal_basis(m)
        threshold = 2 * n * m
    else:
        basis_n, basis_r = symmetric_basis(n), symmetric_basis(m)
        threshold = m * n * (n + 1) * (m + 1) // 2
    N = len(gains)
    Ac = [A - B @ K for K in gains]
    # P_{k+1} for k = 0..N-1 as a function of each (H, Q) basis element
    per_basis = []
    for role in ("H", "Q"):
        for E in basis_n:
            P = E if role == "H" else np.zeros((n, n))
            seq = [None] * N
            for k in range(N - 1, -1, -1):
                seq[k] = P
                P = (E if role == "Q" else 0.0) + A.T @ P @ Ac[k]
            per_basis.append(seq)
    vectors = []
    for k in range(N):
        BPB = [B.T @ seq[k] @ B for seq in per_basis]
        vectors.append(np.array([[np.trace(Ea @ M) for M in BPB] for Ea in basis_r]).ravel())
    count, _ = numeric_rank(np.array(vectors), rtol) if vectors else (0, None)
    return IdentifiabilityResult(count=count, threshold=threshold, identifiable=count >= threshold)


@dataclass(frozen=True)
class WeightEstimate:
    H: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    tau: float
    scale_note: str
    mode: SolveMode
    residual: float             # ‖Φ_T θ‖ for θ of unit stacked norm
    q_projected: bool = False
    family_dimension: int = 1


def normalize_weights(H: np.ndarray, Q: np.ndarray,
                      R: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray, float, str, bool]:
    """
    Fix sign and scale of a weight triple known only up to a scalar.

    The sign makes H positive definite; the scale sets λ_min of the block
    diagonal to 1, which minimizes the condition number τ subject to
    I ⪯ diag(H, Q, R) ⪯ τI because τ is scale invariant. A singular Q is left
    out of the scaling.

    Raises:
        IndefiniteWeightsError: If H or R is not positive definite after the sign fix.
    """
    if np.trace(H) + np.trace(R) < 0:
        H, Q, R = -H, -Q, -R
    if min_eig(H) <= 0 or min_eig(R) <= 0:
        raise IndefiniteWeightsError(
            f"recovered weights are indefinite (λ_min(H) = {min_eig(H):.3e}, λ_min(R) = {min_eig(R):.3e}); "
            "gain estimates are too noisy")
    top = max(max_eig(H), max_eig(R), max_eig(Q))
    q_projected = False
    if min_eig(Q) < -1e-9 * top:
        Q = project_psd(Q)
        q_projected = True
    blocks = [H, R]
    include_q = min_eig(Q) > 1e-8 * top
    if include_q:
        blocks.append(Q)
    low = min(min_eig(W) for W in blocks)
    high = max(max_eig(W) for W in blocks)
    scale = 1.0 / low
    note = ("scaled so that λ_min(diag(H, Q, R)) = 1" if include_q
            else "scaled so that λ_min(diag(H, R)) = 1; Q is singular and left out")
    if q_projected:
        note += "; Q projected onto the PSD cone"
    return scale * H, scale * Q, scale * R, high / low, note, q_projected


def _stacked_residual(gains: Sequence[np.ndarray], system: LinearSystem, H: np.ndarray, Q: np.ndarray,
                      R: np.ndarray) -> np.ndarray:
    coeffs = build_gain_relations(gains, system)
    return np.concatenate([coeffs.residual(i, H, Q, R).ravel() for i in range(1, coeffs.T + 1)])


@dataclass(frozen=True)
class GainNoiseModel:
    """Gain window K̂_{N-T}..K̂_{N-1} with the covariance of each vec(K̂_k), column-major."""
    gains: List[np.ndarray]
    covariances: List[np.ndarray]
    system: LinearSystem

    def relation_covariance(self, H: np.ndarray, Q: np.ndarray, R: np.ndarray) -> np.ndarray:
        """
        Covariance of the stacked residual Φ_T θ caused by the gain errors,
        linearized around the given weights by forward differences.

        Every relation contains the last gain, so the residual blocks are
        correlated and the covariance is kept whole.
        """
        base = _stacked_residual(self.gains, self.system, H, Q, R)
        cov = np.zeros((base.size, base.size))
        for j, (K, V) in enumerate(zip(self.gains, self.covariances)):
            step = DIFF_STEP * max(1.0, float(np.max(np.abs(K))))
            columns = []
            for idx in range(K.size):
                bump = np.zeros(K.size)
                bump[idx] = step
                shifted = list(self.gains)
                shifted[j] = K + bump.reshape(K.shape, order="F")
                columns.append((_stacked_residual(shifted, self.system, H, Q, R) - base) / step)
            J = np.column_stack(columns)
            cov += J @ V @ J.T
        return symmetrize(cov)


def _near_null_dimension(sv: np.ndarray, dim: int, rank: int) -> int:
    """
    Size of the trailing family of right singular vectors.

    An exact null space gives it directly. Otherwise the family ends at the
    first gap of more than NEAR_NULL_GAP between consecutive singular
    values, counted from the smallest; no gap means a single vector.
    """
    if rank < dim:
        return dim - rank
    for j in range(1, dim // 2 + 1):
        if sv[dim - j - 1] > NEAR_NULL_GAP * sv[dim - j]:
            return j
    return 1


def _log_condition(c: np.ndarray, sysmat: StackedIdentificationSystem, basis: np.ndarray,
                   include_q: bool) -> float:
    H, Q, R = sysmat.weights(basis.T @ c)
    if np.trace(H) + np.trace(R) < 0:
        H, Q, R = -H, -Q, -R
    high = max(max_eig(H), max_eig(Q), max_eig(R))
    if high <= 0:
        return INFEASIBLE + 1.0
    low = min(min_eig(H), min_eig(R))
    q_low = min_eig(Q)
    if include_q or q_low < 0:
        low = min(low, q_low)
    if low <= 0:
        return INFEASIBLE - low / high
    return float(np.log(high / low))


def least_condition_member(sysmat: StackedIdentificationSystem, basis: np.ndarray) -> np.ndarray:
    """
    Member θ of the span of the rows of `basis` whose diag(H, Q, R) has the
    smallest condition number, with H and R positive definite.

    The condition number is scale invariant, so this is the minimum of τ
    subject to I ⪯ diag(H, Q, R) ⪯ τI over the family. When no member has a
    positive definite Q, the search is repeated with Q only required to be
    positive semidefinite and left out of λ_min.

    Raises:
        AmbiguityError: No member has positive definite H and R.
    """
    d = basis.shape[0]
    reference = sysmat.theta(np.eye(sysmat.n), np.eye(sysmat.n), np.eye(sysmat.m))
    starts = [np.linalg.lstsq(basis.T, reference, rcond=None)[0]] + list(np.eye(d))
    best = None
    for include_q in (True, False):
        for c0 in starts:
            result = optimize.minimize(_log_condition, c0, args=(sysmat, basis, include_q), method="Nelder-Mead",
                                       options={"xatol": 1e-10, "fatol": 1e-12, "maxiter": 400 * d, "adaptive": True})
            if best is None or result.fun < best.fun:
                best = result
        if best.fun < INFEASIBLE:
            break
    if best.fun >= INFEASIBLE:
        raise AmbiguityError(f"no member of the {d}-dimensional solution family has positive definite H and R",
                             null_dimension=d, stage=STAGE)
    logger.debug("Least-condition member of a {}-dimensional family: log τ = {:.6g}", d, best.fun)
    theta = basis.T @ best.x
    return theta / np.linalg.norm(sysmat.block_scale * theta)


def _reweighted_null_vector(sysmat: StackedIdentificationSystem, noise: GainNoiseModel, theta: np.ndarray,
                            iterations: int) -> np.ndarray:
    """
    Iteratively whitened smallest singular vector: each pass whitens Φ_T with
    the residual covariance at the current weights and solves again.
    """
    scale = sysmat.block_scale
    scaled = sysmat.Phi_T / scale
    for it in range(iterations):
        cov = noise.relation_covariance(*sysmat.weights(theta))
        ridge = COVARIANCE_RIDGE * max(float(np.trace(cov)) / cov.shape[0], np.finfo(float).tiny)
        whitening = sqrtm_psd(cov + ridge * np.eye(cov.shape[0]), inverse=True)
        _, _, Vt = linalg.svd(whitening @ scaled)
        theta = Vt[-1] / scale
        logger.debug("Reweighting pass {}: residual {:.3e}", it + 1, np.linalg.norm(sysmat.Phi_T @ theta))
    return theta


def solve_classic_weights(sysmat: StackedIdentificationSystem, mode: SolveMode, rtol: float = RANK_RTOL,
                          noise: Optional[GainNoiseModel] = None,
                          iterations: int = REWEIGHT_ITERATIONS) -> WeightEstimate:
    """
    Recover (H, Q, R) up to scale and normalize them.

    Both modes work with θ measured in the norm of the full stacked parameter
    vector (see StackedIdentificationSystem.block_scale). EXACT_NULLSPACE
    takes the structured null space of Φ_T; QP_FALLBACK takes the unit θ
    minimizing ‖Φ_T θ‖, the smallest right singular vector. With a gain noise
    model the fallback whitens Φ_T by the residual covariance before solving.

    A solution family of more than one dimension (an exact null space, or a
    cluster of small singular values set off by a gap) is resolved by taking
    the member with the least condition number.

    Raises:
        PreconditionError: EXACT_NULLSPACE on an infeasible system.
        AmbiguityError: No member of the family has positive definite H and R.
        IndefiniteWeightsError: See normalize_weights.
    """
    Phi = sysmat.Phi_T
    scale = sysmat.block_scale
    _, sv, Vt = linalg.svd(Phi / scale, full_matrices=True)
    dim = sysmat.parameter_dim
    rank = int(np.sum(sv > rtol * sv[0])) if sv.size and sv[0] > 0 else 0
    if mode == SolveMode.EXACT_NULLSPACE and rank == dim:
        raise PreconditionError("system is infeasible; only the zero solution satisfies Φ_T θ = 0", stage=STAGE)
    family = _near_null_dimension(sv, dim, rank)
    if family > 1:
        logger.info("Solution family has dimension {}; taking its least-condition member", family)
        theta = least_condition_member(sysmat, Vt[-family:] / scale)
    else:
        theta = Vt[-1] / scale
        if mode == SolveMode.QP_FALLBACK and noise is not None and iterations > 0:
            theta = _reweighted_null_vector(sysmat, noise, theta, iterations)
    residual = float(np.linalg.norm(Phi @ theta))
    H, Q, R = sysmat.weights(theta)
    H, Q, R, tau, note, projected = normalize_weights(H, Q, R)
    logger.info("Weights recovered ({}): τ = {:.4g}, residual {:.3e}", mode.value, tau, residual)
    return WeightEstimate(H=H, Q=Q, R=R, tau=tau, scale_note=note, mode=mode, residual=residual,
                          q_projected=projected, family_dimension=family)
