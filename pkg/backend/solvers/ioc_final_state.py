"""
Input weight recovery for the final-state objective x_NᵀHx_N + Σ u_kᵀRu_k
with H = I, from trajectory fragments that end at the final state.

The optimality conditions of each fragment form one square linear system in
the stacked states and costates, 𝓕(R)·Z = Ã·x_0. Eliminating the states this
way turns the fit into a smooth least-squares problem in R alone.
"""

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np
from loguru import logger
from scipy import linalg, optimize

from lqr_utils import is_pd, symmetrize
from models.lqr_models import LinearSystem, TrajectorySet
from solvers.errors import DomainError, PreconditionError
from solvers.system import check_dimensions, output_to_state

R_FLOOR = 1e-8
FD_STEP = 1e-6
MAX_ITER = 500
GRAD_TOL = 1e-10
STAGE = "weight-identification"


@dataclass(frozen=True)
class PmpStackedSystem:
    """
    Optimality conditions of one horizon as 𝓕(R)·Z = Ã·x_0.

    Z stacks x_1..x_N followed by the costates λ_1..λ_N. Rows hold
    x_i − Ax_{i-1} + BR⁻¹Bᵀλ_i = 0 (with Ax_0 moved to the right-hand side),
    λ_i − Qx_i − Aᵀλ_{i+1} = 0 for i < N, and λ_N − Hx_N = 0.
    """
    F_of_R: np.ndarray
    A_tilde: np.ndarray
    G_X: np.ndarray
    horizon: int
    n: int

    def solve(self, x0s: np.ndarray) -> np.ndarray:
        """
        States for a batch of initial states.

        Args:
            x0s: n×J matrix, one initial state per column.

        Returns:
            J×N×n array of x_1..x_N.
        """
        Z = linalg.lu_solve(linalg.lu_factor(self.F_of_R), self.A_tilde @ x0s)
        X = self.G_X @ Z
        return X.T.reshape(x0s.shape[1], self.horizon, self.n)

    def solve_full(self, x0: np.ndarray) -> np.ndarray:
        return linalg.solve(self.F_of_R, self.A_tilde @ x0)


def build_pmp_system(system: LinearSystem, R: np.ndarray, horizon: int,
                     H: Optional[np.ndarray] = None, Q: Optional[np.ndarray] = None) -> PmpStackedSystem:
    """
    Assemble 𝓕(R), Ã and the state selector G_X for one horizon.

    Raises:
        DomainError: If R is not positive definite.
    """
    n = system.n
    if not is_pd(R):
        raise DomainError("R must be positive definite", stage=STAGE)
    H = np.eye(n) if H is None else H
    Q = np.zeros((n, n)) if Q is None else Q
    A, B = system.A, system.B
    G = B @ np.linalg.solve(R, B.T)
    N = horizon
    size = n * N
    F = np.zeros((2 * size, 2 * size))
    for i in range(N):
        rows = slice(i * n, (i + 1) * n)
        F[rows, i * n:(i + 1) * n] = np.eye(n)
        if i > 0:
            F[rows, (i - 1) * n:i * n] = -A
        F[rows, size + i * n:size + (i + 1) * n] = G

        rows = slice(size + i * n, size + (i + 1) * n)
        F[rows, size + i * n:size + (i + 1) * n] = np.eye(n)
        if i < N - 1:
            F[rows, i * n:(i + 1) * n] = -Q
            F[rows, size + (i + 1) * n:size + (i + 2) * n] = -A.T
        else:
            F[rows, i * n:(i + 1) * n] = -H
    A_tilde = np.zeros((2 * size, n))
    A_tilde[:n] = A
    G_X = np.hstack([np.eye(size), np.zeros((size, size))])
    return PmpStackedSystem(F_of_R=F, A_tilde=A_tilde, G_X=G_X, horizon=N, n=n)


def _check_fragments(data: TrajectorySet) -> None:
    if any(l < 1 for l in data.lengths):
        raise PreconditionError("every trajectory needs at least two observations", stage=STAGE)


def pmp_residual_vector(R: np.ndarray, system: LinearSystem, data: TrajectorySet,
                        target: np.ndarray) -> np.ndarray:
    """Stacked (y_i − C(x_i + x̂_T))/√M over all fragments, i = 1..l_j."""
    target = np.asarray(target, dtype=float)
    by_length: Dict[int, List[int]] = {}
    for j, l in enumerate(data.lengths):
        by_length.setdefault(l, []).append(j)
    parts = [np.zeros(0)] * data.M
    for horizon, members in by_length.items():
        pmp = build_pmp_system(system, R, horizon)
        x0s = np.array([output_to_state(system, data.trajectories[j][0])[0] - target
                        for j in members]).T
        states = pmp.solve(x0s)
        for idx, j in enumerate(members):
            predicted = (states[idx] + target) @ system.C.T
            parts[j] = (data.trajectories[j][1:] - predicted).ravel()
    return np.concatenate(parts) / np.sqrt(data.M)


def pmp_residual(R: np.ndarray, system: LinearSystem, data: TrajectorySet, target: np.ndarray) -> float:
    """
    Mean over fragments of Σ_i ‖y_i − C(x_i + x̂_T)‖² with states implied by R.

    Each fragment starts at x_0 = C⁻¹y_0 − x̂_T with its own horizon l_j.

    Raises:
        DomainError: If R is not positive definite.
    """
    check_dimensions(system)
    _check_fragments(data)
    r = pmp_residual_vector(np.asarray(R, dtype=float), system, data, target)
    return float(r @ r)


def _unpack(theta: np.ndarray, m: int) -> np.ndarray:
    L = np.zeros((m, m))
    L[np.tril_indices(m)] = theta
    return L @ L.T + R_FLOOR * np.eye(m)


def _pack(R: np.ndarray) -> np.ndarray:
    m = R.shape[0]
    L = np.linalg.cholesky(symmetrize(R) - R_FLOOR * np.eye(m))
    return L[np.tril_indices(m)]


def _central_jacobian(fun, theta: np.ndarray) -> np.ndarray:
    columns = []
    for i in range(theta.size):
        h = FD_STEP * max(1.0, abs(theta[i]))
        step = np.zeros_like(theta)
        step[i] = h
        columns.append((fun(theta + step) - fun(theta - step)) / (2.0 * h))
    return np.column_stack(columns)


@dataclass(frozen=True)
class FinalStateFit:
    R: np.ndarray
    residual: float
    iterations: int
    converged: bool
    starts: int = 1


def fit_final_state_weights(system: LinearSystem, data: TrajectorySet, target: np.ndarray,
                            init: Optional[np.ndarray] = None, max_iter: int = MAX_ITER,
                            grad_tol: float = GRAD_TOL) -> FinalStateFit:
    """
    Fit R ≻ 0 minimizing pmp_residual with H fixed to I.

    R is parameterized as LLᵀ + 1e-8·I over the lower triangle of L and the
    fit runs Levenberg-Marquardt on the stacked residual vector with central
    finite-difference Jacobians.

    Args:
        system: Plant.
        data: Trajectory fragments, each ending at the final state.
        target: Estimated target state.
        init: Starting R (identity by default).

    Returns:
        Best iterate; `converged` is False when the descent stalled above
        tolerance.
    """
    check_dimensions(system)
    _check_fragments(data)
    m = system.m
    R0 = np.eye(m) if init is None else np.asarray(init, dtype=float)
    if not is_pd(R0 - R_FLOOR * np.eye(m)):
        raise DomainError("initial R must be positive definite", stage=STAGE)
    if data.M < system.n:
        logger.warning("Only {} trajectories for n = {}; R may not be identifiable", data.M, system.n)

    def fun(theta: np.ndarray) -> np.ndarray:
        return pmp_residual_vector(_unpack(theta, m), system, data, target)

    result = optimize.least_squares(fun, _pack(R0), jac=lambda th: _central_jacobian(fun, th),
                                    method="lm", xtol=1e-15, ftol=1e-15, gtol=grad_tol,
                                    max_nfev=max_iter)
    R_hat = _unpack(result.x, m)
    residual = float(2.0 * result.cost)
    converged = result.status > 0
    if not converged:
        logger.warning("Final-state weight fit stopped without converging (status {}, residual {:.3e}); "
                       "returning best iterate", result.status, residual)
    else:
        logger.debug("Final-state weight fit converged: residual {:.3e} after {} evaluations", residual, result.nfev)
    return FinalStateFit(R=symmetrize(R_hat), residual=residual, iterations=int(result.nfev),
                          converged=converged)


def _random_spd(rng: np.random.Generator, m: int) -> np.ndarray:
    W = rng.standard_normal((m, m))
    return W @ W.T / m + 0.1 * np.eye(m)


def multi_start_final_state_fit(system: LinearSystem, data: TrajectorySet, target: np.ndarray,
                                starts: int = 3, seed: int = 0,
                                max_workers: Optional[int] = None) -> FinalStateFit:
    """
    Run fit_final_state_weights from I and from seeded random SPD matrices; keep the
    smallest residual.
    """
    rng = np.random.default_rng(seed)
    inits = [np.eye(system.m)] + [_random_spd(rng, system.m) for _ in range(starts - 1)]
    workers = min(len(inits), max_workers or os.cpu_count() or 1)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(fit_final_state_weights, system, data, target, R0) for R0 in inits]
            results = [f.result() for f in futures]
    else:
        results = [fit_final_state_weights(system, data, target, R0) for R0 in inits]
    best = min(results, key=lambda r: r.residual)
    logger.info("Final-state weight fit multi-start: best of {} runs, residual={:.3e}", len(results), best.residual)
    return FinalStateFit(R=best.R, residual=best.residual, iterations=sum(r.iterations for r in results),
                          converged=best.converged, starts=len(results))
