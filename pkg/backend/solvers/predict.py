"""
Prediction from a reconstructed problem, the polynomial-regression baseline
and sensitivity diagnostics of the inferred input with respect to the
estimated horizon.
"""

from dataclasses import dataclass
from typing import List, Optional

import numpy as np
from loguru import logger
from numpy.polynomial import Polynomial

from lqr_utils import max_eig, min_eig, spd_solve, sqrtm_psd
from models.lqr_models import LinearSystem, LQRObjective, LQRProblemSpec, ObjectiveSetting
from solvers.errors import FitError, PreconditionError
from solvers.lqr_forward import riccati_gains, riccati_gains_for, rollout, solve_dare
from solvers.system import check_dimensions, output_to_state

MONOTONE_TOL = 1e-10


def reconstruct_problem(system: LinearSystem, target: np.ndarray, H: np.ndarray, Q: np.ndarray,
                        R: np.ndarray, horizon: int, l: int, current_state: np.ndarray,
                        setting: ObjectiveSetting = ObjectiveSetting.CLASSIC) -> LQRProblemSpec:
    """
    Remaining problem after l observed steps: horizon N̂* − l from x̂_{l|l}.

    Args:
        current_state: Filtered state x̂_{l|l} in original coordinates.

    Raises:
        PreconditionError: If N̂* ≤ l.
    """
    if horizon <= l:
        raise PreconditionError(f"estimated horizon {horizon} must exceed l = {l}", stage="reconstruction")
    objective = LQRObjective(H=H, Q=Q, R=R, setting=setting)
    return LQRProblemSpec(system=system, objective=objective, horizon=horizon - l,
                          target=target, initial=current_state)


def predict_input(spec: LQRProblemSpec) -> np.ndarray:
    """μ_0 = −K_0x_0 of the reconstructed problem, the estimate of u_l."""
    trace = riccati_gains(spec)
    return -trace.K(0) @ spec.x0


def predict_states(spec: LQRProblemSpec) -> np.ndarray:
    """Closed-loop states x_1..x_{N'} of the reconstructed problem, original coordinates."""
    trace = riccati_gains(spec)
    states, _ = rollout(spec.system, trace.gains.gains, spec.x0)
    return states[1:] + np.asarray(spec.target)


def baseline_polyfit_predict(outputs: np.ndarray, steps: int, order: int = 3,
                             system: Optional[LinearSystem] = None) -> np.ndarray:
    """
    Per-coordinate least-squares polynomial in time, extrapolated `steps` ahead.

    Observations are mapped to states through C⁻¹ when a system is given.

    Returns:
        steps×n predictions for t = l+1..l+steps.

    Raises:
        PreconditionError: If there are not more observations than the order.
        FitError: If the Vandermonde matrix is rank deficient.
    """
    y = np.atleast_2d(np.asarray(outputs, dtype=float))
    if system is not None:
        y = output_to_state(system, y)
    l = y.shape[0] - 1
    if l + 1 <= order:
        raise PreconditionError(f"order {order} needs more than {order} observations, got {l + 1}",
                                stage="prediction")
    t = np.arange(l + 1, dtype=float)
    future = np.arange(l + 1, l + 1 + steps, dtype=float)
    predictions = []
    for column in y.T:
        poly, (_, rank, _, _) = Polynomial.fit(t, column, order, full=True)
        if rank < order + 1:
            raise FitError(f"Vandermonde matrix has rank {rank} < {order + 1}")
        predictions.append(poly(future))
    return np.array(predictions).T


@dataclass(frozen=True)
class SensitivityReport:
    direction: str                  # increasing, decreasing or mixed (P_k as k decreases)
    kappa: float
    sigma: Optional[float]
    gamma: Optional[float]
    c1: Optional[float]
    c2: Optional[float]
    beta_lower: np.ndarray          # index k = 0..N-1
    beta_upper: np.ndarray
    eta: float                      # per-step chain bound on ‖μ_0^(N+δN) − μ_0^(N)‖
    eta_coarse: float               # δN·η_a|b·‖x_0‖
    observed_gap: float
    failed: bool
    note: str = ""


def sensitivity_diagnostics(system: LinearSystem, H: np.ndarray, Q: np.ndarray, R: np.ndarray,
                            N: int, delta_N: int, x0: Optional[np.ndarray] = None) -> SensitivityReport:
    """
    How much the inferred input moves when the horizon is off by δN.

    With Φ = P_N^{-1/2}P_{N-1}P_N^{-1/2} the constants are
    c_1 = max(0, (1/λ_min(Φ) − 1)(γ − 1)) and c_2 = max(0, (λ_max(Φ) − 1)(γ − 1)),
    where γ = 1/(1 − σ), σ = λ_min(Q_a or Q_b)/κ and κ = λ_max(P*). The bounds
    β̲ P_{k+1} ⪯ P_k ⪯ β̄ P_{k+1} are indexed by j = N − 1 − k, the number of
    iterations from the terminal step.

    The observed gap is ‖(K_0^(N+δN) − K_0^(N))x_0‖ and is bounded by
    Σ_{j<δN} ‖S_j⁻¹Bᵀ‖‖P_{j+1} − P_{j+2}‖‖A^c_{j+1}‖·‖x_0‖ on the
    (N+δN)-horizon sequence, where S_j = R + BᵀP_{j+1}B.
    """
    check_dimensions(system)
    if N < 2:
        raise PreconditionError("sensitivity diagnostics need N ≥ 2", stage="prediction")
    if delta_N < 0:
        raise PreconditionError("δN must be non-negative", stage="prediction")
    A, B = system.A, system.B
    x0 = np.ones(system.n) / np.sqrt(system.n) if x0 is None else np.asarray(x0, dtype=float)
    x_norm = float(np.linalg.norm(x0))

    trace = riccati_gains_for(system, H, Q, R, N)
    P_N, P_N1 = trace.P(N), trace.P(N - 1)
    root_inv = sqrtm_psd(P_N, inverse=True)
    Phi = root_inv @ P_N1 @ root_inv
    lam_min, lam_max = min_eig(Phi), max_eig(Phi)
    if lam_min >= 1.0 - MONOTONE_TOL:
        direction = "increasing"
    elif lam_max <= 1.0 + MONOTONE_TOL:
        direction = "decreasing"
    else:
        direction = "mixed"

    P_star, _ = solve_dare(system, Q, R, P0=H)
    kappa = max_eig(P_star)
    failed = False
    note = ""
    sigma = gamma = c1 = c2 = None
    if direction == "decreasing":
        S = R + B.T @ P_N @ B
        G = spd_solve(S, B.T @ P_star @ A)
    elif direction == "increasing":
        S = R + B.T @ P_star @ B
        G = spd_solve(S, B.T @ P_N @ A)
    if direction == "mixed":
        failed = True
        note = "P_k is not monotone; bound construction does not apply"
    else:
        Q_ab = G.T @ R @ G
        sigma = min_eig(Q_ab) / kappa
        if sigma >= 1.0:
            failed = True
            note = f"σ = {sigma:.4g} ≥ 1"
        else:
            gamma = 1.0 / (1.0 - sigma)
            c1 = max(0.0, (1.0 / lam_min - 1.0) * (gamma - 1.0))
            c2 = max(0.0, (lam_max - 1.0) * (gamma - 1.0))

    j = (N - 1) - np.arange(N)
    if gamma is not None:
        decay = gamma ** (-j.astype(float))
        beta_lower = 1.0 / (1.0 + max(0.0, 1.0 / lam_min - 1.0) * decay)
        beta_upper = 1.0 + max(0.0, lam_max - 1.0) * decay
    else:
        beta_lower = np.full(N, np.nan)
        beta_upper = np.full(N, np.nan)

    long_trace = riccati_gains_for(system, H, Q, R, N + delta_N)
    K0_long = long_trace.K(0)
    K0_short = trace.K(0)
    observed = float(np.linalg.norm((K0_long - K0_short) @ x0))
    eta = 0.0
    for jj in range(delta_N):
        P1, P2 = long_trace.P(jj + 1), long_trace.P(jj + 2)
        S_inv_Bt = spd_solve(R + B.T @ P1 @ B, B.T)
        Ac_next = A - B @ long_trace.K(jj + 1)
        eta += (np.linalg.norm(S_inv_Bt, 2) * np.linalg.norm(P1 - P2, 2) * np.linalg.norm(Ac_next, 2))
    eta *= x_norm

    if delta_N > 0 and N + delta_N >= 2:
        P_ref = P_N if direction != "increasing" else P_star
        eta_step = (np.linalg.norm(spd_solve(R + B.T @ P_ref @ B, B.T), 2)
                    * np.linalg.norm(long_trace.P(1) - long_trace.P(2), 2) * np.linalg.norm(A, 2))
        eta_coarse = float(delta_N * eta_step * x_norm)
    else:
        eta_coarse = 0.0
    if failed:
        logger.warning("Sensitivity diagnostics incomplete: {}", note)
    return SensitivityReport(direction=direction, kappa=kappa, sigma=sigma, gamma=gamma, c1=c1, c2=c2,
                             beta_lower=beta_lower, beta_upper=beta_upper, eta=float(eta),
                             eta_coarse=eta_coarse, observed_gap=observed, failed=failed, note=note)


def p_gap_sequence(system: LinearSystem, H: np.ndarray, Q: np.ndarray, R: np.ndarray, N: int) -> List[float]:
    """‖P_k − P_{k+1}‖_F for k = N−1 down to 0."""
    trace = riccati_gains_for(system, H, Q, R, N)
    return [float(np.linalg.norm(trace.P(k) - trace.P(k + 1))) for k in range(N - 1, -1, -1)]
