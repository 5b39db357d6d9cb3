"""
Quantities estimated directly from observations: the target state, the
input/state reconstruction filter, Kalman filtering of the current state,
per-step gain regression and the infinite-horizon closed-loop estimator.

Observations y_k are in original coordinates. Reconstructed states and gains
live in error coordinates relative to the supplied target.
"""

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger
from scipy import linalg

from lqr_utils import numeric_rank, spd_solve, symmetrize
from models.lqr_models import GainSequence, LinearSystem, TargetMethod, TrajectorySet
from solvers.errors import (DegenerateGeometryError, FilterUndefinedError, NumericalError,
                            PreconditionError, RankDeficiencyError)
from solvers.system import check_dimensions, output_to_state

PARALLEL_ANGLE = 1e-3
PRIOR_SCALE = 1e6            # prior covariance of x_0 in units of C⁻¹ΓC⁻ᵀ


@dataclass(frozen=True)
class TargetEstimate:
    target: np.ndarray
    method: TargetMethod
    gap: float = 0.0                # closest-approach distance of the fitted lines


def _principal_axis(points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    centroid = points.mean(axis=0)
    _, _, Vt = linalg.svd(points - centroid, full_matrices=False)
    return centroid, Vt[0]


def _closest_points(p1: np.ndarray, d1: np.ndarray, p2: np.ndarray, d2: np.ndarray):
    w = p1 - p2
    b = float(d1 @ d2)
    d, e = float(d1 @ w), float(d2 @ w)
    denom = 1.0 - b * b
    s = (b * e - d) / denom
    t = (e - b * d) / denom
    return p1 + s * d1, p2 + t * d2


def estimate_target(system: LinearSystem, data: TrajectorySet, method: TargetMethod,
                    gap_tol: Optional[float] = None) -> TargetEstimate:
    """
    Estimate x_T from the trajectories converging on it.

    Args:
        system: Plant; C maps states to outputs.
        data: Observed trajectories.
        method: LINE_INTERSECTION fits a principal-axis line to each of the
            first two trajectories and returns the midpoint of their
            closest-approach segment. FINAL_STATE_AVERAGE averages C⁻¹y over
            the last observation of every trajectory, leaving out re-planned
            stretches whenever others are available.
        gap_tol: Largest accepted closest-approach distance; defaults to ten
            noise standard deviations in state units.

    Raises:
        DegenerateGeometryError: Lines are parallel or do not meet.
        PreconditionError: Too few trajectories, or final states missing.
    """
    check_dimensions(system)
    if method == TargetMethod.FINAL_STATE_AVERAGE:
        if not data.all_final:
            raise PreconditionError("final-state average needs every trajectory to contain its final state",
                                    stage="target-estimation")
        chosen = data.settled or range(data.M)
        finals = output_to_state(system, np.array([data.trajectories[j][-1] for j in chosen]))
        return TargetEstimate(target=finals.mean(axis=0), method=method)

    if data.M < 2:
        raise PreconditionError("line intersection needs at least two trajectories",
                                stage="target-estimation")
    lines = []
    for Y in data.trajectories[:2]:
        if Y.shape[0] < 2:
            raise PreconditionError("line fitting needs at least two observations per trajectory",
                                    stage="target-estimation")
        lines.append(_principal_axis(output_to_state(system, Y)))
    (p1, d1), (p2, d2) = lines
    angle = float(np.arccos(min(1.0, abs(float(d1 @ d2)))))
    if angle <= PARALLEL_ANGLE:
        raise DegenerateGeometryError(f"fitted lines are parallel (angle {angle:.2e} rad)")
    c1, c2 = _closest_points(p1, d1, p2, d2)
    gap = float(np.linalg.norm(c1 - c2))
    if gap_tol is None:
        sigma = float(np.max(system.noise_std)) * float(np.linalg.norm(np.linalg.inv(system.C), 2))
        scale = max(1.0, float(np.linalg.norm(c1)))
        gap_tol = max(10.0 * sigma, 1e-8 * scale)
    if gap >= gap_tol:
        raise DegenerateGeometryError(f"fitted lines miss each other by {gap:.4g} (tolerance {gap_tol:.4g})")
    logger.debug("Line intersection gap {:.3e}, angle {:.3e} rad", gap, angle)
    return TargetEstimate(target=0.5 * (c1 + c2), method=method, gap=gap)


def _centered_outputs(system: LinearSystem, outputs: np.ndarray, target: Optional[np.ndarray]) -> np.ndarray:
    outputs = np.atleast_2d(np.asarray(outputs, dtype=float))
    if target is None:
        return outputs
    return outputs - system.C @ np.asarray(target, dtype=float)


def reconstruct_inputs_states(system: LinearSystem, outputs: np.ndarray,
                              target: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Recover inputs and states from outputs alone.

    x̂_0 = C⁻¹ȳ_0; then for each k the input is the least-squares fit
    û_{k-1} = (CB)†(ȳ_k − CAx̂_{k-1}) and x̂_k = Ax̂_{k-1} + Bû_{k-1}.

    Returns:
        (inputs l×m, states (l+1)×n), error coordinates.

    Raises:
        FilterUndefinedError: If CB does not have full column rank.
    """
    check_dimensions(system)
    A, B, C = system.A, system.B, system.C
    D = C @ B
    rank, _ = numeric_rank(D)
    if rank < system.m:
        raise FilterUndefinedError(f"C·B has rank {rank} < m = {system.m}")
    D_pinv = np.linalg.pinv(D)
    y = _centered_outputs(system, outputs, target)
    x = np.linalg.solve(C, y[0])
    states = [x]
    inputs = []
    for k in range(1, y.shape[0]):
        predicted = A @ states[-1]
        u = D_pinv @ (y[k] - C @ predicted)
        inputs.append(u)
        states.append(predicted + B @ u)
    inputs_arr = np.array(inputs) if inputs else np.zeros((0, system.m))
    return inputs_arr, np.array(states)


@dataclass(frozen=True)
class KalmanEstimate:
    state: np.ndarray               # x̂_{l|l}, original coordinates
    covariance: np.ndarray
    shortcut: bool = False          # noiseless plant, state read off the last output


class ClosedLoopKalmanFilter:
    """
    Predict/update filter for x_{k+1} = (A − BK_k)x_k, y_k = Cx_k + ω_k.

    There is no process noise. The prior on x_0 sits at the target (zero
    error) with covariance prior_scale·C⁻¹ΓC⁻ᵀ, and y_0 enters through an
    ordinary measurement update like every later observation.
    """

    def __init__(self, system: LinearSystem, prior_scale: float = PRIOR_SCALE):
        self.system = system
        self.C_inv = np.linalg.inv(system.C)
        self.x = np.zeros(system.n)
        self.P = symmetrize(prior_scale * self.C_inv @ system.gamma @ self.C_inv.T)

    def predict(self, K: np.ndarray) -> None:
        Ac = self.system.A - self.system.B @ K
        self.x = Ac @ self.x
        self.P = symmetrize(Ac @ self.P @ Ac.T)

    def update(self, y: np.ndarray) -> None:
        C, Gamma = self.system.C, self.system.gamma
        S = C @ self.P @ C.T + Gamma
        try:
            gain = spd_solve(S, C @ self.P, what="innovation covariance").T
        except NumericalError as e:
            e.stage = "state-filter"
            raise
        self.x = self.x + gain @ (y - C @ self.x)
        joseph = np.eye(self.system.n) - gain @ C
        self.P = symmetrize(joseph @ self.P @ joseph.T + gain @ Gamma @ gain.T)


def kalman_state(system: LinearSystem, gains: Sequence[np.ndarray], outputs: np.ndarray,
                 target: Optional[np.ndarray] = None, prior_scale: float = PRIOR_SCALE) -> KalmanEstimate:
    """
    Filtered current state x̂_{l|l} from y_0..y_l.

    Args:
        system: Plant with observation noise Γ.
        gains: At least l gains K_0..K_{l-1} driving the closed loop.
        outputs: (l+1)×p observations.
        target: Target state; the closed loop is run in error coordinates.
        prior_scale: Prior covariance of x_0 in units of C⁻¹ΓC⁻ᵀ. With l = 0
            the estimate is the update of that prior by y_0 alone.

    Raises:
        PreconditionError: Fewer than l gains.
        NumericalError: Innovation covariance not positive definite.
    """
    check_dimensions(system)
    y = _centered_outputs(system, outputs, target)
    offset = np.zeros(system.n) if target is None else np.asarray(target, dtype=float)
    l = y.shape[0] - 1
    if len(gains) < l:
        raise PreconditionError(f"kalman filter needs {l} gains, got {len(gains)}", stage="state-filter")
    if system.noiseless:
        x = np.linalg.solve(system.C, y[-1])
        logger.debug("Noiseless plant, reading the state off the last output")
        return KalmanEstimate(state=x + offset, covariance=np.zeros((system.n, system.n)), shortcut=True)
    kf = ClosedLoopKalmanFilter(system, prior_scale)
    kf.update(y[0])
    for k in range(1, l + 1):
        kf.predict(gains[k - 1])
        kf.update(y[k])
    return KalmanEstimate(state=kf.x + offset, covariance=kf.P)


def _regress_closed_loop(system: LinearSystem, X: np.ndarray, Y: np.ndarray, step: int) -> np.ndarray:
    """Â^c = C⁻¹(YXᵀ)(XXᵀ)⁻¹ with columns as samples."""
    gram = X @ X.T
    rank, _ = numeric_rank(gram)
    if rank < system.n:
        raise RankDeficiencyError(f"state Gram matrix at step {step} has rank {rank} < {system.n}",
                                  step=step, stage="gain-estimation")
    return np.linalg.solve(system.C, np.linalg.solve(gram, X @ Y.T).T)


def estimate_gain_sequence(system: LinearSystem, data: TrajectorySet, l: Optional[int] = None,
                           target: Optional[np.ndarray] = None) -> GainSequence:
    """
    Least-squares estimates of the last l gains of the horizon.

    Trajectories are lined up at their final observation, so step k of the
    window is step N − l + k of the horizon in every trajectory long enough
    to reach back that far. Trajectories may differ in length, as they do
    when an agent re-plans after being pushed: step k then regresses over
    the trajectories covering it. States are reconstructed with
    reconstruct_inputs_states, then for each k
    Â^c_k = C⁻¹(Y_kX_kᵀ)(X_kX_kᵀ)⁻¹ and K̂_k = B†(A − Â^c_k).

    Args:
        l: Window length; defaults to the longest window whose every step is
            covered by at least n trajectories.

    Returns:
        Gains ordered K̂_{N-l}..K̂_{N-1}, i.e. ending at the final step. On a
        noisy plant each gain carries the covariance of its vec.

    Raises:
        PreconditionError: Fewer than n trajectories, missing final states,
            or a window step covered by fewer than n trajectories.
        RankDeficiencyError: X_kX_kᵀ singular; names k.
    """
    check_dimensions(system)
    if not data.all_final:
        raise PreconditionError("gain estimation needs every trajectory to contain its final state",
                                stage="gain-estimation")
    if data.M < system.n:
        raise PreconditionError(f"gain estimation needs at least n = {system.n} trajectories, got {data.M}",
                                stage="gain-estimation")
    covered = sorted(data.lengths, reverse=True)[system.n - 1]
    l = covered if l is None else l
    if l < 1 or l > covered:
        raise PreconditionError(f"window l = {l} must lie in [1, {covered}]; longer windows leave steps "
                                f"covered by fewer than n = {system.n} trajectories", stage="gain-estimation")

    states = []
    outputs = []
    for Y in data.trajectories:
        tail = Y[-(l + 1):]
        _, x_hat = reconstruct_inputs_states(system, tail, target)
        states.append(x_hat)
        outputs.append(_centered_outputs(system, tail, target))
    B_pinv = np.linalg.pinv(system.B)
    gains: List[np.ndarray] = []
    covariances: List[np.ndarray] = []
    for k in range(l):
        X, Y = _step_samples(states, outputs, l, k)
        Ac = _regress_closed_loop(system, X, Y, k)
        gains.append(B_pinv @ (system.A - Ac))
        if not system.noiseless:
            covariances.append(_gain_covariance(system, X @ X.T, Ac))
    logger.debug("Estimated {} gains from {} trajectories", l, data.M)
    return GainSequence.of(gains, covariances or None)


def _step_samples(states: List[np.ndarray], outputs: List[np.ndarray], l: int,
                  k: int) -> Tuple[np.ndarray, np.ndarray]:
    """Columns x̂_k and ȳ_{k+1} of every trajectory reaching back to window step k."""
    X, Y = [], []
    for x_hat, y in zip(states, outputs):
        t = k - (l + 1 - len(y))
        if t >= 0:
            X.append(x_hat[t])
            Y.append(y[t + 1])
    return np.array(X).T, np.array(Y).T


def _gain_covariance(system: LinearSystem, gram: np.ndarray, Ac: np.ndarray) -> np.ndarray:
    """
    First-order covariance of vec(K̂_k), column-major.

    Cov vec(K̂_k) = (X_kX_kᵀ)⁻¹ ⊗ GΣ_eGᵀ with G = B†C⁻¹, where Σ_e is the
    covariance of the regression residual y_{k+1} − CÂ^c x̂_k: the output
    noise Γ plus the regressor noise C⁻¹ΓC⁻ᵀ pushed through the closed loop.
    """
    C_inv = np.linalg.inv(system.C)
    regressor = C_inv @ system.gamma @ C_inv.T
    CAc = system.C @ Ac
    residual = system.gamma + CAc @ regressor @ CAc.T
    G = np.linalg.pinv(system.B) @ C_inv
    return symmetrize(np.kron(np.linalg.inv(gram), G @ residual @ G.T))


@dataclass(frozen=True)
class InfiniteGainEstimate:
    closed_loop: np.ndarray         # Â^c
    gain: np.ndarray                # K̂
    bias_corrected: bool


def estimate_infinite_gain(system: LinearSystem, outputs: np.ndarray,
                           target: Optional[np.ndarray] = None) -> InfiniteGainEstimate:
    """
    Constant-gain closed loop from one trajectory, treated as a first-order
    vector autoregression on the outputs.

    Â^c = C⁻¹(YXᵀ/l)(XXᵀ/l − Γ)⁻¹C, with X = [ȳ_0..ȳ_{l-1}] and
    Y = [ȳ_1..ȳ_l]. The Γ term removes the bias the regressor noise adds to
    the sample Gram matrix; when the corrected Gram matrix is not positive
    definite the uncorrected least-squares form is used instead.

    Raises:
        PreconditionError: Fewer than n+1 observations.
        RankDeficiencyError: Gram matrix singular.
    """
    check_dimensions(system)
    y = _centered_outputs(system, outputs, target)
    l = y.shape[0] - 1
    if l < system.n:
        raise PreconditionError(f"need at least {system.n + 1} observations, got {l + 1}",
                                stage="gain-estimation")
    X, Y = y[:-1].T, y[1:].T
    gram = X @ X.T / l
    cross = Y @ X.T / l
    bias_corrected = False
    if not system.noiseless:
        corrected = gram - system.gamma
        if np.linalg.eigvalsh(symmetrize(corrected))[0] > 0:
            gram, bias_corrected = corrected, True
        else:
            logger.warning("Noise-corrected Gram matrix is not positive definite at l = {}; "
                           "using plain least squares", l)
    rank, _ = numeric_rank(gram)
    if rank < system.p:
        raise RankDeficiencyError(f"output Gram matrix has rank {rank} < {system.p}", stage="gain-estimation")
    M_hat = np.linalg.solve(gram.T, cross.T).T
    Ac = np.linalg.solve(system.C, M_hat @ system.C)
    K = np.linalg.pinv(system.B) @ (system.A - Ac)
    return InfiniteGainEstimate(closed_loop=Ac, gain=K, bias_corrected=bias_corrected)
