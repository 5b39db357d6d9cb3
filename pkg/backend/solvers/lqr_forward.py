"""
Forward LQR machinery: finite-horizon Riccati recursion, infinite-horizon
DARE, closed-loop simulation and a direct quadratic solve used as an oracle.

States and inputs are in error coordinates (x − x_T); simulated outputs are in
original coordinates, y_k = C(x_k + x_T) + ω_k.
"""

from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
from loguru import logger
from scipy import linalg

from lqr_utils import spd_solve, symmetrize
from models.lqr_models import GainSequence, LinearSystem, LQRProblemSpec
from solvers.errors import IterationLimitError, NumericalError
from solvers.system import check_dimensions

DARE_TOL = 1e-12
DARE_MAX_ITER = 100_000
TABLE_TOL = 1e-13
TABLE_MAX_STEPS = 100_000
DIRECT_MAX_VARIABLES = 2000


def riccati_step(A: np.ndarray, B: np.ndarray, Q: np.ndarray, R: np.ndarray,
                 P_next: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    One backward step: (K_k, P_k) from P_{k+1}.

    K_k = (R + BᵀP_{k+1}B)⁻¹BᵀP_{k+1}A and P_k in Joseph form
    K_kᵀRK_k + A^c_kᵀP_{k+1}A^c_k + Q.
    """
    S = R + B.T @ P_next @ B
    K = spd_solve(S, B.T @ P_next @ A, what="R + BᵀPB")
    Ac = A - B @ K
    P = symmetrize(K.T @ R @ K + Ac.T @ P_next @ Ac + Q)
    return K, P


@dataclass(frozen=True)
class RiccatiTrace:
    """Backward recursion result; P_seq runs P_N .. P_0."""
    P_seq: List[np.ndarray]
    gains: GainSequence

    @property
    def horizon(self) -> int:
        return self.gains.horizon

    def P(self, k: int) -> np.ndarray:
        """Cost-to-go matrix P_k, k = 0..N."""
        return self.P_seq[self.horizon - k]

    def K(self, k: int) -> np.ndarray:
        return self.gains.gains[k]

    def closed_loop(self, A: np.ndarray, B: np.ndarray, k: int) -> np.ndarray:
        return A - B @ self.gains.gains[k]


def riccati_gains_for(system: LinearSystem, H: np.ndarray, Q: np.ndarray, R: np.ndarray,
                      horizon: int) -> RiccatiTrace:
    A, B = system.A, system.B
    P = symmetrize(np.asarray(H, dtype=float))
    P_seq = [P]
    gains: List[np.ndarray] = [np.empty(0)] * horizon
    for k in range(horizon - 1, -1, -1):
        K, P = riccati_step(A, B, Q, R, P)
        gains[k] = K
        P_seq.append(P)
    return RiccatiTrace(P_seq=P_seq, gains=GainSequence.of(gains))


def riccati_gains(spec: LQRProblemSpec) -> RiccatiTrace:
    """
    Finite-horizon gains K_0..K_{N-1} with P_N = H.

    Raises:
        NumericalError: If R + BᵀP_{k+1}B is not positive definite.
    """
    check_dimensions(spec.system)
    obj = spec.objective
    return riccati_gains_for(spec.system, obj.H, obj.Q, obj.R, spec.horizon)


class BackwardGainTable:
    """
    Gains indexed by steps-to-go, shared by every horizon candidate.

    For a horizon N the gain applied at step i is gain(N − i). The table grows
    lazily; once consecutive entries agree to TABLE_TOL it stops growing and
    returns the converged gain for any larger index.
    """

    def __init__(self, system: LinearSystem, H: np.ndarray, Q: np.ndarray, R: np.ndarray,
                 tol: float = TABLE_TOL, max_steps: int = TABLE_MAX_STEPS):
        self.A, self.B = system.A, system.B
        self.Q, self.R = np.asarray(Q, dtype=float), np.asarray(R, dtype=float)
        self.tol = tol
        self.max_steps = max_steps
        self._P: List[np.ndarray] = [symmetrize(np.asarray(H, dtype=float))]
        self._K: List[Optional[np.ndarray]] = [None]
        self.converged_at: Optional[int] = None

    def __len__(self) -> int:
        return len(self._K) - 1

    def _extend(self) -> None:
        K, P = riccati_step(self.A, self.B, self.Q, self.R, self._P[-1])
        self._K.append(K)
        self._P.append(P)
        s = len(self._K) - 1
        if s >= 2:
            dK = np.linalg.norm(K - self._K[-2])
            dP = np.linalg.norm(P - self._P[-2])
            if (dK <= self.tol * max(1.0, np.linalg.norm(K))
                    and dP <= self.tol * max(1.0, np.linalg.norm(P))):
                self.converged_at = s
                logger.debug("Gain table converged after {} steps", s)
        if self.converged_at is None and s >= self.max_steps:
            logger.warning("Gain table reached {} steps without converging; freezing", s)
            self.converged_at = s

    def _index(self, steps_to_go: int) -> int:
        if steps_to_go < 1:
            raise ValueError("steps_to_go must be at least 1")
        while self.converged_at is None and len(self) < steps_to_go:
            self._extend()
        if self.converged_at is not None and steps_to_go > self.converged_at:
            return self.converged_at
        return steps_to_go

    def gain(self, steps_to_go: int) -> np.ndarray:
        return self._K[self._index(steps_to_go)]

    def cost_to_go(self, steps_to_go: int) -> np.ndarray:
        if steps_to_go == 0:
            return self._P[0]
        return self._P[self._index(steps_to_go)]

    def gains_for(self, horizon: int, count: Optional[int] = None) -> List[np.ndarray]:
        """First `count` gains K_0.. of the horizon-N problem."""
        count = horizon if count is None else count
        return [self.gain(horizon - i) for i in range(count)]


def solve_dare(system: LinearSystem, Q: np.ndarray, R: np.ndarray,
               P0: Optional[np.ndarray] = None, tol: float = DARE_TOL,
               max_iter: int = DARE_MAX_ITER) -> Tuple[np.ndarray, np.ndarray]:
    """
    Infinite-horizon Riccati solution by backward fixed-point iteration.

    Args:
        system: Plant; (A, B) controllable.
        Q: State weight, PSD.
        R: Input weight, PD.
        P0: Starting point of the iteration (identity by default).

    Returns:
        (P*, K*) with K* = (R + BᵀP*B)⁻¹BᵀP*A.

    Raises:
        IterationLimitError: If ‖P_k − P_{k+1}‖_F does not fall below
            tol·max(1, ‖P‖_F) within max_iter iterations.
    """
    check_dimensions(system)
    A, B = system.A, system.B
    P = np.eye(system.n) if P0 is None else symmetrize(np.asarray(P0, dtype=float))
    residual = np.inf
    for it in range(1, max_iter + 1):
        K, P_new = riccati_step(A, B, Q, R, P)
        residual = float(np.linalg.norm(P_new - P))
        P = P_new
        if residual < tol * max(1.0, float(np.linalg.norm(P))):
            logger.debug("DARE converged in {} iterations (residual {:.3e})", it, residual)
            break
    else:
        raise IterationLimitError(f"DARE did not converge in {max_iter} iterations",
                                  residual=residual, iterations=max_iter, stage="lqr-forward")
    P_star = P
    K_star = spd_solve(R + B.T @ P_star @ B, B.T @ P_star @ A, what="R + BᵀP*B")
    rho = float(np.max(np.abs(np.linalg.eigvals(A - B @ K_star))))
    if rho >= 1.0:
        logger.warning("DARE closed loop is not stable (spectral radius {:.6f})", rho)
    return P_star, K_star


@dataclass(frozen=True)
class SimulatedTrajectory:
    states: np.ndarray      # (N+1)×n, error coordinates
    inputs: np.ndarray      # N×m
    outputs: np.ndarray     # (N+1)×p, original coordinates


def noise_generator(seed) -> np.random.Generator:
    """PCG64 generator; every simulated noise sample is drawn from one of these."""
    return np.random.Generator(np.random.PCG64(seed))


def rollout(system: LinearSystem, gains: List[np.ndarray], x0: np.ndarray,
            disturbances: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Closed-loop states x_0..x_N and inputs u_0..u_{N-1}.

    With `disturbances` (N×n) the state takes the push w_k after each step
    while the regulator keeps applying u_k = −K_k x_k to wherever it lands.
    """
    A, B = system.A, system.B
    states = [np.asarray(x0, dtype=float)]
    inputs = []
    for k, K in enumerate(gains):
        u = -K @ states[-1]
        inputs.append(u)
        x = A @ states[-1] + B @ u
        states.append(x if disturbances is None else x + disturbances[k])
    inputs_arr = np.array(inputs) if inputs else np.zeros((0, system.m))
    return np.array(states), inputs_arr


def observe(system: LinearSystem, states: np.ndarray, target: np.ndarray,
            rng: Optional[np.random.Generator]) -> np.ndarray:
    outputs = (np.atleast_2d(states) + target) @ system.C.T
    if rng is not None and not system.noiseless:
        outputs = outputs + rng.standard_normal(outputs.shape) * system.noise_std
    return outputs


def simulate(spec: LQRProblemSpec, gains: GainSequence, rng_seed=None,
             disturbances: Optional[np.ndarray] = None) -> SimulatedTrajectory:
    """
    Closed-loop rollout u_k = −K_k x_k with Gaussian output noise.

    Deterministic for a fixed seed. `disturbances` (N×n) displaces the state
    as in rollout; the noise stream does not depend on it.

    Raises:
        ValueError: If the gain sequence length differs from the horizon.
    """
    check_dimensions(spec.system)
    if gains.horizon != spec.horizon:
        raise ValueError(f"gain sequence has {gains.horizon} gains for horizon {spec.horizon}")
    states, inputs = rollout(spec.system, gains.gains, spec.x0, disturbances)
    outputs = observe(spec.system, states, np.asarray(spec.target), noise_generator(rng_seed))
    return SimulatedTrajectory(states=states, inputs=inputs, outputs=outputs)


def simulate_closed_loop(system: LinearSystem, K: np.ndarray, x0: np.ndarray, steps: int,
                         target: Optional[np.ndarray] = None, disturbance_std: float = 0.0,
                         rng_seed=None) -> SimulatedTrajectory:
    """
    Constant-gain rollout x_{k+1} = (A − BK)x_k + w_k, w_k ~ N(0, disturbance_std²I).

    Additive state disturbances keep the trajectory persistently exciting, the
    regime in which the autoregressive gain estimator is consistent.
    """
    check_dimensions(system)
    rng = noise_generator(rng_seed)
    target = np.zeros(system.n) if target is None else np.asarray(target, dtype=float)
    Ac = system.A - system.B @ K
    states = [np.asarray(x0, dtype=float)]
    inputs = []
    for _ in range(steps):
        inputs.append(-K @ states[-1])
        w = rng.standard_normal(system.n) * disturbance_std if disturbance_std > 0 else 0.0
        states.append(Ac @ states[-1] + w)
    states_arr = np.array(states)
    outputs = observe(system, states_arr, target, rng)
    return SimulatedTrajectory(states=states_arr, inputs=np.array(inputs), outputs=outputs)


def prediction_matrices(system: LinearSystem, horizon: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Stacked maps with [x_1; ..; x_N] = Sx·x_0 + Su·[u_0; ..; u_{N-1}].
    """
    A, B = system.A, system.B
    n, m = system.n, system.m
    Sx = np.zeros((n * horizon, n))
    Su = np.zeros((n * horizon, m * horizon))
    powers = [np.eye(n)]
    for _ in range(horizon):
        powers.append(A @ powers[-1])
    for k in range(1, horizon + 1):
        Sx[(k - 1) * n:k * n] = powers[k]
        for j in range(k):
            Su[(k - 1) * n:k * n, j * m:(j + 1) * m] = powers[k - 1 - j] @ B
    return Sx, Su


def solve_p0_direct(spec: LQRProblemSpec) -> np.ndarray:
    """
    Optimal inputs u_0..u_{N-1} from the normal equations of the stacked quadratic.

    Returns:
        N×m array of inputs.

    Raises:
        NumericalError: If the normal matrix is not positive definite.
    """
    check_dimensions(spec.system)
    system, obj, N = spec.system, spec.objective, spec.horizon
    if N * system.m > DIRECT_MAX_VARIABLES:
        raise ValueError(f"direct solve limited to {DIRECT_MAX_VARIABLES} variables")
    Sx, Su = prediction_matrices(system, N)
    Qbar = linalg.block_diag(*([obj.Q] * (N - 1) + [obj.H]))
    Rbar = linalg.block_diag(*([obj.R] * N))
    normal = Su.T @ Qbar @ Su + Rbar
    rhs = -Su.T @ Qbar @ Sx @ spec.x0
    try:
        U = linalg.solve(symmetrize(normal), rhs, assume_a="pos")
    except linalg.LinAlgError as e:
        raise NumericalError(f"direct LQR normal matrix is singular: {e}", stage="lqr-forward") from e
    return U.reshape(N, system.m)
