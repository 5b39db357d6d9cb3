"""
Control horizon estimation.

J_N(N̂) is the squared deviation between the observed outputs y_1..y_l and
the closed-loop rollout of the N̂-horizon problem started from y_0. Its
minimizer over N̂ > l is found by a bracketing binary search on the forward
difference g_N = J_N(N̂+1) − J_N(N̂).
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from loguru import logger

from models.lqr_models import HorizonEvaluation, HorizonTraceSummary, LinearSystem
from solvers.errors import HorizonSearchError, PreconditionError
from solvers.lqr_forward import BackwardGainTable
from solvers.system import check_dimensions, output_to_state

BRACKET_CAP = 1_000_000
STAGE = "horizon-search"


class HorizonObjective:
    """
    Memoized J_N for one observation window and one set of weight estimates.

    All candidates share a single backward gain table: the gain at step i of
    the N̂-horizon problem is the table entry for N̂ − i steps to go.
    """

    def __init__(self, system: LinearSystem, outputs: np.ndarray, target: np.ndarray,
                 H: np.ndarray, Q: np.ndarray, R: np.ndarray):
        check_dimensions(system)
        self.system = system
        self.outputs = np.atleast_2d(np.asarray(outputs, dtype=float))
        self.target = np.asarray(target, dtype=float)
        self.l = self.outputs.shape[0] - 1
        if self.l < 1:
            raise PreconditionError("horizon estimation needs at least two observations", stage=STAGE)
        self.x0 = output_to_state(system, self.outputs[0])[0] - self.target
        self.table = BackwardGainTable(system, H, Q, R)
        self.memo: Dict[int, float] = {}

    def evaluate(self, N_hat: int) -> float:
        if N_hat <= self.l:
            raise PreconditionError(f"candidate horizon {N_hat} must exceed l = {self.l}", stage=STAGE)
        if N_hat in self.memo:
            return self.memo[N_hat]
        A, B, C = self.system.A, self.system.B, self.system.C
        x = self.x0
        total = 0.0
        for i in range(self.l):
            x = A @ x - B @ (self.table.gain(N_hat - i) @ x)
            r = self.outputs[i + 1] - C @ (x + self.target)
            total += float(r @ r)
        self.memo[N_hat] = total
        return total

    def gradient(self, N_hat: int) -> float:
        return self.evaluate(N_hat + 1) - self.evaluate(N_hat)


def evaluate_jn(N_hat: int, outputs: np.ndarray, target: np.ndarray, H: np.ndarray, Q: np.ndarray,
                R: np.ndarray, system: LinearSystem) -> float:
    """
    Σ_{i=1..l} ‖y_i − C(x_i + x̂_T)‖² for the N̂-horizon closed loop from
    x_0 = C⁻¹y_0 − x̂_T.

    Raises:
        PreconditionError: If N̂ ≤ l.
    """
    return HorizonObjective(system, outputs, target, H, Q, R).evaluate(N_hat)


def approx_gradient(N_hat: int, objective: HorizonObjective) -> float:
    """g_N = J_N(N̂ + 1) − J_N(N̂)."""
    return objective.gradient(N_hat)


@dataclass
class HorizonSearchTrace:
    result: int
    evaluated: Dict[int, float] = field(default_factory=dict)
    bounds: List[Tuple[int, int]] = field(default_factory=list)
    expansions: int = 0

    def summary(self) -> HorizonTraceSummary:
        return HorizonTraceSummary(
            result=self.result,
            evaluated=[HorizonEvaluation(horizon=k, jn=v) for k, v in sorted(self.evaluated.items())],
            bounds=list(self.bounds), expansions=self.expansions)


def _argmin(objective: HorizonObjective, candidates: List[int]) -> int:
    # Ties go to the smaller horizon
    return min(sorted(set(candidates)), key=objective.evaluate)


def binary_search_horizon(objective: HorizonObjective, theta: int = 10,
                          cap: int = BRACKET_CAP) -> Tuple[int, HorizonSearchTrace]:
    """
    Bracket then bisect on the sign of g_N.

    The upper bound starts at l + θ and grows by θ while g_N < 0. Bisection
    then keeps N⁺ where g_N > 0 and N⁻ otherwise until N⁺ − N⁻ ≤ 1, and the
    better of the two ends wins. Every J_N value is memoized.

    Raises:
        PreconditionError: If θ < 1.
        HorizonSearchError: If J_N keeps decreasing up to the cap.
    """
    if theta < 1:
        raise PreconditionError("step θ must be at least 1", stage=STAGE)
    l = objective.l
    lower = l + 1
    reach = l + theta
    expansions = 0
    while objective.gradient(reach) < 0:
        reach += theta
        expansions += 1
        if reach > cap:
            raise HorizonSearchError(f"J_N still decreasing at N̂ = {reach - theta}; cap {cap} reached")
    upper = max(reach, lower + 1)
    bounds = [(lower, upper)]
    while upper - lower > 1:
        mid = (lower + upper) // 2
        if objective.gradient(mid) > 0:
            upper = mid
        else:
            lower = mid
        bounds.append((lower, upper))
    best = _argmin(objective, [lower, upper])
    trace = HorizonSearchTrace(result=best, evaluated=dict(objective.memo), bounds=bounds,
                               expansions=expansions)
    logger.info("Horizon search: N̂* = {} after {} evaluations", best, len(objective.memo))
    return best, trace


def exhaustive_horizon(objective: HorizonObjective, N_max: int) -> int:
    """
    argmin of J_N over l < N̂ ≤ N_max, ties toward the smaller N̂.

    Raises:
        PreconditionError: If N_max ≤ l.
    """
    if N_max <= objective.l:
        raise PreconditionError(f"N_max = {N_max} must exceed l = {objective.l}", stage=STAGE)
    values = np.array([objective.evaluate(N) for N in range(objective.l + 1, N_max + 1)])
    return int(objective.l + 1 + np.argmin(values))


def jn_curve(objective: HorizonObjective, N_max: int) -> List[Tuple[int, float]]:
    return [(N, objective.evaluate(N)) for N in range(objective.l + 1, N_max + 1)]


def search_horizon(system: LinearSystem, outputs: np.ndarray, target: np.ndarray, H: np.ndarray,
                   Q: np.ndarray, R: np.ndarray, theta: int = 10,
                   cap: Optional[int] = None) -> Tuple[int, HorizonSearchTrace]:
    """Convenience wrapper building the objective and running the binary search."""
    objective = HorizonObjective(system, outputs, target, H, Q, R)
    return binary_search_horizon(objective, theta, BRACKET_CAP if cap is None else cap)
