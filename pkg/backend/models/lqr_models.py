import os
from enum import Enum
from typing import Annotated, Any, Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import (BaseModel, BeforeValidator, ConfigDict, Field, PlainSerializer,
                      WithJsonSchema, field_validator, model_validator)

SCHEMA_VERSION = "1.0"


def _as_array(ndim: int):
    def convert(value: Any) -> np.ndarray:
        try:
            array = np.array(value, dtype=float)
        except (TypeError, ValueError) as e:
            raise ValueError(f"expected a numeric {ndim}-D array: {e}") from e
        if array.ndim != ndim:
            raise ValueError(f"expected a {ndim}-D array, got shape {array.shape}")
        if not np.all(np.isfinite(array)):
            raise ValueError("array entries must be finite")
        array.setflags(write=False)
        return array
    return convert


def _to_list(array: np.ndarray) -> list:
    return np.asarray(array).tolist()


# Row-major nested arrays on the wire, read-only numpy arrays in Python
Matrix = Annotated[
    np.ndarray,
    BeforeValidator(_as_array(2)),
    PlainSerializer(_to_list, return_type=list),
    WithJsonSchema({"type": "array", "items": {"type": "array", "items": {"type": "number"}}}),
]
Vector = Annotated[
    np.ndarray,
    BeforeValidator(_as_array(1)),
    PlainSerializer(_to_list, return_type=list),
    WithJsonSchema({"type": "array", "items": {"type": "number"}}),
]


class ObjectiveSetting(str, Enum):
    FINAL_STATE = "final-state"
    CLASSIC = "classic"


class PipelineSetting(str, Enum):
    FINAL_STATE = "final-state"
    CLASSIC = "classic"
    INFINITE_HORIZON = "infinite-horizon"


class TargetMethod(str, Enum):
    LINE_INTERSECTION = "line-intersection"
    FINAL_STATE_AVERAGE = "final-state-average"


class Feasibility(str, Enum):
    EXACT_FEASIBLE = "exact-feasible"
    INFEASIBLE = "infeasible"


class SolveMode(str, Enum):
    EXACT_NULLSPACE = "exact-nullspace"
    QP_FALLBACK = "qp-fallback"


class NumericModel(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)


class LinearSystem(NumericModel):
    """Plant x_{k+1} = A x_k + B u_k observed through y_k = C x_k + ω_k."""
    A: Matrix
    B: Matrix
    C: Matrix
    noise_std: Vector               # per output channel, Γ = diag(σ²)

    @model_validator(mode="before")
    @classmethod
    def broadcast_noise(cls, data: Any) -> Any:
        if isinstance(data, dict) and "C" in data:
            noise = data.get("noise_std", 0.0)
            if np.ndim(noise) == 0:
                data = {**data, "noise_std": [float(noise)] * int(np.shape(data["C"])[0])}
        return data

    @field_validator("noise_std")
    @classmethod
    def non_negative(cls, v: np.ndarray) -> np.ndarray:
        if np.any(v < 0):
            raise ValueError("noise_std must be non-negative")
        return v

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def p(self) -> int:
        return self.C.shape[0]

    @property
    def gamma(self) -> np.ndarray:
        return np.diag(np.asarray(self.noise_std) ** 2)

    @property
    def noiseless(self) -> bool:
        return not np.any(self.noise_std > 0)

    def with_noise(self, noise_std: float) -> "LinearSystem":
        return self.model_copy(update={"noise_std": np.full(self.p, float(noise_std))})


class LQRObjective(NumericModel):
    """Weights of the objective x_NᵀHx_N + Σ (x_kᵀQx_k + u_kᵀRu_k)."""
    H: Matrix
    Q: Matrix
    R: Matrix
    setting: ObjectiveSetting = ObjectiveSetting.CLASSIC

    @model_validator(mode="after")
    def check_weights(self) -> "LQRObjective":
        for name in ("H", "Q", "R"):
            W = getattr(self, name)
            if W.shape[0] != W.shape[1]:
                raise ValueError(f"{name} must be square, got {W.shape}")
            if not np.allclose(W, W.T, rtol=1e-9, atol=1e-12):
                raise ValueError(f"{name} must be symmetric")
        if self.H.shape != self.Q.shape:
            raise ValueError("H and Q must have the same shape")
        if np.linalg.eigvalsh(self.H)[0] <= 0:
            raise ValueError("H must be positive definite")
        if np.linalg.eigvalsh(self.R)[0] <= 0:
            raise ValueError("R must be positive definite")
        scale = max(1.0, float(np.max(np.abs(self.Q))))
        if np.linalg.eigvalsh(self.Q)[0] < -1e-10 * scale:
            raise ValueError("Q must be positive semidefinite")
        if self.setting == ObjectiveSetting.FINAL_STATE:
            if not np.allclose(self.H, np.eye(self.H.shape[0])) or np.any(self.Q != 0):
                raise ValueError("final-state setting requires H = I and Q = 0")
        return self

    @classmethod
    def final_state_for(cls, n: int, R: np.ndarray) -> "LQRObjective":
        return cls(H=np.eye(n), Q=np.zeros((n, n)), R=R, setting=ObjectiveSetting.FINAL_STATE)


class LQRProblemSpec(NumericModel):
    """The forward problem: drive x̄ to x_T over N steps."""
    system: LinearSystem
    objective: LQRObjective
    horizon: int = Field(ge=1)
    target: Vector
    initial: Vector

    @property
    def x0(self) -> np.ndarray:
        return np.asarray(self.initial) - np.asarray(self.target)


class TrajectorySet(NumericModel):
    """M observed output sequences, one (l_j+1)×p matrix each."""
    trajectories: List[Matrix] = Field(min_length=1)
    contains_final_state: List[bool]
    traj_ids: Optional[List[str]] = None
    # Stretches recorded after a push made the agent re-plan; they end off target
    replanned: Optional[List[bool]] = None

    @model_validator(mode="after")
    def check_lengths(self) -> "TrajectorySet":
        if len(self.contains_final_state) != len(self.trajectories):
            raise ValueError("one contains_final_state flag per trajectory is required")
        if self.traj_ids is not None and len(self.traj_ids) != len(self.trajectories):
            raise ValueError("one traj_id per trajectory is required")
        if self.replanned is not None and len(self.replanned) != len(self.trajectories):
            raise ValueError("one replanned flag per trajectory is required")
        widths = {Y.shape[1] for Y in self.trajectories}
        if len(widths) != 1:
            raise ValueError("all trajectories must have the same number of output channels")
        return self

    @property
    def M(self) -> int:
        return len(self.trajectories)

    @property
    def lengths(self) -> List[int]:
        """Per-trajectory l_j (number of observations minus one)."""
        return [Y.shape[0] - 1 for Y in self.trajectories]

    @property
    def ids(self) -> List[str]:
        return self.traj_ids or [f"traj_{j:03d}" for j in range(self.M)]

    @property
    def all_final(self) -> bool:
        return all(self.contains_final_state)

    @property
    def settled(self) -> List[int]:
        """Indices of trajectories that contain their final state and were not re-planned."""
        replanned = self.replanned or [False] * self.M
        return [j for j in range(self.M) if self.contains_final_state[j] and not replanned[j]]


class GainSequence(NumericModel):
    gains: List[Matrix]             # K_0 .. K_{N-1}
    horizon: int = Field(ge=1)
    # Covariance of vec(K_k), column-major, one per gain; None for exact gains
    covariances: Optional[List[Matrix]] = None

    @model_validator(mode="after")
    def check_length(self) -> "GainSequence":
        if len(self.gains) != self.horizon:
            raise ValueError(f"expected {self.horizon} gains, got {len(self.gains)}")
        if self.covariances is not None and len(self.covariances) != self.horizon:
            raise ValueError(f"expected {self.horizon} covariances, got {len(self.covariances)}")
        return self

    @classmethod
    def of(cls, gains: List[np.ndarray], covariances: Optional[List[np.ndarray]] = None) -> "GainSequence":
        return cls(gains=list(gains), horizon=len(gains),
                   covariances=None if covariances is None else list(covariances))


class InvariantCheck(BaseModel):
    name: str
    passed: bool
    margin: Optional[float] = None      # smallest singular value, or min noise std
    detail: Optional[str] = None


class SystemValidationReport(BaseModel):
    passed: bool
    n: int
    m: int
    p: int
    checks: List[InvariantCheck]


class HorizonEvaluation(BaseModel):
    horizon: int
    jn: float


class HorizonTraceSummary(BaseModel):
    result: int
    evaluated: List[HorizonEvaluation]
    bounds: List[Tuple[int, int]]
    expansions: int


class ReportDiagnostics(BaseModel):
    target_method: Optional[TargetMethod] = None
    target_gap: Optional[float] = None

    # Final-state weight identification
    residual: Optional[float] = None
    iterations: Optional[int] = None
    converged: Optional[bool] = None
    starts: Optional[int] = None

    # Classic weight identification
    gain_window: Optional[int] = None
    feasibility: Optional[Feasibility] = None
    rank_symmetric: Optional[int] = None
    rank_full: Optional[int] = None
    parameter_dim: Optional[int] = None
    null_dimension: Optional[int] = None
    solve_mode: Optional[SolveMode] = None
    identifiability_count: Optional[int] = None
    identifiability_threshold: Optional[int] = None
    identifiable: Optional[bool] = None

    # Infinite-horizon gain learning
    bias_corrected: Optional[bool] = None

    horizon_evaluations: Optional[int] = None
    kalman_shortcut: Optional[bool] = None
    notes: List[str] = []


class ReconstructionReport(BaseModel):
    """Result of the end-to-end reconstruction; partially filled on failure."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    schema_version: str = SCHEMA_VERSION
    setting: PipelineSetting
    seed: Optional[int] = None
    stages_completed: List[str] = []
    failed_stage: Optional[str] = None
    error: Optional[str] = None

    target: Optional[Vector] = None
    H: Optional[Matrix] = None
    Q: Optional[Matrix] = None
    R: Optional[Matrix] = None
    K_infinite: Optional[Matrix] = None
    tau: Optional[float] = None
    scale_note: Optional[str] = None

    horizon: Optional[int] = None
    horizon_trace: Optional[HorizonTraceSummary] = None
    gains: Optional[GainSequence] = None

    current_state: Optional[Vector] = None
    predicted_input: Optional[Vector] = None
    predicted_states: Optional[Matrix] = None
    baseline_states: Optional[Matrix] = None

    alpha_hat: Optional[float] = None
    weight_error: Optional[float] = None
    diagnostics: ReportDiagnostics = Field(default_factory=ReportDiagnostics)


def _default_jobs() -> int:
    return int(os.environ.get("LQR_RECON_JOBS", os.cpu_count() or 1))


class ReconstructionSettings(BaseModel):
    """Process-wide defaults, overridable per request."""
    theta: int = Field(default=10, ge=1)
    window: int = Field(default=6, ge=1)
    multi_starts: int = Field(default=3, ge=1)
    jobs: int = Field(default_factory=_default_jobs, ge=1)
    log_level: str = Field(default_factory=lambda: os.environ.get("LQR_RECON_LOG_LEVEL", "INFO"))


class PipelineOptions(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    theta: int = Field(default=10, ge=1)            # bracket step of the horizon search
    window: int = Field(default=6, ge=1)            # T, gains used for weight identification
    multi_starts: int = Field(default=3, ge=1)
    seed: int = 0
    target_method: Optional[TargetMethod] = None    # None picks by data
    gain_window: Optional[int] = Field(default=None, ge=1)
    forecast_steps: int = Field(default=5, ge=1)    # infinite-horizon forecast length
    polyfit_order: int = Field(default=3, ge=0)
    truth: Optional[LQRObjective] = None            # benchmarking only

    # Ground-truth substitutes for stage isolation studies
    known_target: Optional[Vector] = None
    known_weights: Optional[LQRObjective] = None
    known_horizon: Optional[int] = Field(default=None, ge=1)

    stop_after: Optional[str] = None


class SimulationConfig(NumericModel):
    """Synthetic data recipe: history trajectories plus one current trajectory."""
    system: LinearSystem
    objective: LQRObjective
    horizon: int = Field(ge=1)
    target: Vector
    initial: Vector                                 # centre of the initial states
    initial_spread: float = Field(default=0.0, ge=0.0)
    initial_states: Optional[List[Vector]] = None
    trajectories: int = Field(default=7, ge=1)
    observed_steps: Optional[int] = Field(default=None, ge=1)   # l_j
    fragment: Literal["tail", "head"] = "tail"                  # tails end at the final state
    current_steps: Optional[int] = Field(default=None, ge=0)    # l of the current trajectory
    current_initial: Optional[Vector] = None
    pushes: int = Field(default=0, ge=0)                        # extra re-planned history stretches
    push_spread: float = Field(default=1.0, ge=0.0)
    push_window: int = Field(default=1, ge=1)                   # pushes land on the last this-many steps

    @model_validator(mode="after")
    def check_counts(self) -> "SimulationConfig":
        if self.initial_states is not None and len(self.initial_states) != self.trajectories:
            raise ValueError("initial_states must list one state per trajectory")
        if self.observed_steps is not None and self.observed_steps > self.horizon:
            raise ValueError("observed_steps cannot exceed the horizon")
        if self.current_steps is not None and self.current_steps >= self.horizon:
            raise ValueError("current_steps must be smaller than the horizon")
        if self.pushes and self.push_window >= self.horizon:
            raise ValueError("push_window must be smaller than the horizon")
        return self

    def problem(self, initial: np.ndarray) -> LQRProblemSpec:
        return LQRProblemSpec(system=self.system, objective=self.objective, horizon=self.horizon,
                              target=self.target, initial=initial)


class TrajectoryRecord(BaseModel):
    file: str
    traj_id: str
    contains_final_state: bool
    start_step: int
    replanned: bool = False


class CurrentRecord(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    file: str
    observed_steps: int
    true_input: Vector                  # u_l
    true_future_states: Matrix          # x_{l+1} .. x_N, original coordinates
    true_state: Vector                  # x_l, original coordinates


class SimulationManifest(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    schema_version: str = SCHEMA_VERSION
    seed: int
    horizon: int
    system: LinearSystem
    objective: LQRObjective
    target: Vector
    trajectories: List[TrajectoryRecord]
    current: Optional[CurrentRecord] = None


class BenchExperiment(BaseModel):
    name: str
    kind: str                           # final-state-vs-m, classic-vs-noise, jn-curve, ...
    config: SimulationConfig
    axis: List[float]
    seeds: int = Field(default=8, ge=1)
    noise_levels: List[float] = []      # jn-curve only
    setting: PipelineSetting = PipelineSetting.CLASSIC
    disturbance_std: float = Field(default=1.0, ge=0.0)     # infinite-gain-vs-length excitation
    options: PipelineOptions = Field(default_factory=PipelineOptions)


class BenchSpec(BaseModel):
    experiments: List[BenchExperiment] = Field(min_length=1)


class ValidateSystemRequest(BaseModel):
    system: LinearSystem


class GainsRequest(BaseModel):
    spec: LQRProblemSpec


class SimulateRequest(BaseModel):
    spec: LQRProblemSpec
    seed: int = 0


class SimulateResponse(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    states: Matrix
    inputs: Matrix
    outputs: Matrix


class HorizonRequest(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    system: LinearSystem
    outputs: Matrix
    target: Vector
    objective: LQRObjective
    theta: int = Field(default=10, ge=1)


class PipelineRequest(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    system: LinearSystem
    history: TrajectorySet
    current: Matrix
    setting: PipelineSetting
    options: PipelineOptions = Field(default_factory=PipelineOptions)


class PipelineDirRequest(BaseModel):
    data_dir: str
    setting: PipelineSetting
    options: PipelineOptions = Field(default_factory=PipelineOptions)


class SchemaResponse(BaseModel):
    schemas: Dict[str, dict]
