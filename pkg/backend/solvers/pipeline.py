"""
End-to-end reconstruction: target, weights, horizon, current state, then the
reconstructed problem and its predictions.

Every stage writes into one ReconstructionReport as it completes, so a
failure leaves the report filled up to the stage that broke.
"""

from contextlib import contextmanager
from typing import Iterator, Optional

import numpy as np
from loguru import logger

from lqr_utils import max_eig, min_eig, scale_matched_error
from models.lqr_models import (LinearSystem, ObjectiveSetting, PipelineOptions, PipelineSetting,
                               ReconstructionReport, SolveMode, TargetMethod, TrajectorySet, Feasibility)
from solvers.errors import PipelineStageError, PreconditionError, ReconstructionError
from solvers.estimation import estimate_gain_sequence, estimate_infinite_gain, estimate_target, kalman_state
from solvers.horizon import HorizonObjective, binary_search_horizon
from solvers.ioc_classic import (GainNoiseModel, build_gain_relations, build_stacked_system, check_identifiability,
                                 feasibility_test, solve_classic_weights)
from solvers.ioc_final_state import multi_start_final_state_fit
from solvers.lqr_forward import riccati_gains_for, simulate_closed_loop
from solvers.predict import (baseline_polyfit_predict, predict_input, predict_states, reconstruct_problem)
from solvers.system import require_valid


class _Stopped(Exception):
    """Raised internally once `stop_after` has been reached."""


class _PipelineRun:
    def __init__(self, system: LinearSystem, history: Optional[TrajectorySet], current: np.ndarray,
                 setting: PipelineSetting, options: PipelineOptions, max_workers: Optional[int]):
        self.system = system
        self.history = history
        self.current = np.atleast_2d(np.asarray(current, dtype=float))
        self.setting = setting
        self.options = options
        self.max_workers = max_workers
        self.report = ReconstructionReport(setting=setting, seed=options.seed)
        self.l = self.current.shape[0] - 1
        self.target: Optional[np.ndarray] = None
        self.H = self.Q = self.R = None
        self.horizon: Optional[int] = None
        self.state: Optional[np.ndarray] = None

    @contextmanager
    def stage(self, name: str) -> Iterator[None]:
        logger.debug("Stage {} started", name)
        try:
            yield
        except Exception as e:
            self._fail(name, e)
        self.report.stages_completed.append(name)
        logger.info("Stage {} done", name)
        if self.options.stop_after == name:
            raise _Stopped()

    def _fail(self, name: str, error: Exception) -> None:
        self.report.failed_stage = name
        if isinstance(error, ReconstructionError):
            self.report.error = str(error)
            logger.error("Stage {} failed: {}", name, error)
        else:
            self.report.error = f"{type(error).__name__}: {error}"
            logger.opt(exception=error).error("Stage {} failed unexpectedly", name)
        raise PipelineStageError(name, error, self.report) from error

    def _history(self, stage: str) -> TrajectorySet:
        if self.history is None:
            raise PreconditionError(f"{self.setting.value} setting needs history trajectories", stage=stage)
        return self.history

    # Stages

    def validate(self) -> None:
        with self.stage("model"):
            require_valid(self.system)

    def estimate_target(self) -> None:
        with self.stage("target-estimation"):
            opts = self.options
            if opts.known_target is not None:
                self.target = np.asarray(opts.known_target, dtype=float)
                self.report.diagnostics.notes.append("target supplied by caller")
            elif self.history is None and self.setting == PipelineSetting.INFINITE_HORIZON:
                self.target = np.zeros(self.system.n)
                self.report.diagnostics.notes.append("no history; target taken as the origin")
            else:
                history = self._history("target-estimation")
                method = opts.target_method or (TargetMethod.FINAL_STATE_AVERAGE if history.all_final
                                                else TargetMethod.LINE_INTERSECTION)
                estimate = estimate_target(self.system, history, method)
                self.target = estimate.target
                self.report.diagnostics.target_method = estimate.method
                self.report.diagnostics.target_gap = estimate.gap
            self.report.target = self.target

    def identify_final_state(self) -> None:
        with self.stage("weight-identification"):
            n = self.system.n
            if self.options.known_weights is not None:
                self._use_known_weights()
                return
            result = multi_start_final_state_fit(self.system, self._history("weight-identification"), self.target,
                                                 starts=self.options.multi_starts, seed=self.options.seed,
                                                 max_workers=self.max_workers)
            self.H, self.Q, self.R = np.eye(n), np.zeros((n, n)), result.R
            diag = self.report.diagnostics
            diag.residual = result.residual
            diag.iterations = result.iterations
            diag.converged = result.converged
            diag.starts = result.starts
            low = min(1.0, min_eig(result.R))
            high = max(1.0, max_eig(result.R))
            self._record_weights(high / low, "H fixed to I; R carries the scale")

    def identify_classic(self) -> None:
        if self.options.known_weights is not None:
            with self.stage("weight-identification"):
                self._use_known_weights()
            return
        with self.stage("gain-estimation"):
            gains = estimate_gain_sequence(self.system, self._history("gain-estimation"),
                                           l=self.options.gain_window, target=self.target)
            self.report.diagnostics.gain_window = gains.horizon
        with self.stage("weight-identification"):
            window = gains.gains[-self.options.window:]
            noise = None
            if gains.covariances is not None:
                noise = GainNoiseModel(gains=list(window), covariances=list(gains.covariances[-len(window):]),
                                       system=self.system)
            sysmat = build_stacked_system(build_gain_relations(window, self.system))
            feasibility = feasibility_test(sysmat)
            diag = self.report.diagnostics
            diag.feasibility = feasibility.status
            diag.rank_symmetric = feasibility.rank_symmetric
            diag.rank_full = feasibility.rank_full
            diag.parameter_dim = feasibility.parameter_dim
            diag.null_dimension = feasibility.null_dimension
            mode = (SolveMode.EXACT_NULLSPACE if feasibility.status == Feasibility.EXACT_FEASIBLE
                    else SolveMode.QP_FALLBACK)
            estimate = solve_classic_weights(sysmat, mode, noise=noise)
            diag.solve_mode = estimate.mode
            diag.residual = estimate.residual
            if estimate.family_dimension > 1:
                diag.notes.append(f"solutions form a {estimate.family_dimension}-dimensional family; "
                                  "took the member with the least condition number")
            ident = check_identifiability(self.system, gains.gains)
            diag.identifiability_count = ident.count
            diag.identifiability_threshold = ident.threshold
            diag.identifiable = ident.identifiable
            if not ident.identifiable:
                diag.notes.append(f"only {ident.count} of {ident.threshold} identifiability vectors are "
                                  "independent; weights may not be unique up to scale")
            self.H, self.Q, self.R = estimate.H, estimate.Q, estimate.R
            self._record_weights(estimate.tau, estimate.scale_note)

    def _use_known_weights(self) -> None:
        known = self.options.known_weights
        self.H, self.Q, self.R = known.H, known.Q, known.R
        blocks = [known.H, known.R] + ([known.Q] if min_eig(known.Q) > 0 else [])
        tau = max(max_eig(W) for W in blocks) / min(min_eig(W) for W in blocks)
        self.report.diagnostics.notes.append("weights supplied by caller")
        self._record_weights(tau, "as supplied")

    def _record_weights(self, tau: float, note: str) -> None:
        report = self.report
        report.H, report.Q, report.R = self.H, self.Q, self.R
        report.tau = float(tau)
        report.scale_note = note
        truth = self.options.truth
        if truth is not None:
            err, alpha = scale_matched_error([self.H, self.Q, self.R], [truth.H, truth.Q, truth.R])
            report.weight_error = err
            report.alpha_hat = alpha

    def search_horizon(self) -> None:
        with self.stage("horizon-search"):
            if self.options.known_horizon is not None:
                self.horizon = self.options.known_horizon
                self.report.diagnostics.notes.append("horizon supplied by caller")
            else:
                objective = HorizonObjective(self.system, self.current, self.target, self.H, self.Q, self.R)
                self.horizon, trace = binary_search_horizon(objective, self.options.theta)
                self.report.horizon_trace = trace.summary()
                self.report.diagnostics.horizon_evaluations = len(trace.evaluated)
            if self.horizon <= self.l:
                raise PreconditionError(f"horizon {self.horizon} does not exceed l = {self.l}",
                                        stage="horizon-search")
            self.report.horizon = self.horizon
            self.report.gains = riccati_gains_for(self.system, self.H, self.Q, self.R, self.horizon).gains

    def filter_state(self, gains) -> None:
        with self.stage("state-filter"):
            estimate = kalman_state(self.system, gains, self.current, self.target)
            self.state = estimate.state
            self.report.current_state = estimate.state
            self.report.diagnostics.kalman_shortcut = estimate.shortcut

    def reconstruct_and_predict(self) -> None:
        setting = (ObjectiveSetting.FINAL_STATE if self.setting == PipelineSetting.FINAL_STATE
                   else ObjectiveSetting.CLASSIC)
        with self.stage("reconstruction"):
            spec = reconstruct_problem(self.system, self.target, self.H, self.Q, self.R, self.horizon,
                                       self.l, self.state, setting)
        with self.stage("prediction"):
            self.report.predicted_input = predict_input(spec)
            states = predict_states(spec)
            self.report.predicted_states = states
            self._baseline(states.shape[0])

    def _baseline(self, steps: int) -> None:
        try:
            self.report.baseline_states = baseline_polyfit_predict(self.current, steps, self.options.polyfit_order,
                                                                   self.system)
        except Exception as e:
            logger.warning("Polynomial baseline skipped: {}", e)
            self.report.diagnostics.notes.append(f"baseline skipped: {e}")

    def infinite_horizon(self) -> None:
        with self.stage("gain-estimation"):
            estimate = estimate_infinite_gain(self.system, self.current, self.target)
            self.report.K_infinite = estimate.gain
            self.report.diagnostics.bias_corrected = estimate.bias_corrected
        self.filter_state([estimate.gain] * self.l)
        with self.stage("prediction"):
            x = self.state - self.target
            forecast = simulate_closed_loop(self.system, estimate.gain, x, self.options.forecast_steps)
            self.report.predicted_input = -estimate.gain @ x
            self.report.predicted_states = forecast.states[1:] + self.target
            self._baseline(self.options.forecast_steps)

    def run(self) -> ReconstructionReport:
        try:
            self.validate()
            if self.setting == PipelineSetting.CLASSIC and self.options.known_weights is None:
                # Gain regression lines trajectories up at their final step
                history = self.history
                if history is None or not history.all_final:
                    self._fail("gain-estimation", PreconditionError(
                        "classic setting needs every history trajectory to contain its final state",
                        stage="gain-estimation"))
            self.estimate_target()
            if self.setting == PipelineSetting.INFINITE_HORIZON:
                self.infinite_horizon()
                return self.report
            if self.setting == PipelineSetting.FINAL_STATE:
                self.identify_final_state()
            else:
                self.identify_classic()
            self.search_horizon()
            self.filter_state(self.report.gains.gains[:self.l])
            self.reconstruct_and_predict()
        except _Stopped:
            logger.info("Stopped after stage {}", self.options.stop_after)
        return self.report


def run_pipeline(history: Optional[TrajectorySet], current: np.ndarray, system: LinearSystem,
                 setting: PipelineSetting, options: Optional[PipelineOptions] = None,
                 max_workers: Optional[int] = None) -> ReconstructionReport:
    """
    Reconstruct the regulator behind the observed trajectories and predict
    the current one.

    Args:
        history: Past trajectories. Fragments suffice for the final-state
            setting; the classic setting needs every trajectory to contain
            its final state. Optional for the infinite-horizon setting.
        current: (l+1)×p observations of the trajectory to predict.
        system: Plant.
        setting: Which objective to reconstruct; never inferred from data.
        options: Tuning, ground-truth overrides and `stop_after`.
        max_workers: Thread pool size for multi-start weight fitting.

    Returns:
        The filled report.

    Raises:
        PipelineStageError: A stage failed; carries the stage name, the cause
            and the report filled up to that point.
    """
    options = options or PipelineOptions()
    logger.info("Pipeline started: setting={}, l={}", setting.value, np.atleast_2d(current).shape[0] - 1)
    return _PipelineRun(system, history, current, setting, options, max_workers).run()
