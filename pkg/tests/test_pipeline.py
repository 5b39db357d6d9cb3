import json

import numpy as np
import pytest

from conftest import DESK_INITIALS, DESK_TARGET, R_TRUE, RANDOM_TARGET
from lqr_io import simulate_dataset
from models.lqr_models import (Feasibility, LinearSystem, LQRObjective, PipelineOptions, PipelineSetting,
                               SimulationConfig, TargetMethod)
from solvers.errors import PipelineStageError, PreconditionError
from solvers.lqr_forward import simulate_closed_loop, solve_dare
from solvers.pipeline import run_pipeline

ALL_STAGES = ["model", "target-estimation", "gain-estimation", "weight-identification", "horizon-search",
              "state-filter", "reconstruction", "prediction"]


def _truth(config):
    obj = config.objective
    return LQRObjective(H=obj.H, Q=obj.Q, R=obj.R)


def _run(data, system, setting, options):
    return run_pipeline(data.history, data.current, system, setting, options, max_workers=1)


def test_noiseless_classic_reconstruction_is_exact(random_config):
    data = simulate_dataset(random_config, seed=1)
    options = PipelineOptions(known_target=RANDOM_TARGET, truth=_truth(random_config))
    report = _run(data, random_config.system, PipelineSetting.CLASSIC, options)
    assert report.stages_completed == ALL_STAGES
    assert report.failed_stage is None
    assert report.weight_error < 1e-6
    assert report.alpha_hat == pytest.approx(5.0, rel=1e-6)
    assert report.horizon == 20
    assert report.diagnostics.feasibility == Feasibility.EXACT_FEASIBLE
    assert report.diagnostics.kalman_shortcut
    current = data.manifest.current
    np.testing.assert_allclose(report.current_state, current.true_state, atol=1e-9)
    np.testing.assert_allclose(report.predicted_input, current.true_input, atol=1e-6)
    np.testing.assert_allclose(report.predicted_states, current.true_future_states, atol=1e-6)
    assert report.baseline_states.shape == (5, 3)


def test_noiseless_final_state_reconstruction(noiseless_random_system, final_state_objective):
    config = SimulationConfig(system=noiseless_random_system, objective=final_state_objective, horizon=20,
                              target=RANDOM_TARGET, initial=RANDOM_TARGET + np.array([3.0, -2.0, 1.0]),
                              initial_spread=3.0, trajectories=7, observed_steps=10, current_steps=15)
    data = simulate_dataset(config, seed=2)
    options = PipelineOptions(known_target=RANDOM_TARGET, multi_starts=1)
    report = _run(data, noiseless_random_system, PipelineSetting.FINAL_STATE, options)
    assert "gain-estimation" not in report.stages_completed
    np.testing.assert_allclose(report.H, np.eye(3))
    assert np.linalg.norm(report.R - R_TRUE) / np.linalg.norm(R_TRUE) < 1e-4
    assert report.horizon == 20
    np.testing.assert_allclose(report.predicted_input, data.manifest.current.true_input, atol=1e-4)


def test_noisy_prediction_with_known_weights(random_config):
    config = random_config.model_copy(update={"system": random_config.system.with_noise(0.02)})
    data = simulate_dataset(config, seed=3)
    options = PipelineOptions(known_target=RANDOM_TARGET, known_weights=_truth(config))
    report = _run(data, config.system, PipelineSetting.CLASSIC, options)
    assert abs(report.horizon - 20) <= 2
    assert report.horizon_trace.result == report.horizon
    assert not report.diagnostics.kalman_shortcut
    assert np.linalg.norm(report.predicted_input - data.manifest.current.true_input) < 0.1


def test_isotropic_desk_weights_use_least_condition(desk_system, desk_objective):
    config = SimulationConfig(system=desk_system, objective=desk_objective, horizon=15, target=DESK_TARGET,
                              initial=DESK_INITIALS[0], initial_states=DESK_INITIALS, trajectories=4,
                              current_steps=10)
    data = simulate_dataset(config, seed=0)
    options = PipelineOptions(target_method=TargetMethod.LINE_INTERSECTION, truth=_truth(config))
    report = _run(data, desk_system, PipelineSetting.CLASSIC, options)
    assert report.stages_completed == ALL_STAGES
    assert report.failed_stage is None
    np.testing.assert_allclose(report.target, DESK_TARGET, atol=1e-6)
    assert report.diagnostics.null_dimension == 3
    assert any("3-dimensional family" in note for note in report.diagnostics.notes)
    assert report.weight_error < 0.05
    assert report.tau == pytest.approx(50.0, rel=1e-3)
    assert report.horizon == 15
    np.testing.assert_allclose(report.predicted_input, data.manifest.current.true_input, rtol=1e-4)


def test_classic_setting_needs_final_states(random_config):
    config = random_config.model_copy(update={"fragment": "head", "observed_steps": 10})
    data = simulate_dataset(config, seed=0)
    with pytest.raises(PipelineStageError) as excinfo:
        _run(data, config.system, PipelineSetting.CLASSIC, PipelineOptions())
    assert excinfo.value.stage == "gain-estimation"
    assert isinstance(excinfo.value.cause, PreconditionError)
    assert excinfo.value.report.stages_completed == ["model"]


def test_invalid_system_fails_first_stage(random_config):
    data = simulate_dataset(random_config, seed=0)
    broken = LinearSystem(A=np.diag([1.0, 2.0, 3.0]), B=[[1.0], [0.0], [0.0]], C=np.eye(3))
    with pytest.raises(PipelineStageError) as excinfo:
        _run(data, broken, PipelineSetting.CLASSIC, PipelineOptions())
    assert excinfo.value.stage == "model"
    payload = json.loads(excinfo.value.report.model_dump_json())
    assert payload["failed_stage"] == "model"
    assert payload["stages_completed"] == []


def test_stop_after_returns_partial_report(random_config):
    data = simulate_dataset(random_config, seed=0)
    report = _run(data, random_config.system, PipelineSetting.CLASSIC,
                 PipelineOptions(stop_after="target-estimation"))
    assert report.stages_completed == ["model", "target-estimation"]
    assert report.target is not None
    assert report.H is None and report.horizon is None
    assert report.diagnostics.target_method == TargetMethod.FINAL_STATE_AVERAGE


def test_pipeline_is_deterministic(random_config):
    config = random_config.model_copy(update={"system": random_config.system.with_noise(0.02)})
    data = simulate_dataset(config, seed=4)
    options = PipelineOptions(known_target=RANDOM_TARGET, known_weights=_truth(config), seed=9)
    first = _run(data, config.system, PipelineSetting.CLASSIC, options)
    second = _run(data, config.system, PipelineSetting.CLASSIC, options)
    assert first.model_dump_json() == second.model_dump_json()


def test_infinite_horizon_without_history(noiseless_random_system, classic_objective):
    _, K_star = solve_dare(noiseless_random_system, classic_objective.Q, classic_objective.R)
    closed = simulate_closed_loop(noiseless_random_system, K_star, np.array([3.0, -2.0, 1.0]), 30)
    report = run_pipeline(None, closed.outputs, noiseless_random_system,
                          PipelineSetting.INFINITE_HORIZON, PipelineOptions(forecast_steps=4), max_workers=1)
    assert report.stages_completed == ["model", "target-estimation", "gain-estimation", "state-filter",
                                       "prediction"]
    np.testing.assert_allclose(report.target, np.zeros(3))
    np.testing.assert_allclose(report.K_infinite, K_star, atol=1e-6)
    assert report.predicted_states.shape == (4, 3)
    np.testing.assert_allclose(report.predicted_input, -K_star @ closed.states[-1], atol=1e-6)


@pytest.mark.slow
def test_true_horizon_never_hurts_input_prediction(random_config):
    config = random_config.model_copy(update={"system": random_config.system.with_noise(0.02)})
    searched, known = [], []
    for seed in range(10):
        data = simulate_dataset(config, seed=seed)
        truth = data.manifest.current.true_input
        base = dict(known_target=RANDOM_TARGET, known_weights=_truth(config))
        a = _run(data, config.system, PipelineSetting.CLASSIC, PipelineOptions(**base))
        b = _run(data, config.system, PipelineSetting.CLASSIC, PipelineOptions(**base, known_horizon=20))
        searched.append(np.linalg.norm(a.predicted_input - truth))
        known.append(np.linalg.norm(b.predicted_input - truth))
    assert np.median(known) <= np.median(searched) + 1e-12




def test_unexpected_solver_error_keeps_partial_report(random_config, monkeypatch):
    def broken(*args, **kwargs):
        raise np.linalg.LinAlgError("SVD did not converge")

    monkeypatch.setattr("solvers.pipeline.solve_classic_weights", broken)
    data = simulate_dataset(random_config, seed=1)
    with pytest.raises(PipelineStageError) as excinfo:
        _run(data, random_config.system, PipelineSetting.CLASSIC, PipelineOptions(known_target=RANDOM_TARGET))
    error = excinfo.value
    assert error.stage == "weight-identification"
    assert isinstance(error.cause, np.linalg.LinAlgError)
    assert error.report.failed_stage == "weight-identification"
    assert error.report.error.startswith("LinAlgError")
    assert error.report.stages_completed == ["model", "target-estimation", "gain-estimation"]
    assert error.report.diagnostics.gain_window == 20


def _replanned(config, sigma):
    """Twenty full runs plus 48 stretches re-planned after a push in the last six steps."""
    return config.model_copy(update={"system": config.system.with_noise(sigma), "trajectories": 20,
                                     "pushes": 48, "push_spread": 5.0, "push_window": 6})


def _classic_weight_error(config, seed):
    data = simulate_dataset(config, seed=seed)
    options = PipelineOptions(known_target=RANDOM_TARGET, truth=_truth(config), stop_after="weight-identification")
    try:
        report = _run(data, config.system, PipelineSetting.CLASSIC, options)
    except PipelineStageError as e:
        assert e.stage == "weight-identification"
        return 1.0
    return report.weight_error


@pytest.mark.slow
def test_classic_weight_error_falls_with_noise(random_config):
    errors = {sigma: [_classic_weight_error(_replanned(random_config, sigma), seed) for seed in range(10)]
              for sigma in (0.2, 0.02, 0.001)}
    means = [np.mean(errors[sigma]) for sigma in (0.2, 0.02, 0.001)]
    assert means[0] > means[1] > means[2]
    assert np.median(errors[0.02]) < 0.1


@pytest.mark.slow
def test_prediction_from_own_estimates(random_config):
    config = _replanned(random_config, 0.02)
    input_errors, wins = [], 0
    for seed in range(20):
        data = simulate_dataset(config, seed=seed)
        truth = data.manifest.current
        try:
            report = _run(data, config.system, PipelineSetting.CLASSIC, PipelineOptions(seed=seed))
        except PipelineStageError:
            input_errors.append(np.inf)
            continue
        assert report.diagnostics.target_method == TargetMethod.FINAL_STATE_AVERAGE
        input_errors.append(np.linalg.norm(report.predicted_input - truth.true_input))
        ours = np.linalg.norm(report.predicted_states - truth.true_future_states, axis=1).mean()
        baseline = np.linalg.norm(report.baseline_states - truth.true_future_states, axis=1).mean()
        wins += ours < baseline
    assert np.median(input_errors) < 0.05
    assert wins > 10
