import numpy as np
import pytest

from conftest import R_TRUE, RANDOM_TARGET
from factories import random_spd, spread_initials, trajectories
from lqr_utils import relative_error
from models.lqr_models import LinearSystem, LQRObjective, LQRProblemSpec, TrajectorySet
from solvers.errors import DomainError, PreconditionError
from solvers.ioc_final_state import (build_pmp_system, fit_final_state_weights, multi_start_final_state_fit,
                                     pmp_residual)
from solvers.lqr_forward import prediction_matrices, riccati_gains, riccati_gains_for, solve_p0_direct


def _fragments(system, count=7, seed=0, tail=10, R=R_TRUE):
    rng = np.random.default_rng(seed)
    objective = LQRObjective.final_state_for(system.n, R)
    initials = spread_initials(rng, RANDOM_TARGET, count)
    return trajectories(system, objective, 20, RANDOM_TARGET, initials, tail=tail, seed=seed)


def test_pmp_states_match_riccati_rollout(noiseless_random_system, final_state_objective):
    spec = LQRProblemSpec(system=noiseless_random_system, objective=final_state_objective, horizon=8,
                          target=RANDOM_TARGET, initial=RANDOM_TARGET + [2.0, -1.0, 0.5])
    trace = riccati_gains(spec)
    x = [spec.x0]
    for K in trace.gains.gains:
        x.append((noiseless_random_system.A - noiseless_random_system.B @ K) @ x[-1])
    pmp = build_pmp_system(noiseless_random_system, R_TRUE, 8)
    states = pmp.solve(spec.x0[:, None])[0]
    np.testing.assert_allclose(states, np.array(x[1:]), atol=1e-9)


def test_pmp_system_is_invariant_to_joint_scaling(noiseless_random_system):
    x0 = np.array([[1.0], [-2.0], [0.5]])
    base = build_pmp_system(noiseless_random_system, R_TRUE, 6).solve(x0)
    for alpha in (0.2, 7.0):
        scaled = build_pmp_system(noiseless_random_system, alpha * R_TRUE, 6, H=alpha * np.eye(3)).solve(x0)
        np.testing.assert_allclose(scaled, base, atol=1e-10)


def test_pmp_system_rejects_indefinite_r(noiseless_random_system):
    with pytest.raises(DomainError):
        build_pmp_system(noiseless_random_system, -np.eye(3), 4)


def test_residual_vanishes_at_truth(noiseless_random_system):
    data = _fragments(noiseless_random_system)
    assert pmp_residual(R_TRUE, noiseless_random_system, data, RANDOM_TARGET) < 1e-16
    assert (pmp_residual(R_TRUE, noiseless_random_system, data, RANDOM_TARGET)
            < pmp_residual(2 * R_TRUE, noiseless_random_system, data, RANDOM_TARGET))


def test_scalar_residual_curve_matches_direct_solves():
    system = LinearSystem(A=[[1.1]], B=[[0.5]], C=[[1.0]], noise_std=0.0)
    target = np.array([2.0])
    r_true = np.array([[0.7]])
    objective = LQRObjective.final_state_for(1, r_true)
    data = trajectories(system, objective, 6, target, [np.array([5.0]), np.array([-1.0])])
    Sx, Su = prediction_matrices(system, 6)
    for r in np.linspace(0.1, 2.0, 12):
        expected = 0.0
        for Y in data.trajectories:
            spec = LQRProblemSpec(system=system, objective=LQRObjective.final_state_for(1, [[r]]), horizon=6,
                                  target=target, initial=Y[0])
            u = solve_p0_direct(spec).ravel()
            x = Sx @ spec.x0 + Su @ u
            expected += float(np.sum((Y[1:, 0] - x - target[0]) ** 2))
        expected /= data.M
        assert pmp_residual(np.array([[r]]), system, data, target) == pytest.approx(expected, rel=1e-8, abs=1e-18)


def test_fragments_need_two_observations(noiseless_random_system):
    data = TrajectorySet(trajectories=[np.zeros((1, 3))], contains_final_state=[True])
    with pytest.raises(PreconditionError):
        pmp_residual(np.eye(3), noiseless_random_system, data, RANDOM_TARGET)


def test_final_state_fit_recovers_r_without_noise(noiseless_random_system):
    data = _fragments(noiseless_random_system)
    result = fit_final_state_weights(noiseless_random_system, data, RANDOM_TARGET)
    assert relative_error(result.R, R_TRUE) < 1e-4
    assert result.residual < 1e-10
    assert result.iterations > 0


def test_final_state_fit_with_noise(random_system):
    data = _fragments(random_system, seed=3)
    result = multi_start_final_state_fit(random_system, data, RANDOM_TARGET, starts=3, max_workers=1)
    assert result.starts == 3
    assert relative_error(result.R, R_TRUE) < 0.05
    np.testing.assert_allclose(result.R, result.R.T)
    assert np.all(np.linalg.eigvalsh(result.R) > 0)


def test_multi_start_keeps_smallest_residual(random_system):
    data = _fragments(random_system, count=4, seed=1)
    single = fit_final_state_weights(random_system, data, RANDOM_TARGET)
    best = multi_start_final_state_fit(random_system, data, RANDOM_TARGET, starts=3, max_workers=2)
    assert best.residual <= single.residual + 1e-12


def test_final_state_fit_rejects_indefinite_start(noiseless_random_system):
    data = _fragments(noiseless_random_system, count=3)
    with pytest.raises(DomainError):
        fit_final_state_weights(noiseless_random_system, data, RANDOM_TARGET, init=-np.eye(3))


def test_distinct_weights_give_distinct_closed_loops(noiseless_random_system):
    rng = np.random.default_rng(11)
    B = noiseless_random_system.B
    for _ in range(10):
        R1, R2 = random_spd(rng, 3), random_spd(rng, 3)
        if np.linalg.norm(R1 - R2) <= 0.1:
            continue
        K1 = riccati_gains_for(noiseless_random_system, np.eye(3), np.zeros((3, 3)), R1, 10).gains.gains
        K2 = riccati_gains_for(noiseless_random_system, np.eye(3), np.zeros((3, 3)), R2, 10).gains.gains
        assert max(np.max(np.abs(B @ (k1 - k2))) for k1, k2 in zip(K1, K2)) > 1e-8


@pytest.mark.slow
def test_final_state_fit_error_shrinks_with_more_trajectories(random_system):
    def median_error(count):
        errs = [relative_error(fit_final_state_weights(random_system, _fragments(random_system, count, seed),
                                              RANDOM_TARGET).R, R_TRUE)
                for seed in range(10)]
        return float(np.median(errs))

    assert median_error(16) < median_error(4)


@pytest.mark.slow
def test_final_state_fit_with_noise_over_seeds(random_system):
    errs = [relative_error(fit_final_state_weights(random_system, _fragments(random_system, seed=seed),
                                                   RANDOM_TARGET).R, R_TRUE)
            for seed in range(8)]
    assert np.median(errs) < 0.05


@pytest.mark.slow
def test_final_state_fit_error_trend_over_trajectory_count(random_system):
    counts = list(range(3, 14, 2))
    means = [np.mean([relative_error(fit_final_state_weights(random_system, _fragments(random_system, count, seed),
                                                             RANDOM_TARGET).R, R_TRUE)
                      for seed in range(8)])
             for count in counts]
    assert means[-1] < means[0]
    assert np.polyfit(counts, np.log(means), 1)[0] < 0
