import numpy as np
import pandas as pd
import pytest

from conftest import RANDOM_TARGET
from lqr_io import (CURRENT, MANIFEST, load_dataset, read_trajectories, simulate_dataset, trajectory_frame,
                    write_dataset, write_report)
from models.lqr_models import PipelineSetting, ReconstructionReport, SimulationConfig
from solvers.lqr_forward import riccati_gains


def test_simulated_dataset_shapes_and_truth(random_config):
    data = simulate_dataset(random_config, seed=5)
    assert data.history.M == 7
    assert data.history.all_final
    assert all(Y.shape == (21, 3) for Y in data.history.trajectories)
    assert data.current.shape == (16, 3)
    record = data.manifest.current
    assert record.observed_steps == 15
    assert np.asarray(record.true_future_states).shape == (5, 3)
    np.testing.assert_allclose(record.true_state, data.current[-1], atol=1e-12)
    np.testing.assert_array_equal(data.manifest.target, RANDOM_TARGET)


def test_simulation_is_reproducible_and_prefix_stable(random_config):
    a = simulate_dataset(random_config, seed=5)
    b = simulate_dataset(random_config, seed=5)
    for x, y in zip(a.history.trajectories, b.history.trajectories):
        np.testing.assert_array_equal(x, y)
    noisy = random_config.model_copy(update={"system": random_config.system.with_noise(0.02)})
    more = simulate_dataset(noisy.model_copy(update={"trajectories": 9}), seed=5)
    fewer = simulate_dataset(noisy, seed=5)
    assert more.history.M == 9
    for x, y in zip(fewer.history.trajectories, more.history.trajectories[:7]):
        np.testing.assert_array_equal(x, y)
    other = simulate_dataset(noisy, seed=6)
    assert not np.array_equal(fewer.history.trajectories[0], other.history.trajectories[0])


def test_tail_and_head_fragments(random_config):
    tails = simulate_dataset(random_config.model_copy(update={"observed_steps": 10}), seed=0)
    assert tails.history.lengths == [10] * 7
    assert tails.history.all_final
    assert [r.start_step for r in tails.manifest.trajectories] == [10] * 7

    heads = simulate_dataset(random_config.model_copy(update={"observed_steps": 10, "fragment": "head"}), seed=0)
    assert not any(heads.history.contains_final_state)
    assert all(r.start_step == 0 for r in heads.manifest.trajectories)


def test_pushed_stretches_follow_the_same_gains(tmp_path, random_config):
    config = random_config.model_copy(update={"pushes": 9, "push_spread": 2.0, "push_window": 3})
    data = simulate_dataset(config, seed=4)
    plain = simulate_dataset(random_config, seed=4)
    assert data.history.M == 16
    assert data.history.lengths == [20] * 7 + [1, 2, 3] * 3
    assert data.history.all_final
    assert data.history.replanned == [False] * 7 + [True] * 9
    assert data.history.settled == list(range(7))
    assert [r.start_step for r in data.manifest.trajectories[7:]] == [19, 18, 17] * 3
    for x, y in zip(plain.history.trajectories, data.history.trajectories):
        np.testing.assert_array_equal(x, y)
    np.testing.assert_array_equal(plain.current, data.current)

    # Noiseless stretches obey the closed loop of the step they start at
    trace = riccati_gains(config.problem(np.asarray(config.initial)))
    system = config.system
    for Y, record in zip(data.history.trajectories[7:], data.manifest.trajectories[7:]):
        x = Y - RANDOM_TARGET
        for k in range(Y.shape[0] - 1):
            K = trace.K(record.start_step + k)
            np.testing.assert_allclose(x[k + 1], (system.A - system.B @ K) @ x[k], atol=1e-9)

    write_dataset(data, tmp_path)
    assert load_dataset(tmp_path).history.replanned == data.history.replanned

    with pytest.raises(ValueError):
        SimulationConfig(**{**dict(random_config), "pushes": 2, "push_window": 20})


def test_write_then_load_directory(tmp_path, random_config):
    data = simulate_dataset(random_config, seed=2)
    written = write_dataset(data, tmp_path)
    assert tmp_path / MANIFEST in written
    assert (tmp_path / CURRENT).exists()
    assert (tmp_path / "traj_000.csv").exists()
    frame = pd.read_csv(tmp_path / "traj_000.csv")
    assert list(frame.columns) == ["traj_id", "t", "y1", "y2", "y3"]

    loaded = load_dataset(tmp_path)
    assert loaded.history.ids == data.history.ids
    np.testing.assert_allclose(loaded.history.trajectories[3], data.history.trajectories[3])
    np.testing.assert_allclose(loaded.current, data.current)
    assert loaded.manifest.horizon == 20


def test_reader_sorts_and_groups(tmp_path):
    frame = pd.concat([trajectory_frame("b", np.array([[3.0], [4.0]]), start_step=5),
                       trajectory_frame("a", np.array([[1.0], [2.0]]))])
    path = tmp_path / "mixed.csv"
    frame.iloc[::-1].to_csv(path, index=False)
    groups = read_trajectories(path)
    assert [name for name, _ in groups] == ["a", "b"]
    np.testing.assert_array_equal(groups[1][1], [[3.0], [4.0]])


@pytest.mark.parametrize("content", ["traj_id,t,y1\n", "id,t,y1\nx,0,1.0\n", "traj_id,t,y2\nx,0,1.0\n"])
def test_reader_rejects_malformed_files(tmp_path, content):
    path = tmp_path / "bad.csv"
    path.write_text(content)
    with pytest.raises(ValueError):
        read_trajectories(path)


def test_missing_manifest(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path)


def test_report_written_as_json(tmp_path):
    report = ReconstructionReport(setting=PipelineSetting.FINAL_STATE, horizon=12)
    path = tmp_path / "nested" / "report.json"
    write_report(report, path)
    assert ReconstructionReport.model_validate_json(path.read_text()).horizon == 12
