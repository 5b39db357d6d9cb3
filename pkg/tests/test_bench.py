import numpy as np
import pandas as pd
import pytest

from conftest import RANDOM_TARGET
from lqr_bench import COLUMNS, point_seed, run_bench, run_experiment
from models.lqr_models import BenchExperiment, BenchSpec, PipelineOptions, PipelineSetting


def _experiment(config, kind, axis, seeds=2, **extra):
    return BenchExperiment(name=kind, kind=kind, config=config, axis=axis, seeds=seeds, **extra)


def test_point_seed_depends_only_on_axis_and_seed():
    assert point_seed(0.01, 3) == point_seed(0.01, 3)
    assert point_seed(0.01, 3) != point_seed(0.02, 3)
    assert point_seed(0.01, 3) != point_seed(0.01, 4)


def test_unknown_kind_is_rejected(random_config):
    with pytest.raises(ValueError, match="unknown experiment kind"):
        run_experiment(_experiment(random_config, "nope", [1.0]))


def test_per_seed_kinds_need_a_current_trajectory(random_config):
    config = random_config.model_copy(update={"current_steps": None})
    with pytest.raises(ValueError, match="current_steps"):
        run_experiment(_experiment(config, "jn-curve", [16.0, 20.0]))


def test_classic_weights_vs_noise(random_config):
    options = PipelineOptions(known_target=RANDOM_TARGET)
    frame = run_experiment(_experiment(random_config, "classic-vs-noise", [0.0], options=options))
    assert list(frame.columns) == COLUMNS
    assert len(frame) == 2
    assert set(frame["metric"]) == {"weight_error"}
    assert frame["value"].max() < 1e-6


def test_jn_curve_rows_per_noise_level(random_config):
    exp = _experiment(random_config, "jn-curve", [10.0, 16.0, 20.0, 24.0], noise_levels=[0.0, 0.05])
    frame = run_experiment(exp)
    # Horizons at or below the observed window are skipped
    assert sorted(set(frame["axis"])) == [16.0, 20.0, 24.0]
    assert set(frame["series"]) == {"sigma=0", "sigma=0.05"}
    exact = frame[(frame["series"] == "sigma=0") & (frame["axis"] == 20.0)]
    assert (exact["value"] < 1e-12).all()


def test_prediction_error_compares_with_polyfit(random_config):
    options = PipelineOptions(known_target=RANDOM_TARGET)
    exp = _experiment(random_config, "prediction-error", [16.0, 18.0, 20.0], options=options,
                      setting=PipelineSetting.CLASSIC)
    frame = run_experiment(exp)
    states = frame[frame["metric"] == "state_error"]
    assert set(states["series"]) == {"ours", "polyfit"}
    assert len(states) == 2 * 2 * 3
    assert (states[states["series"] == "ours"]["value"] < 1e-6).all()
    assert (frame[frame["metric"] == "input_error"]["axis"] == 15).all()


def test_infinite_gain_error_falls_with_length(random_config):
    exp = _experiment(random_config, "infinite-gain-vs-length", [100.0, 1000.0], seeds=6)
    frame = run_experiment(exp, jobs=2)
    means = frame.groupby("axis")["value"].mean()
    assert means[1000.0] < means[100.0]


def test_failed_points_become_rows(random_config):
    config = random_config.model_copy(update={"fragment": "head", "observed_steps": 10})
    frame = run_experiment(_experiment(config, "classic-vs-noise", [0.0, 0.01]))
    assert len(frame) == 4
    assert set(frame["metric"]) == {"failed"}
    assert set(frame["series"]) == {"gain-estimation"}
    assert frame["value"].isna().all()


def test_run_bench_writes_selected_tables(tmp_path, random_config):
    spec = BenchSpec(experiments=[
        _experiment(random_config, "infinite-gain-vs-length", [200.0]),
        BenchExperiment(name="skipped", kind="jn-curve", config=random_config, axis=[20.0]),
    ])
    written = run_bench(spec, tmp_path, jobs=1, only=["infinite-gain-vs-length"])
    assert written == [tmp_path / "infinite-gain-vs-length.csv"]
    frame = pd.read_csv(written[0])
    assert list(frame.columns) == COLUMNS
    assert np.isfinite(frame["value"]).all()
    assert not (tmp_path / "skipped.csv").exists()
