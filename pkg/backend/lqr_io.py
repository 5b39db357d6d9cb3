"""
Synthetic datasets and their on-disk form.

A dataset directory holds one `traj_XXX.csv` per history trajectory, an
optional `current.csv` and a `manifest.json` with the ground truth. CSV
files use the header `traj_id,t,y1..yp` with one row per observation.
"""

from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
import pandas as pd
from loguru import logger

from models.lqr_models import (CurrentRecord, GainSequence, ReconstructionReport, SimulationConfig,
                               SimulationManifest, TrajectoryRecord, TrajectorySet)
from solvers.lqr_forward import riccati_gains, simulate

MANIFEST = "manifest.json"
CURRENT = "current.csv"


@dataclass
class Dataset:
    manifest: SimulationManifest
    history: TrajectorySet
    current: Optional[np.ndarray] = None


def _initial_states(config: SimulationConfig, rng: np.random.Generator) -> List[np.ndarray]:
    if config.initial_states is not None:
        return [np.asarray(x, dtype=float) for x in config.initial_states]
    centre = np.asarray(config.initial, dtype=float)
    offsets = rng.standard_normal((config.trajectories, centre.size)) * config.initial_spread
    return [centre + d for d in offsets]


def _replanned_runs(config: SimulationConfig, initials: List[np.ndarray], gains: GainSequence,
                    rng: np.random.Generator, seeds: List[np.random.SeedSequence]) -> List[Tuple[int, np.ndarray]]:
    """
    Runs pushed at step N − 1 − (i mod push_window). The agent re-plans from
    where it lands, which keeps the gains K_s..K_{N-1}; each run is returned
    as (push step, outputs from the push to the final state).
    """
    N, n = config.horizon, config.system.n
    runs = []
    for i in range(config.pushes):
        step = N - 1 - i % config.push_window
        kicks = np.zeros((N, n))
        kicks[step - 1] = rng.standard_normal(n) * config.push_spread
        run = simulate(config.problem(initials[i % len(initials)]), gains, rng_seed=seeds[i], disturbances=kicks)
        runs.append((step, run.outputs[step:]))
    return runs


def simulate_dataset(config: SimulationConfig, seed: int) -> Dataset:
    """
    Simulate history trajectories and an optional current trajectory.

    The seed feeds one SeedSequence; initial states, each trajectory's noise
    and the current trajectory draw from independent children, so the j-th
    trajectory does not change when more trajectories are requested.

    With `pushes` set, that many extra history trajectories follow an agent
    that an external push makes re-plan near the end of the horizon; only
    the stretch from the push to the final state is recorded and flagged as
    re-planned.
    """
    children = np.random.SeedSequence(seed).spawn(config.trajectories + 2)
    rng = np.random.default_rng(children[0])
    initials = _initial_states(config, rng)
    N = config.horizon
    target = np.asarray(config.target, dtype=float)
    gains = riccati_gains(config.problem(initials[0])).gains

    observed = []
    records = []
    for j, x_bar in enumerate(initials):
        run = simulate(config.problem(x_bar), gains, rng_seed=children[j + 1])
        l_j = N if config.observed_steps is None else config.observed_steps
        if config.fragment == "tail":
            start = N - l_j
            outputs = run.outputs[start:]
        else:
            start = 0
            outputs = run.outputs[:l_j + 1]
        traj_id = f"traj_{j:03d}"
        observed.append(outputs)
        records.append(TrajectoryRecord(file=f"{traj_id}.csv", traj_id=traj_id,
                                        contains_final_state=start + l_j == N, start_step=start))
    push_seeds = children[0].spawn(config.pushes)
    for i, (step, outputs) in enumerate(_replanned_runs(config, initials, gains, rng, push_seeds)):
        traj_id = f"traj_{config.trajectories + i:03d}"
        observed.append(outputs)
        records.append(TrajectoryRecord(file=f"{traj_id}.csv", traj_id=traj_id, contains_final_state=True,
                                        start_step=step, replanned=True))

    current = None
    current_record = None
    if config.current_steps is not None:
        l = config.current_steps
        x_bar = config.current_initial if config.current_initial is not None else config.initial
        run = simulate(config.problem(np.asarray(x_bar, dtype=float)), gains, rng_seed=children[-1])
        current = run.outputs[:l + 1]
        current_record = CurrentRecord(file=CURRENT, observed_steps=l, true_input=run.inputs[l],
                                       true_future_states=run.states[l + 1:] + target,
                                       true_state=run.states[l] + target)

    history = TrajectorySet(trajectories=observed, contains_final_state=[r.contains_final_state for r in records],
                            traj_ids=[r.traj_id for r in records], replanned=[r.replanned for r in records])
    manifest = SimulationManifest(seed=seed, horizon=N, system=config.system, objective=config.objective,
                                  target=target, trajectories=records, current=current_record)
    logger.info("Simulated {} trajectories (N={}, seed={})", len(records), N, seed)
    return Dataset(manifest=manifest, history=history, current=current)


def trajectory_frame(traj_id: str, outputs: np.ndarray, start_step: int = 0) -> pd.DataFrame:
    outputs = np.atleast_2d(outputs)
    frame = pd.DataFrame(outputs, columns=[f"y{i + 1}" for i in range(outputs.shape[1])])
    frame.insert(0, "t", np.arange(start_step, start_step + outputs.shape[0]))
    frame.insert(0, "traj_id", traj_id)
    return frame


def read_trajectories(path: Path) -> List[Tuple[str, np.ndarray]]:
    """
    Read a trajectory CSV, possibly holding several trajectories.

    Raises:
        ValueError: If the header is not `traj_id,t,y1..yp`.
    """
    frame = pd.read_csv(path, dtype={"traj_id": str})
    if frame.empty:
        raise ValueError(f"{path}: no observations")
    output_cols = [c for c in frame.columns if c not in ("traj_id", "t")]
    expected = [f"y{i + 1}" for i in range(len(output_cols))]
    if list(frame.columns[:2]) != ["traj_id", "t"] or output_cols != expected or not output_cols:
        raise ValueError(f"{path}: expected header traj_id,t,y1..yp, got {','.join(frame.columns)}")
    frame = frame.sort_values(["traj_id", "t"], kind="stable")
    return [(str(traj_id), group[output_cols].to_numpy(dtype=float))
            for traj_id, group in frame.groupby("traj_id", sort=False)]


def write_dataset(dataset: Dataset, out_dir: Path) -> List[Path]:
    """Write CSVs and the manifest; returns the written paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for record, outputs in zip(dataset.manifest.trajectories, dataset.history.trajectories):
        path = out_dir / record.file
        trajectory_frame(record.traj_id, outputs, record.start_step).to_csv(path, index=False)
        written.append(path)
    if dataset.current is not None:
        path = out_dir / CURRENT
        trajectory_frame("current", dataset.current).to_csv(path, index=False)
        written.append(path)
    path = out_dir / MANIFEST
    path.write_text(dataset.manifest.model_dump_json(indent=2))
    written.append(path)
    logger.debug("Wrote {} files to {}", len(written), out_dir)
    return written


def load_dataset(data_dir: Path) -> Dataset:
    """
    Load a directory written by write_dataset.

    Raises:
        FileNotFoundError: If the manifest or a listed CSV is missing.
        ValueError: If a file is malformed.
    """
    data_dir = Path(data_dir)
    manifest = SimulationManifest.model_validate_json((data_dir / MANIFEST).read_text())
    trajectories = []
    for record in manifest.trajectories:
        (_, outputs), *rest = read_trajectories(data_dir / record.file)
        if rest:
            raise ValueError(f"{record.file}: expected one trajectory, found {len(rest) + 1}")
        trajectories.append(outputs)
    history = TrajectorySet(trajectories=trajectories,
                            contains_final_state=[r.contains_final_state for r in manifest.trajectories],
                            replanned=[r.replanned for r in manifest.trajectories],
                            traj_ids=[r.traj_id for r in manifest.trajectories])
    current = None
    if manifest.current is not None:
        current = read_trajectories(data_dir / manifest.current.file)[0][1]
    return Dataset(manifest=manifest, history=history, current=current)


def write_report(report: ReconstructionReport, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.model_dump_json(indent=2))
