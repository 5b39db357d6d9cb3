import numpy as np
import pytest
from fastapi.testclient import TestClient

from conftest import DESK_INITIALS, DESK_TARGET, RANDOM_TARGET
from dependencies.lqr_deps import set_settings
from lqr_io import simulate_dataset, write_dataset
from lqr_server import app
from models.lqr_models import LQRProblemSpec


@pytest.fixture
def client():
    with TestClient(app) as client:
        yield client


@pytest.fixture
def desk_spec(desk_system, desk_objective):
    return LQRProblemSpec(system=desk_system, objective=desk_objective, horizon=20, target=DESK_TARGET,
                          initial=DESK_INITIALS[0])


def _pipeline_body(data, system, setting="classic", **options):
    return {"system": system.model_dump(mode="json"), "history": data.history.model_dump(mode="json"),
            "current": data.current.tolist(), "setting": setting, "options": options}


def test_root_and_health(client):
    assert client.get("/").json()["status"] == "running"
    assert client.get("/health").json() == {"status": "healthy"}


def test_validate_system(client, random_system):
    response = client.post("/system/validate", json={"system": random_system.model_dump(mode="json")})
    assert response.status_code == 200
    body = response.json()
    assert body["passed"]
    assert (body["n"], body["m"], body["p"]) == (3, 3, 3)

    singular = {"A": [[1.0, 0.0], [0.0, 1.0]], "B": [[1.0], [1.0]], "C": [[1.0, 0.0], [0.0, 1.0]]}
    body = client.post("/system/validate", json={"system": singular}).json()
    assert not body["passed"]
    failed = {c["name"] for c in body["checks"] if not c["passed"]}
    assert "controllable" in failed


def test_schema_lists_model_types(client):
    schemas = client.get("/system/schema").json()["schemas"]
    assert set(schemas) == {"LinearSystem", "LQRObjective", "LQRProblemSpec"}


def test_forward_gains_and_simulation(client, desk_spec):
    body = {"spec": desk_spec.model_dump(mode="json")}
    gains = client.post("/forward/gains", json=body).json()
    assert gains["horizon"] == 20
    assert np.asarray(gains["gains"]).shape == (20, 2, 2)

    run = client.post("/forward/simulate", json={**body, "seed": 3}).json()
    outputs = np.asarray(run["outputs"])
    assert outputs.shape == (21, 2)
    assert np.linalg.norm(outputs[-1] - DESK_TARGET) < np.linalg.norm(outputs[0] - DESK_TARGET)


def test_horizon_search(client, desk_spec, desk_objective):
    run = client.post("/forward/simulate", json={"spec": desk_spec.model_dump(mode="json")}).json()
    body = {"system": desk_spec.system.model_dump(mode="json"), "outputs": run["outputs"][:16],
            "target": DESK_TARGET.tolist(), "objective": desk_objective.model_dump(mode="json")}
    response = client.post("/horizon/search", json=body)
    assert response.status_code == 200
    assert response.json()["result"] == 20

    short = client.post("/horizon/search", json={**body, "outputs": run["outputs"][:1]})
    assert short.status_code == 422


def test_pipeline_on_posted_trajectories(client, random_config):
    data = simulate_dataset(random_config, seed=1)
    body = _pipeline_body(data, random_config.system, known_target=RANDOM_TARGET.tolist())
    response = client.post("/pipeline", json=body)
    assert response.status_code == 200
    report = response.json()
    assert report["horizon"] == 20
    assert report["failed_stage"] is None
    np.testing.assert_allclose(report["predicted_input"], data.manifest.current.true_input, atol=1e-6)


def test_pipeline_precondition_failure_is_unprocessable(client, random_config):
    config = random_config.model_copy(update={"fragment": "head", "observed_steps": 10})
    data = simulate_dataset(config, seed=0)
    response = client.post("/pipeline", json=_pipeline_body(data, config.system))
    assert response.status_code == 422
    assert "gain-estimation" in response.json()["detail"]


def test_pipeline_from_directory(client, tmp_path, random_config):
    write_dataset(simulate_dataset(random_config, seed=2), tmp_path)
    response = client.post("/pipeline/from-dir",
                           json={"data_dir": str(tmp_path), "setting": "classic",
                                 "options": {"known_target": RANDOM_TARGET.tolist(),
                                             "stop_after": "weight-identification"}})
    assert response.status_code == 200
    assert response.json()["stages_completed"][-1] == "weight-identification"


def test_pipeline_from_missing_directory(client, tmp_path):
    response = client.post("/pipeline/from-dir", json={"data_dir": str(tmp_path / "nope"), "setting": "classic"})
    assert response.status_code == 404
    response = client.post("/pipeline/from-dir", json={"data_dir": str(tmp_path), "setting": "classic"})
    assert response.status_code == 404


def test_pipeline_needs_initialized_settings(random_config):
    set_settings(None)
    data = simulate_dataset(random_config, seed=0)
    client = TestClient(app)
    response = client.post("/pipeline", json=_pipeline_body(data, random_config.system))
    assert response.status_code == 500
    assert "not initialized" in response.json()["detail"]
