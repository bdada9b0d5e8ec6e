from __future__ import annotations

import pytest
from fastapi.testclient import TestClient

from backend.api import routes
from backend.main import app
from backend.services.run_store import RunStore
from riskmm import __version__

SMALL = {"config": {"horizon": 1, "n_branch": 0, "mm": {"max_mm_iters": 1}}}


@pytest.fixture()
def client(tmp_path, monkeypatch):
    monkeypatch.setattr(routes, "run_store", RunStore(tmp_path / "runs.db"))
    return TestClient(app)


def test_health_endpoints(client):
    for path in ("/", "/api", "/api/"):
        response = client.get(path)
        assert response.status_code == 200
        assert response.json()["status"] == "ok"


def test_health_lists_verification_groups(client):
    body = client.get("/api/").json()
    assert body["version"] == __version__
    assert "corridor_benchmark" in body["check_groups"]
    assert "corridor" in body["default_groups"]
    assert "corridor_benchmark" not in body["default_groups"]


def test_lifespan_attaches_settings(tmp_path, monkeypatch):
    monkeypatch.setenv("RISKMM_THREADS", "3")
    monkeypatch.setattr(routes, "run_store", RunStore(tmp_path / "runs.db"))
    with TestClient(app) as client:
        assert client.get("/").status_code == 200
        assert app.state.settings.threads == 3


def test_solve_small_problem(client):
    response = client.post("/solve", json=SMALL)
    assert response.status_code == 200
    body = response.json()
    assert body["formulation"] == "optimistic"
    assert body["mm_iterations"] == len(body["iterations"]) - 1
    assert body["iterations"][0]["m"] == 0
    assert len(body["u0"]) == 2
    assert -1.0 <= body["u0"][0] <= 1.0


def test_solve_is_mounted_under_api_prefix(client):
    response = client.post("/api/solve", json={**SMALL, "overrides": ["formulation=pessimistic"]})
    assert response.status_code == 200
    assert response.json()["formulation"] == "pessimistic"


@pytest.mark.parametrize(
    "payload",
    [
        {"overrides": ["nonsense=1"]},
        {"config": {"gamma": -1.0}},
        {"config": {"horizon": 2, "n_branch": 5}},
    ],
)
def test_invalid_config_returns_422(client, payload):
    response = client.post("/solve", json=payload)
    assert response.status_code == 422
    assert "detail" in response.json()


def test_malformed_body_returns_422(client):
    response = client.post("/solve", json={"overrides": "not-a-list"})
    assert response.status_code == 422


def test_simulate_zero_steps(client):
    payload = {"config": {**SMALL["config"], "steps": 0, "repeats": 2}}
    response = client.post("/simulate", json=payload)
    assert response.status_code == 200
    body = response.json()
    assert body["count"] == 2
    assert [run["seed"] for run in body["runs"]] == [0, 1]
    assert all(run["avte"] is None and not run["defined"] for run in body["runs"])


def test_verify_single_group(client):
    response = client.post("/verify", json={"only": ["tree"]})
    assert response.status_code == 200
    body = response.json()
    assert body["passed"] is True
    assert body["failed"] == []
    assert {check["group"] for check in body["checks"]} == {"tree"}


def test_verify_unknown_group(client):
    response = client.post("/verify", json={"only": ["nonsense"]})
    assert response.status_code == 422


def test_run_log_paging(client):
    client.post("/verify", json={"only": ["tree"]})
    client.post("/solve", json=SMALL)
    client.post("/verify", json={"only": ["probabilities"]})

    everything = client.get("/runs").json()
    assert everything["total"] == 3
    assert [entry["kind"] for entry in everything["entries"]] == ["verify", "solve", "verify"]

    page = client.get("/runs", params={"limit": 1, "offset": 1}).json()
    assert page["count"] == 1
    assert page["entries"][0]["kind"] == "solve"
    assert page["entries"][0]["config"]["horizon"] == 1

    verifies = client.get("/runs", params={"kind": "verify"}).json()
    assert verifies["total"] == 2
    assert verifies["entries"][0]["summary"]["groups"] == ["probabilities"]


def test_run_log_rejects_bad_paging(client):
    assert client.get("/runs", params={"limit": 0}).status_code == 422
    assert client.get("/runs", params={"offset": -1}).status_code == 422
