import json
import socket
import threading

import pytest
import requests

from conftest import synthetic_document
from fedmesh import create_node_app
from fedmesh.config_routing import ConfigServer, ConfigSlot, serve_config_once
from fedmesh.errors import ConfigTimeoutError


@pytest.fixture
def client():
    slot = ConfigSlot()
    slot.port = 7102
    app = create_node_app(slot)
    app.config["TESTING"] = True
    with app.test_client() as test_client:
        test_client.slot = slot
        yield test_client


def test_valid_config_is_accepted_once(client):
    response = client.post("/config", data=json.dumps(synthetic_document()))
    assert response.status_code == 200
    assert response.get_json() == {"status": "ok", "node_id": 2}
    assert client.slot.assignment.node_seed == 1 ^ 3

    again = client.post("/config", data=json.dumps(synthetic_document()))
    assert again.status_code == 409


def test_explicit_node_id_wins_over_port(client):
    document = synthetic_document()
    document["node_id"] = 3
    response = client.post("/config", data=json.dumps(document))
    assert response.get_json()["node_id"] == 3


def test_invalid_config_lists_violations(client):
    response = client.post("/config", data=json.dumps(synthetic_document(rounds=0)))
    assert response.status_code == 400
    assert [v["path"] for v in response.get_json()["violations"]] == ["rounds"]
    assert not client.slot.filled


def test_malformed_json_reports_position(client):
    response = client.post("/config", data='{"scenario_name": ')
    assert response.status_code == 400
    assert response.get_json()["position"] is not None


def test_wrong_path_and_method(client):
    assert client.post("/wrong", data="{}").status_code == 404
    assert client.get("/config").status_code == 405


def test_health_reports_waiting_then_configured(client):
    waiting = client.get("/health")
    assert waiting.status_code == 200
    assert waiting.get_json() == {"status": "waiting", "port": 7102}
    client.post("/config", data=json.dumps(synthetic_document()))
    assert client.get("/health").status_code == 409


def test_server_stops_after_config_and_releases_port(free_port):
    server = ConfigServer("127.0.0.1", free_port, idle_timeout_s=10)
    result = {}
    thread = threading.Thread(target=lambda: result.setdefault("assignment", server.serve()))
    thread.start()

    base = f"http://127.0.0.1:{free_port}"
    assert requests.post(f"{base}/wrong", data="{}", timeout=5).status_code == 404
    bad = requests.post(f"{base}/config", data=json.dumps(synthetic_document(rounds=0)), timeout=5)
    assert bad.status_code == 400
    document = synthetic_document()
    document["node_id"] = 1
    assert requests.post(f"{base}/config", data=json.dumps(document), timeout=5).status_code == 200

    thread.join(timeout=10)
    assert not thread.is_alive()
    assert result["assignment"].node_id == 1

    with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as sock:
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        sock.bind(("127.0.0.1", free_port))
        sock.listen()


def test_idle_server_times_out(free_port):
    with pytest.raises(ConfigTimeoutError):
        serve_config_once("127.0.0.1", free_port, idle_timeout_s=0.3)


def test_stopped_server_returns_nothing(free_port):
    server = ConfigServer("127.0.0.1", free_port, idle_timeout_s=10)
    server.stop()
    assert server.serve() is None
