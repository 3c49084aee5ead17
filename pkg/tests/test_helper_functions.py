import pytest
import requests

from fedmesh import helper_functions
from fedmesh.helper_functions import format_loc, post_json_with_retry


class FakeResponse:
    def __init__(self, status_code):
        self.status_code = status_code
        self.text = f"status {status_code}"


@pytest.fixture
def answers(monkeypatch):
    """Replaces requests.post with a queue of canned answers and records every call."""
    queue = []
    calls = []

    def fake_post(url, **kwargs):
        calls.append(url)
        answer = queue.pop(0)
        if isinstance(answer, Exception):
            raise answer
        return FakeResponse(answer)

    monkeypatch.setattr(helper_functions.requests, "post", fake_post)
    return queue, calls


@pytest.mark.parametrize("status", [400, 404, 409])
def test_client_error_is_not_retried(answers, status):
    queue, calls = answers
    queue.extend([status, 200, 200])
    assert post_json_with_retry("http://node/metrics", {}, 2, "sent", "failed", delay=0) is None
    assert len(calls) == 1


def test_server_error_and_refused_connection_are_retried(answers):
    queue, calls = answers
    queue.extend([503, requests.ConnectionError("refused"), 200])
    response = post_json_with_retry("http://node/metrics", {}, 2, "sent", "failed", delay=0)
    assert response.status_code == 200
    assert len(calls) == 3


def test_retries_run_out(answers):
    queue, calls = answers
    queue.extend([500, 500])
    assert post_json_with_retry("http://node/summary", {}, 1, "sent", "failed", delay=0) is None
    assert len(calls) == 2


def test_format_loc():
    assert format_loc(("participants", 1, "peer_port")) == "participants[1].peer_port"
    assert format_loc(("topology", "hub_id")) == "topology.hub_id"
    assert format_loc(()) == ""
