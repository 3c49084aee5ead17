import socket
import threading

import numpy as np
import pytest

from conftest import synthetic_document
from fedmesh.errors import (
    IllegalTransitionError,
    IncompatibleArchitectureError,
    NeighborTimeoutError,
    ProtocolError,
)
from fedmesh.mlp import init_model, serialize_params
from fedmesh.node import (
    NodePhase,
    NodeServices,
    NodeState,
    aggregate,
    exchange_round,
    expected_model_traffic,
    fedavg,
    run_node,
)
from fedmesh.scenario import ModelSpec, scenario_from_dict
from fedmesh.telemetry import NullMeter, SimulatedResourceSource, TelemetryClock, TelemetrySampler
from fedmesh.transport import Inbox, MemoryHub, MemoryTransport, PeerListener, TcpTransport


class RecordingReporter:
    def __init__(self):
        self.metrics = []
        self.summaries = []

    def post_metrics(self, report):
        self.metrics.append(report)
        return True

    def post_summary(self, summary):
        self.summaries.append(summary)
        return True


def services_for(transport, node_id, reporter=None):
    return NodeServices(
        transport=transport,
        sampler=TelemetrySampler(
            resources=SimulatedResourceSource(seed=node_id),
            meter=NullMeter(),
            clock=TelemetryClock(compression=50.0),
            interval_ms=1000,
        ),
        reporter=reporter or RecordingReporter(),
    )


def constant_model(arch, value):
    return init_model(arch, 0).with_values(np.full(arch.param_count(), float(value)))


def test_fedavg_of_identical_models_is_unchanged(small_arch):
    model = init_model(small_arch, 3)
    out = fedavg([model, model, model], [1.0, 1.0, 1.0])
    assert np.allclose(out.values, model.values, rtol=0, atol=1e-15)


def test_fedavg_equal_weights(small_arch):
    out = aggregate(constant_model(small_arch, 0), [constant_model(small_arch, 2)], [1.0, 1.0])
    assert np.all(out.values == 1.0)


def test_fedavg_unequal_weights(small_arch):
    out = aggregate(constant_model(small_arch, 0), [constant_model(small_arch, 4)], [1.0, 3.0])
    assert np.all(out.values == 3.0)


def test_fedavg_matches_naive_mean(small_arch):
    rng = np.random.default_rng(5)
    template = init_model(small_arch, 0)
    for _ in range(1000):
        n_models = 1 + int(rng.integers(1, 6))
        vectors = [rng.normal(scale=3.0, size=small_arch.param_count()) for _ in range(n_models)]
        weights = [float(w) for w in rng.uniform(0.5, 2.0, size=n_models)]
        out = fedavg([template.with_values(v) for v in vectors], weights)
        naive = np.zeros(small_arch.param_count())
        for k in range(small_arch.param_count()):
            for vector, weight in zip(vectors, weights):
                naive[k] += weight * vector[k]
            naive[k] /= sum(weights)
        assert np.max(np.abs(out.values - naive)) <= 1e-12


def test_fedavg_rejects_mixed_architectures(small_arch):
    other = ModelSpec(input_dim=10, hidden_dims=(6,), output_dim=3)
    with pytest.raises(IncompatibleArchitectureError):
        fedavg([init_model(small_arch, 0), init_model(other, 0)], [1.0, 1.0])


def test_fedavg_rejects_zero_weights(small_arch):
    with pytest.raises(ValueError):
        fedavg([init_model(small_arch, 0)], [0.0])


def test_aggregate_with_no_neighbors_is_identity(small_arch):
    model = init_model(small_arch, 2)
    assert aggregate(model, [], [1.0]).values.tobytes() == model.values.tobytes()


def test_inbox_buffers_future_rounds():
    inbox = Inbox(rounds=5)
    inbox.put(1, 2, b"later")
    inbox.put(0, 2, b"now")
    assert inbox.buffered_rounds() == [0, 1]
    assert inbox.take_round(0, [2], timeout_s=1) == {2: b"now"}
    assert inbox.take_round(1, [2], timeout_s=1) == {2: b"later"}


def test_inbox_stale_model_is_a_protocol_error():
    inbox = Inbox(rounds=5)
    inbox.put(0, 1, b"a")
    inbox.take_round(0, [1], timeout_s=1)
    inbox.put(0, 1, b"again")
    with pytest.raises(ProtocolError):
        inbox.take_round(1, [1], timeout_s=1)


def test_inbox_beyond_last_round_is_a_protocol_error():
    inbox = Inbox(rounds=2)
    inbox.put(2, 1, b"x")
    with pytest.raises(ProtocolError):
        inbox.take_round(0, [1], timeout_s=1)


def test_inbox_timeout_names_missing_neighbors():
    inbox = Inbox()
    inbox.put(0, 1, b"x")
    with pytest.raises(NeighborTimeoutError) as excinfo:
        inbox.take_round(0, [1, 3], timeout_s=0.1)
    assert excinfo.value.missing == [3]
    assert "node 3" in str(excinfo.value)


def test_exchange_over_memory_hub_is_bit_exact(small_arch):
    hub = MemoryHub(2, rounds=1)
    transport = MemoryTransport(hub)
    peers = {k: transport.connect(k, [1 - k]) for k in (0, 1)}
    models = {k: init_model(small_arch, 10 + k) for k in (0, 1)}
    peers[1].send_model(0, serialize_params(models[1]))
    received = exchange_round(models[0], 0, peers[0], timeout_s=1)
    assert list(received) == [1]
    assert received[1].values.tobytes() == models[1].values.tobytes()


def test_send_reaches_every_neighbor(small_arch):
    hub = MemoryHub(4)
    peers = MemoryTransport(hub).connect(0, [1, 2, 3])
    written = peers.send_model(0, serialize_params(init_model(small_arch, 0)))
    assert written == 3 * (11 + 12 + 8 * small_arch.param_count())
    for k in (1, 2, 3):
        assert hub.inboxes[k].buffered_rounds() == [0]
        assert hub.counters[k].snapshot()["model_recv"] == written // 3


def test_illegal_transition():
    state = NodeState(0)
    state.transition(NodePhase.CONFIGURED)
    with pytest.raises(IllegalTransitionError):
        state.transition(NodePhase.TRAINING)


def test_any_phase_may_fail_but_not_twice():
    state = NodeState(0)
    state.transition(NodePhase.CONFIGURED)
    state.fail("boom")
    assert state.phase is NodePhase.FAILED
    with pytest.raises(IllegalTransitionError):
        state.transition(NodePhase.CONNECTING)


def test_single_node_trains_locally():
    cfg = scenario_from_dict(synthetic_document(n=1, rounds=2))
    reporter = RecordingReporter()
    summary = run_node(cfg, 0, services_for(MemoryTransport(MemoryHub(1, 2)), 0, reporter))
    assert summary.phase == "DONE"
    assert len(summary.f1_per_round) == 2
    assert summary.total_bytes_sent == 0
    assert reporter.summaries == [summary]


def run_pair(cfg, transport_for):
    summaries = {}

    def target(k):
        summaries[k] = run_node(cfg, k, services_for(transport_for(k), k))

    threads = [threading.Thread(target=target, args=(k,)) for k in range(cfg.n_nodes)]
    for thread in threads:
        thread.start()
    for thread in threads:
        thread.join(timeout=120)
    return summaries


def test_two_nodes_agree_after_every_round(make_scenario):
    cfg = make_scenario(n=2, kind="fully", rounds=3)
    hub = MemoryHub(2, cfg.rounds)
    summaries = run_pair(cfg, lambda k: MemoryTransport(hub))
    assert all(s.phase == "DONE" for s in summaries.values())
    assert summaries[0].round_digests == summaries[1].round_digests
    expected = expected_model_traffic(cfg, degree=1)
    assert summaries[0].total_bytes_sent == summaries[1].total_bytes_recv == expected


def test_tcp_pair_matches_memory_pair(make_scenario):
    cfg = make_scenario(n=2, kind="fully", rounds=2)
    listeners = {k: PeerListener("127.0.0.1", 0) for k in range(2)}
    directory = {k: ("127.0.0.1", listeners[k].port) for k in range(2)}
    over_tcp = run_pair(cfg, lambda k: TcpTransport(directory, listeners[k], rounds=cfg.rounds))
    hub = MemoryHub(2, cfg.rounds)
    in_memory = run_pair(cfg, lambda k: MemoryTransport(hub))
    for k in range(2):
        assert over_tcp[k].phase == "DONE"
        assert over_tcp[k].round_digests == in_memory[k].round_digests
        assert over_tcp[k].total_bytes_sent == in_memory[k].total_bytes_sent


def test_failed_tcp_connect_releases_the_listener(free_port):
    listener = PeerListener("127.0.0.1", 0)
    transport = TcpTransport({1: ("127.0.0.1", free_port)}, listener, rounds=1)
    with pytest.raises(NeighborTimeoutError):
        transport.connect(0, [1], connect_timeout_s=0.3)
    assert listener.sock.fileno() == -1
    with pytest.raises(OSError):
        socket.create_connection(("127.0.0.1", listener.port), timeout=0.5)


def test_missing_neighbor_fails_the_node(make_scenario):
    cfg = make_scenario(n=2, kind="fully", rounds=1, neighbor_timeout_s=0.5)
    reporter = RecordingReporter()
    summary = run_node(cfg, 0, services_for(MemoryTransport(MemoryHub(2, 1)), 0, reporter))
    assert summary.phase == "FAILED"
    assert "EXCHANGING" in summary.diagnostic
    assert "node 1" in summary.diagnostic
    assert reporter.summaries[-1].failed
