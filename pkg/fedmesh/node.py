"""
The participant runtime: receive a config, connect to neighbors, run
synchronous rounds of local training, model exchange and FedAvg aggregation,
report telemetry while doing so, and deliver the final summary.

Threads per node: the training thread running NodeRuntime.run, one reader
thread per TCP neighbor feeding the Inbox, and the telemetry scheduler that
samples resources and posts metric reports.
"""

import itertools
import logging
import threading
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import constants
from .dataset import load_scenario_data, partition_iid
from .errors import FedmeshError, IllegalTransitionError, IncompatibleArchitectureError
from .mlp import deserialize_params, evaluate, init_model, payload_size, serialize_params, train_epochs
from .models import MetricReport, NodeSummary
from .protocol import model_frame_size, post_metrics, post_summary
from .scenario import AggregationWeights
from .telemetry import TRAINING_PHASE, integrate_energy
from .topology import build_topology, neighbors

logger = logging.getLogger(__name__)


class NodePhase(str, Enum):
    IDLE = "IDLE"
    CONFIGURED = "CONFIGURED"
    CONNECTING = "CONNECTING"
    TRAINING = "TRAINING"
    EXCHANGING = "EXCHANGING"
    AGGREGATING = "AGGREGATING"
    REPORTING = "REPORTING"
    DONE = "DONE"
    FAILED = "FAILED"


_TRANSITIONS = {
    NodePhase.IDLE: {NodePhase.CONFIGURED},
    NodePhase.CONFIGURED: {NodePhase.CONNECTING},
    NodePhase.CONNECTING: {NodePhase.TRAINING},
    NodePhase.TRAINING: {NodePhase.EXCHANGING},
    NodePhase.EXCHANGING: {NodePhase.AGGREGATING},
    NodePhase.AGGREGATING: {NodePhase.TRAINING, NodePhase.REPORTING},
    NodePhase.REPORTING: {NodePhase.DONE},
    NodePhase.DONE: set(),
    NodePhase.FAILED: set(),
}


class NodeState:
    """
    Phase machine of one node. Every transition is appended to `history` as
    (phase, round); `barrier_log` records, per aggregation, the round and the
    neighbor ids whose models were in hand.
    """

    def __init__(self, node_id):
        self.node_id = node_id
        self.phase = NodePhase.IDLE
        self.round = 0
        self.params = None
        self.history = [(NodePhase.IDLE, 0)]
        self.barrier_log = []
        self.diagnostic = None
        self._lock = threading.Lock()

    def transition(self, phase):
        with self._lock:
            if phase is not NodePhase.FAILED and phase not in _TRANSITIONS[self.phase]:
                raise IllegalTransitionError(
                    f"node {self.node_id}: {self.phase.value} -> {phase.value} is not allowed"
                )
            if self.phase in (NodePhase.DONE, NodePhase.FAILED):
                raise IllegalTransitionError(
                    f"node {self.node_id} already finished in {self.phase.value}"
                )
            self.phase = phase
            self.history.append((phase, self.round))
        logger.debug("phase node=%d phase=%s round=%d", self.node_id, phase.value, self.round)

    def fail(self, diagnostic):
        self.diagnostic = diagnostic
        if self.phase not in (NodePhase.DONE, NodePhase.FAILED):
            self.transition(NodePhase.FAILED)


@dataclass(frozen=True)
class RoundOutcome:
    round: int
    f1_after_aggregate: float
    mean_loss: float
    bytes_sent_round: int
    bytes_recv_round: int
    digest: str = ""


def fedavg(models, weights):
    """
    Weighted element-wise mean of `models`, summed in list order with an
    explicit loop so equal inputs in equal order give bit-identical output.
    """
    if len(models) != len(weights):
        raise ValueError(f"{len(models)} models but {len(weights)} weights")
    if not models:
        raise ValueError("nothing to aggregate")
    digest = models[0].arch_digest
    for model in models[1:]:
        if model.arch_digest != digest:
            raise IncompatibleArchitectureError(
                f"cannot average digest {model.arch_digest:016x} with {digest:016x}"
            )
    if any(w < 0 for w in weights):
        raise ValueError("aggregation weights must be non-negative")
    total = float(sum(weights))
    if total <= 0.0:
        raise ValueError("aggregation weights sum to zero")
    acc = np.zeros_like(models[0].values)
    for model, weight in zip(models, weights):
        acc += (weight / total) * model.values
    return models[0].with_values(acc)


def aggregate(own, received, weights):
    """FedAvg over `own` followed by `received`; `weights` covers both, own first."""
    if len(weights) != 1 + len(received):
        raise ValueError(f"expected {1 + len(received)} weights, got {len(weights)}")
    return fedavg([own, *received], weights)


def exchange_round(params, round_index, peers, timeout_s=constants.DEFAULT_NEIGHBOR_TIMEOUT_S):
    """
    Sends `params` to every neighbor and blocks until each neighbor's model
    for `round_index` arrived. Returns {neighbor_id: ModelParams}.
    """
    peers.send_model(round_index, serialize_params(params))
    payloads = peers.inbox.take_round(round_index, peers.neighbor_ids, timeout_s)
    return {
        neighbor: deserialize_params(payload, params.arch)
        for neighbor, payload in payloads.items()
    }


# Metric reporting


class HttpReporter:
    """Posts telemetry to a controller's ingest endpoint."""

    def __init__(self, endpoint):
        self.endpoint = endpoint

    def post_metrics(self, report):
        return post_metrics(self.endpoint, report)

    def post_summary(self, summary):
        return post_summary(self.endpoint, summary)


class LocalReporter:
    """Hands telemetry straight to an in-process controller service."""

    def __init__(self, service):
        self.service = service

    def post_metrics(self, report):
        return self._deliver(report)

    def post_summary(self, summary):
        return self._deliver(summary)

    def _deliver(self, message):
        try:
            self.service.ingest(message)
            return True
        except FedmeshError as e:
            logger.warning("local ingest rejected node=%d error=%s", message.node_id, e)
            return False


@dataclass
class NodeServices:
    """
    What a node needs from its surroundings.

    Attributes:
        transport: Has connect(node_id, neighbor_ids, connect_timeout_s) -> PeerGroup.
        sampler (TelemetrySampler): Resource and power sampling.
        reporter: Has post_metrics(report) and post_summary(summary), both -> bool.
        data (tuple | None): Pre-loaded (train, test) datasets; loaded from the
            scenario when absent.
    """

    transport: object
    sampler: object
    reporter: object
    data: tuple = None
    outcomes: list = field(default_factory=list)


class NodeRuntime:
    def __init__(self, cfg, node_id, services):
        self.cfg = cfg
        self.node_id = node_id
        self.services = services
        self.state = NodeState(node_id)
        self.outcomes = services.outcomes
        self.peers = None
        self.dropped_reports = 0
        self._seq = itertools.count()
        self._report_lock = threading.Lock()
        self._last_report_ms = -1

    # Telemetry

    def _traffic(self):
        if self.peers is None:
            return 0, 0
        counters = self.peers.counters.snapshot()
        return counters["model_sent"], counters["model_recv"]

    def emit_metrics(self):
        """One MetricReport from the latest sample; counted as dropped if not acknowledged."""
        sampler = self.services.sampler
        resource, power = sampler.latest()
        if resource is None:
            resource, power = sampler.sample_once()
        sent, received = self._traffic()
        with self._report_lock:
            timestamp = max(sampler.clock.now_ms(), self._last_report_ms)
            self._last_report_ms = timestamp
            report = MetricReport(
                node_id=self.node_id,
                seq=next(self._seq),
                timestamp_ms=timestamp,
                round=self.state.round,
                cpu_pct=resource.cpu_pct,
                ram_pct=resource.ram_pct,
                bytes_sent=sent,
                bytes_recv=received,
                power_w=None if power is None else power.power_w,
                phase=self.state.phase.value,
            )
        if not self.services.reporter.post_metrics(report):
            self.dropped_reports += 1

    def _set_phase(self, phase):
        self.state.transition(phase)
        self.services.sampler.set_phase(TRAINING_PHASE if phase is NodePhase.TRAINING else "idle")

    # Rounds

    def _aggregation_weights(self, shard_sizes, ids):
        if self.cfg.aggregation_weights is AggregationWeights.SAMPLES:
            return [float(shard_sizes[k]) for k in ids]
        return [1.0] * len(ids)

    def run(self):
        cfg = self.cfg
        sampler = self.services.sampler
        started_ms = sampler.clock.now_ms()
        self.state.transition(NodePhase.CONFIGURED)
        try:
            train, test = self.services.data or load_scenario_data(cfg)
            partition = partition_iid(len(train), cfg.n_nodes, cfg.master_seed)
            shard = train.subset(partition.shards[self.node_id])
            shard_sizes = partition.sizes()
            graph = build_topology(cfg.topology, cfg.n_nodes)
            neighbor_ids = neighbors(graph, self.node_id)
            params = init_model(cfg.model, cfg.master_seed)
            self.state.params = params
            logger.info(
                "node configured node=%d shard=%d neighbors=%s params=%d",
                self.node_id,
                len(shard),
                neighbor_ids,
                cfg.model.param_count(),
            )

            sampler.every(cfg.metric_interval_ms, self.emit_metrics, "metric_report")
            sampler.start()

            self.state.transition(NodePhase.CONNECTING)
            self.peers = self.services.transport.connect(
                self.node_id, neighbor_ids, cfg.connect_timeout_s
            )
            node_seed = cfg.node_seed(self.node_id)
            for round_index in range(cfg.rounds):
                self.state.round = round_index
                before_sent, before_recv = self._traffic()

                self._set_phase(NodePhase.TRAINING)
                params, report = train_epochs(
                    params,
                    shard,
                    cfg.local_epochs,
                    cfg.learning_rate,
                    cfg.batch_size,
                    (node_seed + round_index) & constants.MASK64,
                )

                self._set_phase(NodePhase.EXCHANGING)
                received = exchange_round(params, round_index, self.peers, cfg.neighbor_timeout_s)

                self._set_phase(NodePhase.AGGREGATING)
                self.state.barrier_log.append((round_index, sorted(received)))
                ids = sorted([self.node_id, *received])
                models = [params if k == self.node_id else received[k] for k in ids]
                params = fedavg(models, self._aggregation_weights(shard_sizes, ids))
                self.state.params = params

                f1, _ = evaluate(params, test)
                after_sent, after_recv = self._traffic()
                outcome = RoundOutcome(
                    round=round_index,
                    f1_after_aggregate=f1,
                    mean_loss=report.mean_loss,
                    bytes_sent_round=after_sent - before_sent,
                    bytes_recv_round=after_recv - before_recv,
                    digest=params.digest(),
                )
                self.outcomes.append(outcome)
                logger.info(
                    "round done node=%d round=%d f1=%.4f loss=%.4f",
                    self.node_id,
                    round_index,
                    f1,
                    report.mean_loss,
                )

            self._set_phase(NodePhase.REPORTING)
            self.peers.close(cfg.neighbor_timeout_s)
            sampler.stop()
            summary = self._summary(started_ms, NodePhase.DONE.value)
            if not self.services.reporter.post_summary(summary):
                logger.error("summary undeliverable node=%d", self.node_id)
            self.state.transition(NodePhase.DONE)
            return summary
        except Exception as e:
            return self._fail(started_ms, e)

    def _fail(self, started_ms, error):
        diagnostic = f"{self.state.phase.value} round {self.state.round}: {error}"
        logger.error("node failed node=%d diagnostic=%s", self.node_id, diagnostic)
        self.state.fail(diagnostic)
        if self.peers is not None:
            try:
                self.peers.close(timeout_s=1.0)
            except Exception as close_error:
                logger.debug("peer close after failure node=%d error=%s", self.node_id, close_error)
        try:
            self.services.sampler.stop()
        except Exception as stop_error:
            logger.debug("sampler stop after failure node=%d error=%s", self.node_id, stop_error)
        summary = self._summary(started_ms, NodePhase.FAILED.value, diagnostic)
        self.services.reporter.post_summary(summary)
        return summary

    def _summary(self, started_ms, phase, diagnostic=None):
        sampler = self.services.sampler
        power_log = sampler.power_log()
        avg_cpu, avg_ram = sampler.averages()
        sent, received = self._traffic()
        ended_ms = power_log[-1].timestamp_ms if power_log else sampler.clock.now_ms()
        f1_per_round = tuple(outcome.f1_after_aggregate for outcome in self.outcomes)
        return NodeSummary(
            node_id=self.node_id,
            phase=phase,
            diagnostic=diagnostic,
            f1_final=f1_per_round[-1] if f1_per_round else 0.0,
            f1_per_round=f1_per_round,
            loss_per_round=tuple(outcome.mean_loss for outcome in self.outcomes),
            round_digests=tuple(outcome.digest for outcome in self.outcomes),
            energy_j=integrate_energy(power_log),
            avg_power_w=float(np.mean([s.power_w for s in power_log])) if power_log else 0.0,
            avg_cpu_pct=avg_cpu,
            avg_ram_pct=avg_ram,
            total_bytes_sent=sent,
            total_bytes_recv=received,
            duration_s=max(ended_ms - started_ms, 0) / 1000.0,
            dropped_reports=self.dropped_reports,
            power_log=power_log,
        )


def run_node(cfg, my_id, services):
    """Runs one participant to completion; returns its NodeSummary (DONE or FAILED)."""
    if my_id not in {p.node_id for p in cfg.participants}:
        raise FedmeshError(f"node {my_id} is not a participant of {cfg.scenario_name}")
    return NodeRuntime(cfg, my_id, services).run()


def expected_model_traffic(cfg, degree):
    """Closed-form model bytes one node sends over a run."""
    return cfg.rounds * degree * model_frame_size(payload_size(cfg.model))
