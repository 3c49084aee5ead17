"""
Runs a whole scenario, controller plus N nodes, inside one process with
simulated telemetry. The default transport uses real loopback sockets and the
full HTTP/TCP stack; the memory transport skips sockets and HTTP for fast runs.
Both produce the same model trajectory for the same seeds.
"""

import csv
import io
import json
import logging
import threading
from dataclasses import dataclass, field

from . import constants
from .config_routing import ConfigServer
from .controller import (
    REPORTABLE,
    ControllerService,
    build_run_report,
    serve_ingest_endpoints,
)
from .dataset import load_scenario_data
from .errors import ConfigTimeoutError, DistributionError, SweepError
from .node import HttpReporter, LocalReporter, NodeServices, run_node
from .scenario import ParticipantSpec, TopologyKind, TopologySpec, with_overrides
from .telemetry import SimulatedResourceSource, TelemetryClock, TelemetrySampler, build_meter
from .transport import MemoryHub, MemoryTransport, PeerListener, TcpTransport

logger = logging.getLogger(__name__)

TRANSPORTS = ("tcp", "memory")
LOOPBACK = "127.0.0.1"


@dataclass(frozen=True)
class SimPlan:
    """
    One simulated run.

    Attributes:
        scenario (ScenarioConfig): What to run.
        time_compression (float): Telemetry clock speed-up, >= 1.
        transport (str): "tcp" for loopback sockets, "memory" for in-process hand-off.
        base_port (int): First loopback port (config k at base+2k, peer at
            base+2k+1); 0 binds free ports.
        label (str): Name used in sweep comparisons.
    """

    scenario: object
    time_compression: float = 1.0
    transport: str = "tcp"
    base_port: int = 0
    label: str = ""

    def __post_init__(self):
        if not self.time_compression >= 1.0:
            raise ValueError("time_compression must be >= 1")
        if self.transport not in TRANSPORTS:
            raise ValueError(f"transport must be one of {TRANSPORTS}")


@dataclass
class SimulationResult:
    record: object
    report: object
    node_summaries: dict = field(default_factory=dict)


def _sampler(cfg, node_id, clock):
    node_seed = cfg.node_seed(node_id)
    return TelemetrySampler(
        resources=SimulatedResourceSource(node_seed),
        meter=build_meter(cfg.power_meter, node_seed),
        clock=clock,
        interval_ms=cfg.power_meter.sample_interval_ms,
    )


def _run_memory(plan, service, data, clock, result):
    cfg = plan.scenario
    service.start()
    hub = MemoryHub(cfg.n_nodes, cfg.rounds)
    transport = MemoryTransport(hub)
    reporter = LocalReporter(service)
    threads = []
    for participant in cfg.participants:
        services = NodeServices(
            transport=transport,
            sampler=_sampler(cfg, participant.node_id, clock),
            reporter=reporter,
            data=data,
        )
        thread = threading.Thread(
            target=_node_thread,
            args=(cfg, participant.node_id, services, result),
            name=f"sim-node-{participant.node_id}",
            daemon=True,
        )
        threads.append(thread)
    for thread in threads:
        thread.start()
    for thread in threads:
        thread.join()


def _node_thread(cfg, node_id, services, result):
    summary = run_node(cfg, node_id, services)
    result.node_summaries[node_id] = summary


def _loopback_participants(plan, ingest_endpoint):
    """Binds a config server and a peer listener per node; returns them with the rewritten participants."""
    cfg = plan.scenario
    servers, listeners, participants = {}, {}, []
    for participant in sorted(cfg.participants, key=lambda p: p.node_id):
        k = participant.node_id
        config_port = plan.base_port + 2 * k if plan.base_port else 0
        peer_port = plan.base_port + 2 * k + 1 if plan.base_port else 0
        servers[k] = ConfigServer(LOOPBACK, config_port, idle_timeout_s=cfg.connect_timeout_s)
        listeners[k] = PeerListener(LOOPBACK, peer_port)
        participants.append(
            ParticipantSpec(
                node_id=k,
                host=LOOPBACK,
                config_port=servers[k].port,
                peer_port=listeners[k].port,
                metrics_endpoint=ingest_endpoint,
            )
        )
    return servers, listeners, tuple(participants)


def _tcp_node_thread(server, listener, data, clock, result):
    try:
        assignment = server.serve()
    except ConfigTimeoutError as e:
        logger.error("simulated node never configured port=%d error=%s", server.port, e)
        listener.close()
        return
    if assignment is None:
        listener.close()
        return
    cfg = assignment.scenario
    node_id = assignment.node_id
    directory = {p.node_id: (p.host, p.peer_port) for p in cfg.participants}
    services = NodeServices(
        transport=TcpTransport(directory, listener, rounds=cfg.rounds),
        sampler=_sampler(cfg, node_id, clock),
        reporter=HttpReporter(cfg.participant(node_id).metrics_endpoint),
        data=data,
    )
    result.node_summaries[node_id] = run_node(cfg, node_id, services)


def _run_tcp(plan, service, data, clock, result):
    ingest = None
    try:
        # the ingest service has to exist before the scenario knows its URL
        ingest = serve_ingest_endpoints((LOOPBACK, 0), service)
        servers, listeners, participants = _loopback_participants(plan, ingest.endpoint)
        service.run.scenario = with_overrides(plan.scenario, participants=participants)

        threads = [
            threading.Thread(
                target=_tcp_node_thread,
                args=(servers[k], listeners[k], data, clock, result),
                name=f"sim-node-{k}",
                daemon=True,
            )
            for k in sorted(servers)
        ]
        for thread in threads:
            thread.start()
        try:
            service.distribute()
        except DistributionError as e:
            logger.error("simulation aborted error=%s", e)
            for server in servers.values():
                server.stop()
        for thread in threads:
            thread.join()
    finally:
        if ingest is not None:
            ingest.shutdown()


def run_simulation(plan):
    """
    Runs `plan` to completion and returns a SimulationResult whose `record`
    is the controller's RunRecord and `report` its RunReport (None when the
    run was aborted before any node trained).
    """
    cfg = plan.scenario
    logger.info(
        "simulation start scenario=%s nodes=%d topology=%s transport=%s compression=%s",
        cfg.scenario_name,
        cfg.n_nodes,
        cfg.topology.kind.value,
        plan.transport,
        plan.time_compression,
    )
    data = load_scenario_data(cfg)
    clock = TelemetryClock(plan.time_compression)
    result = SimulationResult(record=None, report=None)
    service = ControllerService(cfg)
    if plan.transport == "memory":
        _run_memory(plan, service, data, clock, result)
    else:
        _run_tcp(plan, service, data, clock, result)
    if not service.wait(timeout=constants.HTTP_TIMEOUT_S):
        service.expire()
    record = service.snapshot()
    result.record = record
    if record.status in REPORTABLE:
        result.report = build_run_report(record)
    logger.info("simulation done scenario=%s status=%s", cfg.scenario_name, record.status.value)
    return result


# Sweeps


def topology_variant(cfg, kind, seed):
    """`cfg` with topology `kind`, the topology seed and master seed set to `seed`."""
    kind = TopologyKind(kind)
    current = cfg.topology
    topology = TopologySpec(
        kind=kind,
        edge_probability=(
            (current.edge_probability or constants.DEFAULT_EDGE_PROBABILITY)
            if kind is TopologyKind.RANDOM
            else None
        ),
        hub_id=(current.hub_id or 0) if kind is TopologyKind.STAR else None,
        seed=seed,
    )
    return with_overrides(cfg, topology=topology, master_seed=seed)


def sweep_plans(cfg, seeds=None, topologies=None, time_compression=1.0, transport="tcp"):
    """Cartesian product of topologies and seeds as SimPlans."""
    seeds = list(seeds) if seeds else [cfg.master_seed]
    kinds = [TopologyKind(k) for k in topologies] if topologies else [cfg.topology.kind]
    plans = []
    for kind in kinds:
        for seed in seeds:
            plans.append(
                SimPlan(
                    scenario=topology_variant(cfg, kind, seed),
                    time_compression=time_compression,
                    transport=transport,
                    label=f"{kind.value}-seed{seed}",
                )
            )
    return plans


@dataclass(frozen=True)
class SweepRow:
    label: str
    topology: str
    runs: int
    mean_f1: float
    mean_traffic_mb: float
    mean_energy_j: float

    def to_dict(self):
        return {
            "label": self.label,
            "topology": self.topology,
            "runs": self.runs,
            "mean_f1": self.mean_f1,
            "mean_traffic_mb": self.mean_traffic_mb,
            "mean_energy_j": self.mean_energy_j,
        }


@dataclass
class SweepResult:
    """Per-plan results plus comparison rows ordered by mean F1, best first."""

    results: list
    plan_rows: list
    topology_rows: list


def _mean(values):
    values = list(values)
    return sum(values) / len(values) if values else 0.0


def _plan_row(plan, result):
    report = result.report
    rows = report.rows if report is not None else ()
    return SweepRow(
        label=plan.label or plan.scenario.scenario_name,
        topology=plan.scenario.topology.kind.value,
        runs=1,
        mean_f1=round(_mean(r.avg_f1 for r in rows), 4),
        mean_traffic_mb=round(_mean(r.net_traffic_mb for r in rows), 1),
        mean_energy_j=round(_mean(r.energy_j for r in rows), 1),
    )


def sweep(plans):
    """Runs every plan; all plans must share dataset and model."""
    if not plans:
        raise SweepError("a sweep needs at least one plan")
    first = plans[0].scenario
    for plan in plans[1:]:
        if plan.scenario.dataset != first.dataset:
            raise SweepError(f"plan {plan.label or '?'} uses a different dataset")
        if plan.scenario.model != first.model:
            raise SweepError(f"plan {plan.label or '?'} uses a different model")

    results = [run_simulation(plan) for plan in plans]
    plan_rows = [_plan_row(plan, result) for plan, result in zip(plans, results)]

    by_topology = {}
    for row in plan_rows:
        by_topology.setdefault(row.topology, []).append(row)
    topology_rows = [
        SweepRow(
            label=topology,
            topology=topology,
            runs=len(rows),
            mean_f1=round(_mean(r.mean_f1 for r in rows), 4),
            mean_traffic_mb=round(_mean(r.mean_traffic_mb for r in rows), 1),
            mean_energy_j=round(_mean(r.mean_energy_j for r in rows), 1),
        )
        for topology, rows in by_topology.items()
    ]
    return SweepResult(
        results=results,
        plan_rows=sorted(plan_rows, key=lambda r: (-r.mean_f1, r.label)),
        topology_rows=sorted(topology_rows, key=lambda r: (-r.mean_f1, r.label)),
    )


def render_sweep(result, fmt):
    """The cross-plan comparison as csv, markdown (md) or json."""
    columns = ["label", "topology", "runs", "mean_f1", "mean_traffic_mb", "mean_energy_j"]
    if fmt == "json":
        return json.dumps(
            {
                "plans": [r.to_dict() for r in result.plan_rows],
                "topologies": [r.to_dict() for r in result.topology_rows],
            },
            indent=2,
        ) + "\n"

    def cells(row):
        return [
            row.label,
            row.topology,
            str(row.runs),
            f"{row.mean_f1:.4f}",
            f"{row.mean_traffic_mb:.1f}",
            f"{row.mean_energy_j:.1f}",
        ]

    if fmt == "csv":
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(["section", *columns])
        writer.writerows(["plan", *cells(r)] for r in result.plan_rows)
        writer.writerows(["topology", *cells(r)] for r in result.topology_rows)
        return buffer.getvalue()
    if fmt in ("markdown", "md"):
        header = "| " + " | ".join(columns) + " |"
        rule = "|" + "|".join(["---"] * 2 + ["---:"] * 4) + "|"
        out = ["# Sweep comparison", "", "## By topology", "", header, rule]
        out += ["| " + " | ".join(cells(r)) + " |" for r in result.topology_rows]
        out += ["", "## By plan", "", header, rule]
        out += ["| " + " | ".join(cells(r)) + " |" for r in result.plan_rows]
        return "\n".join(out) + "\n"
    raise ValueError(f"unknown report format '{fmt}'")
