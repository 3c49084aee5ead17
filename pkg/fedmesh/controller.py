"""
This module orchestrates a run: distributes per-node configs, ingests metric
reports and node summaries into one RunRecord, decides completion, and
renders the per-node results table (F1, CPU, RAM, traffic, power, energy).
"""

import contextlib
import csv
import io
import json
import logging
import os
import threading
import time
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from enum import Enum
from typing import Optional

import requests
from werkzeug.serving import make_server

from . import constants, create_controller_app
from .errors import (
    DistributionError,
    NotReadyError,
    RecordError,
    RunStateError,
    ScenarioError,
    TelemetryError,
    UnknownNodeError,
)
from .helper_functions import parse_bind, write_json, write_text
from .models import MetricReport, NodeSummary
from .scenario import assignment_body, scenario_from_dict, scenario_to_dict
from .telemetry import integrate_energy, write_power_log

logger = logging.getLogger(__name__)


class RunStatus(str, Enum):
    PENDING = "PENDING"
    RUNNING = "RUNNING"
    COMPLETE = "COMPLETE"
    PARTIAL_FAILURE = "PARTIAL_FAILURE"
    ABORTED = "ABORTED"


TERMINAL = {RunStatus.COMPLETE, RunStatus.PARTIAL_FAILURE, RunStatus.ABORTED}
REPORTABLE = {RunStatus.COMPLETE, RunStatus.PARTIAL_FAILURE}


@dataclass
class RunRecord:
    """
    Everything the controller knows about one run.

    Attributes:
        scenario (ScenarioConfig): The distributed scenario.
        reports (dict[int, list[MetricReport]]): Per node, ordered by seq, no duplicates.
        summaries (dict[int, NodeSummary]): At most one per node.
        status (RunStatus): Lifecycle state.
        warnings (list[str]): Integrity and deadline notes.
        rejected (int): Messages refused for unknown nodes or a non-running run.
        duplicates (int): Messages ignored because they were already recorded.
        acks (dict[int, dict]): Config server answers from distribution.
    """

    scenario: object
    reports: dict = field(default_factory=dict)
    summaries: dict = field(default_factory=dict)
    status: RunStatus = RunStatus.PENDING
    started_at: Optional[float] = None
    finished_at: Optional[float] = None
    warnings: list = field(default_factory=list)
    rejected: int = 0
    duplicates: int = 0
    acks: dict = field(default_factory=dict)
    _seqs: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    @property
    def participant_ids(self):
        return sorted(p.node_id for p in self.scenario.participants)

    def report_count(self):
        return sum(len(reports) for reports in self.reports.values())

    def add_report(self, report):
        """Stores `report` in seq order; False if its (node_id, seq) is already stored."""
        seqs = self._seqs.get(report.node_id)
        if seqs is None:
            seqs = {r.seq for r in self.reports.get(report.node_id, ())}
            self._seqs[report.node_id] = seqs
        if report.seq in seqs:
            return False
        seqs.add(report.seq)
        reports = self.reports.setdefault(report.node_id, [])
        reports.append(report)
        if len(reports) > 1 and reports[-2].seq > report.seq:
            reports.sort(key=lambda r: r.seq)
        return True

    def snapshot(self):
        return RunRecord(
            scenario=self.scenario,
            reports={k: list(v) for k, v in self.reports.items()},
            summaries=dict(self.summaries),
            status=self.status,
            started_at=self.started_at,
            finished_at=self.finished_at,
            warnings=list(self.warnings),
            rejected=self.rejected,
            duplicates=self.duplicates,
            acks=dict(self.acks),
        )

    def to_dict(self):
        return {
            "scenario": scenario_to_dict(self.scenario),
            "status": self.status.value,
            "started_at": self.started_at,
            "finished_at": self.finished_at,
            "warnings": list(self.warnings),
            "rejected": self.rejected,
            "duplicates": self.duplicates,
            "reports": {
                str(k): [r.to_dict() for r in reports] for k, reports in sorted(self.reports.items())
            },
            "summaries": {str(k): s.to_dict() for k, s in sorted(self.summaries.items())},
        }

    @classmethod
    def from_dict(cls, document):
        try:
            record = cls(scenario=scenario_from_dict(document["scenario"]))
            record.status = RunStatus(document["status"])
            record.started_at = document.get("started_at")
            record.finished_at = document.get("finished_at")
            record.warnings = list(document.get("warnings", []))
            record.rejected = int(document.get("rejected", 0))
            record.duplicates = int(document.get("duplicates", 0))
            record.reports = {
                int(k): [MetricReport.from_dict(r) for r in reports]
                for k, reports in document.get("reports", {}).items()
            }
            record.summaries = {
                int(k): NodeSummary.from_dict(s) for k, s in document["summaries"].items()
            }
        except (KeyError, TypeError, AttributeError, ValueError, ScenarioError) as e:
            raise RecordError(f"corrupt run record: {e}") from e
        return record


def load_run_record(path):
    try:
        with open(path, "r", encoding="utf-8") as handle:
            document = json.load(handle)
    except json.JSONDecodeError as e:
        raise RecordError(f"{path}: not valid JSON ({e})") from e
    return RunRecord.from_dict(document)


# Ingest


def _energy_warning(summary):
    try:
        recomputed = integrate_energy(summary.power_log)
    except TelemetryError as e:
        return f"node {summary.node_id}: power log unusable ({e})"
    scale = max(abs(recomputed), abs(summary.energy_j))
    if abs(recomputed - summary.energy_j) > constants.INTEGRITY_TOLERANCE * scale:
        return (
            f"node {summary.node_id}: energy_j {summary.energy_j!r} disagrees with "
            f"its power log ({recomputed!r})"
        )
    return None


def ingest(run, msg):
    """
    Applies one MetricReport or NodeSummary to a RUNNING run. Duplicates leave
    the record unchanged. Not thread-safe; ControllerService serializes calls.
    """
    if run.status is not RunStatus.RUNNING:
        run.rejected += 1
        raise RunStateError(f"run is {run.status.value}, not accepting messages")
    if msg.node_id not in run.participant_ids:
        run.rejected += 1
        raise UnknownNodeError(f"node {msg.node_id} is not a participant")

    if isinstance(msg, MetricReport):
        if not run.add_report(msg):
            run.duplicates += 1
        return run

    if not isinstance(msg, NodeSummary):
        raise TypeError(f"cannot ingest {type(msg).__name__}")
    if msg.node_id in run.summaries:
        run.duplicates += 1
        return run
    warning = _energy_warning(msg)
    if warning:
        logger.warning("summary integrity %s", warning)
        run.warnings.append(warning)
    if msg.failed:
        run.warnings.append(f"node {msg.node_id} failed: {msg.diagnostic}")
    run.summaries[msg.node_id] = msg
    logger.info(
        "summary stored node=%d phase=%s have=%d of=%d",
        msg.node_id,
        msg.phase,
        len(run.summaries),
        len(run.participant_ids),
    )
    if len(run.summaries) == len(run.participant_ids):
        failed = any(s.failed for s in run.summaries.values())
        run.status = RunStatus.PARTIAL_FAILURE if failed else RunStatus.COMPLETE
        run.finished_at = time.time()
        logger.info("run finished status=%s", run.status.value)
    return run


def expire_run(run):
    """Closes a still-running run at its deadline, keeping whatever arrived."""
    if run.status is not RunStatus.RUNNING:
        return run
    missing = [k for k in run.participant_ids if k not in run.summaries]
    run.warnings.append(
        "deadline reached without summaries from " + ", ".join(f"node {k}" for k in missing)
    )
    run.status = RunStatus.PARTIAL_FAILURE
    run.finished_at = time.time()
    logger.warning("run deadline reached missing=%s", missing)
    return run


def start_run(run):
    if run.status is RunStatus.RUNNING:
        raise RunStateError("run is already RUNNING")
    if run.status is not RunStatus.PENDING:
        raise RunStateError(f"run is {run.status.value}, cannot start")
    run.status = RunStatus.RUNNING
    run.started_at = time.time()


# Distribution


def _post_config(url, body, attempts):
    last = "no attempt made"
    for attempt in range(1, attempts + 1):
        try:
            response = requests.post(url, json=body, timeout=constants.HTTP_TIMEOUT_S)
            if response.status_code == 200:
                return True, response.json()
            last = f"HTTP {response.status_code}: {response.text[:200]}"
        except (requests.RequestException, ValueError) as e:
            last = f"{type(e).__name__}: {e}"
        logger.warning("config post failed url=%s attempt=%d reason=%s", url, attempt, last)
        if attempt < attempts:
            time.sleep(constants.DISTRIBUTION_RETRY_DELAY_S)
    return False, last


def _config_server_ready(url, attempts):
    """True once GET /health answers 200; a 409 means the node already holds a config."""
    last = "no attempt made"
    for attempt in range(1, attempts + 1):
        try:
            response = requests.get(url, timeout=constants.HTTP_TIMEOUT_S)
            if response.status_code == 200:
                return True, None
            last = f"HTTP {response.status_code}: {response.text[:200]}"
            if response.status_code == 409:
                break
        except requests.RequestException as e:
            last = f"{type(e).__name__}: {e}"
        logger.warning("config server not ready url=%s attempt=%d reason=%s", url, attempt, last)
        if attempt < attempts:
            time.sleep(constants.DISTRIBUTION_RETRY_DELAY_S)
    return False, last


def _abort_distribution(run, failed, lock):
    with lock:
        run.status = RunStatus.ABORTED
        run.finished_at = time.time()
        run.warnings.append(str(DistributionError(failed)))
    raise DistributionError(failed)


def distribute_config(run, lock=None, attempts=constants.DISTRIBUTION_ATTEMPTS):
    """
    POSTs each participant its config (scenario + node_id + node_seed).
    Every config server must first answer GET /health; if one does not, the
    run is ABORTED before any node receives a config. The run is RUNNING from
    the first post so early metrics are accepted; a post that still fails
    after `attempts` tries also aborts the run.
    Returns {node_id: acknowledgement body}.
    """
    lock = lock or contextlib.nullcontext()
    cfg = run.scenario
    participants = sorted(cfg.participants, key=lambda p: p.node_id)
    with lock:
        if run.status is not RunStatus.PENDING:
            raise RunStateError(f"run is {run.status.value}, cannot distribute")

    unreachable = {}
    for participant in participants:
        url = f"http://{participant.host}:{participant.config_port}/health"
        ready, reason = _config_server_ready(url, attempts)
        if not ready:
            unreachable[participant.node_id] = reason
    if unreachable:
        logger.error("distribution aborted before any post unreachable=%s", sorted(unreachable))
        _abort_distribution(run, unreachable, lock)

    with lock:
        start_run(run)
    acks, failed = {}, {}
    for participant in participants:
        url = f"http://{participant.host}:{participant.config_port}/config"
        ok, answer = _post_config(url, assignment_body(cfg, participant.node_id), attempts)
        if ok:
            acks[participant.node_id] = answer
            logger.info("config delivered node=%d url=%s", participant.node_id, url)
        else:
            failed[participant.node_id] = answer
    with lock:
        run.acks = acks
    if failed:
        _abort_distribution(run, failed, lock)
    return acks


# Reports


REPORT_COLUMNS = (
    ("node", "Node", None),
    ("avg_f1", "Avg. F1", 4),
    ("avg_cpu_pct", "CPU (%)", 1),
    ("avg_ram_pct", "RAM (%)", 1),
    ("net_traffic_mb", "Net Traffic (MB)", 1),
    ("avg_power_w", "Power (W)", 2),
    ("energy_j", "Energy (J)", 1),
)
NUMERIC_COLUMNS = tuple(key for key, _, digits in REPORT_COLUMNS if digits is not None)


@dataclass(frozen=True)
class ReportRow:
    node: str
    avg_f1: float
    avg_cpu_pct: float
    avg_ram_pct: float
    net_traffic_mb: float
    avg_power_w: float
    energy_j: float

    def to_dict(self):
        return {key: getattr(self, key) for key, _, _ in REPORT_COLUMNS}


@dataclass(frozen=True)
class RunReport:
    scenario_name: str
    status: str
    rows: tuple
    average: ReportRow

    def to_dict(self):
        return {
            "scenario_name": self.scenario_name,
            "status": self.status,
            "columns": [key for key, _, _ in REPORT_COLUMNS],
            "rows": [row.to_dict() for row in self.rows],
            "average": self.average.to_dict(),
        }


def _rounded(label, values):
    digits = {key: d for key, _, d in REPORT_COLUMNS}
    return ReportRow(node=label, **{k: round(values[k], digits[k]) for k in NUMERIC_COLUMNS})


def _row_values(summary):
    return {
        "avg_f1": summary.f1_final,
        "avg_cpu_pct": summary.avg_cpu_pct,
        "avg_ram_pct": summary.avg_ram_pct,
        "net_traffic_mb": (summary.total_bytes_sent + summary.total_bytes_recv) / 2**20,
        "avg_power_w": summary.avg_power_w,
        "energy_j": summary.energy_j,
    }


def build_run_report(run):
    """
    One row per summarized node in node_id order plus the average row. Every
    value is rounded here once, so all renderings show the same numbers.
    """
    if run.status not in REPORTABLE:
        raise NotReadyError(f"run is {run.status.value}; report needs COMPLETE or PARTIAL_FAILURE")
    raw = [(str(k), _row_values(run.summaries[k])) for k in sorted(run.summaries)]
    if raw:
        mean = {key: sum(v[key] for _, v in raw) / len(raw) for key in NUMERIC_COLUMNS}
    else:
        mean = {key: 0.0 for key in NUMERIC_COLUMNS}
    return RunReport(
        scenario_name=run.scenario.scenario_name,
        status=run.status.value,
        rows=tuple(_rounded(label, values) for label, values in raw),
        average=_rounded("average", mean),
    )


def _formatted(row):
    cells = [row.node]
    for key, _, digits in REPORT_COLUMNS[1:]:
        cells.append(f"{getattr(row, key):.{digits}f}")
    return cells


def render_run_report(report, fmt):
    rows = [*report.rows, report.average]
    if fmt == "csv":
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow([key for key, _, _ in REPORT_COLUMNS])
        for row in rows:
            writer.writerow(_formatted(row))
        return buffer.getvalue()
    if fmt in ("markdown", "md"):
        lines = [
            f"# {report.scenario_name} ({report.status})",
            "",
            "| " + " | ".join(title for _, title, _ in REPORT_COLUMNS) + " |",
            "|" + "|".join(["---"] + ["---:"] * (len(REPORT_COLUMNS) - 1)) + "|",
        ]
        for row in rows:
            lines.append("| " + " | ".join(_formatted(row)) + " |")
        return "\n".join(lines) + "\n"
    if fmt == "json":
        return json.dumps(report.to_dict(), indent=2) + "\n"
    raise ValueError(f"unknown report format '{fmt}'")


def render_report(run, fmt):
    """Renders a finished run as csv, markdown (md) or json text."""
    return render_run_report(build_run_report(run), fmt)


def write_run_artifacts(run, out_dir):
    """
    Writes run_record.json, the per-node power logs and, for reportable runs,
    run_report.{csv,md,json}. Returns the written paths.
    """
    os.makedirs(out_dir, exist_ok=True)
    written = []
    record_path = os.path.join(out_dir, constants.RUN_RECORD_FILE)
    write_json(record_path, run.to_dict())
    written.append(record_path)
    for node_id, summary in sorted(run.summaries.items()):
        path = os.path.join(out_dir, constants.POWER_LOG_TEMPLATE.format(node_id=node_id))
        write_power_log(summary.power_log, path)
        written.append(path)
    if run.status in REPORTABLE:
        report = build_run_report(run)
        for fmt, extension in (("csv", "csv"), ("markdown", "md"), ("json", "json")):
            path = os.path.join(out_dir, f"{constants.RUN_REPORT_STEM}.{extension}")
            write_text(path, render_run_report(report, fmt))
            written.append(path)
    logger.info("artifacts written out=%s files=%d", out_dir, len(written))
    return written


# Service


class ControllerService:
    """Thread-safe owner of one RunRecord, shared by the HTTP handlers and the CLI."""

    def __init__(self, scenario):
        self.run = RunRecord(scenario=scenario)
        self._lock = threading.RLock()
        self.finished = threading.Event()

    def start(self):
        with self._lock:
            start_run(self.run)

    def ingest(self, msg):
        with self._lock:
            try:
                ingest(self.run, msg)
            finally:
                if self.run.status in TERMINAL:
                    self.finished.set()

    def distribute(self, attempts=constants.DISTRIBUTION_ATTEMPTS):
        try:
            return distribute_config(self.run, lock=self._lock, attempts=attempts)
        except DistributionError:
            self.finished.set()
            raise

    def expire(self):
        with self._lock:
            expire_run(self.run)
        self.finished.set()

    def schedule_deadline(self, scheduler, deadline_s):
        scheduler.add_job(
            id="run_deadline",
            func=self.expire,
            trigger="date",
            run_date=datetime.now() + timedelta(seconds=deadline_s),
        )

    def wait(self, timeout=None):
        return self.finished.wait(timeout)

    def snapshot(self):
        with self._lock:
            return self.run.snapshot()

    def health(self):
        with self._lock:
            return {
                "status": self.run.status.value,
                "summaries": len(self.run.summaries),
                "reports": self.run.report_count(),
            }


class IngestServer:
    """Handle of a running ingest service; `port` is the bound port."""

    def __init__(self, host, port, service, deadline_s=None):
        self.service = service
        self.app = create_controller_app(service, deadline_s=deadline_s)
        self._server = make_server(host, port, self.app, threaded=True)
        self.host = host
        self.port = self._server.server_port
        self._thread = threading.Thread(
            target=self._server.serve_forever, name="ingest-server", daemon=True
        )

    @property
    def endpoint(self):
        return f"http://{self.host}:{self.port}"

    def start(self):
        self._thread.start()
        logger.info("ingest service listening host=%s port=%d", self.host, self.port)
        return self

    def shutdown(self):
        self._server.shutdown()
        self._server.server_close()
        scheduler = self.app.config["RUN_SCHEDULER"]
        if scheduler.running:
            scheduler.shutdown(wait=False)
        self._thread.join(timeout=5.0)


def serve_ingest_endpoints(bind, service, deadline_s=None):
    """Starts POST /metrics, POST /summary and GET /health on `bind` (HOST:PORT)."""
    host, port = parse_bind(bind) if isinstance(bind, str) else bind
    return IngestServer(host, port, service, deadline_s=deadline_s).start()

