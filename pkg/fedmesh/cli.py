"""
Command-line entry point with one subcommand per role:

    sim         run a scenario (or a sweep of seeds/topologies) in-process
    node        serve POST /config once, then train as that participant
    controller  distribute a scenario, ingest telemetry, write the report
    report      re-render a stored run_record.json
    dataset     inspect IDX files or materialize a synthetic dataset

Exit codes: 0 success, 1 usage or configuration error, 2 run failure,
3 timeout.
"""

import argparse
import json
import logging
import math
import os
import sys

import numpy as np
from pydantic import ValidationError

from . import configure_logging, constants
from .config_routing import serve_config_once
from .controller import (
    ControllerService,
    RunStatus,
    load_run_record,
    render_report,
    serve_ingest_endpoints,
    write_run_artifacts,
)
from .dataset import gen_synthetic, inspect_idx_dir, save_dataset
from .errors import (
    ConfigTimeoutError,
    DistributionError,
    FedmeshError,
    MissingFieldError,
    ScenarioParseError,
    ScenarioValidationError,
)
from .helper_functions import parse_bind, write_text
from .node import HttpReporter, NodeServices, run_node
from .scenario import DataSource, SyntheticSpec, load_scenario, scenario_from_dict
from .simulation import render_sweep, run_simulation, sweep, sweep_plans
from .telemetry import OsResourceSource, TelemetryClock, TelemetrySampler, build_meter
from .transport import PeerListener, TcpTransport

logger = logging.getLogger(__name__)

REPORT_FORMATS = ("csv", "md", "json")


class UsageError(Exception):
    pass


class CliParser(argparse.ArgumentParser):
    """ArgumentParser whose usage errors exit with code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(constants.EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _comma_list(text):
    return [item.strip() for item in text.split(",") if item.strip()]


def _seed_list(text):
    try:
        return [int(item) for item in _comma_list(text)]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got '{text}'")


def build_parser():
    parser = CliParser(prog="fedmesh", description="Decentralized federated learning testbed")
    parser.add_argument("--log-level", choices=["error", "info", "debug"], default=None)
    commands = parser.add_subparsers(dest="command", required=True, parser_class=CliParser)

    sim = commands.add_parser("sim", help="run a scenario in-process")
    sim.add_argument("--scenario", required=True)
    sim.add_argument("--out", default="out")
    sim.add_argument("--seeds", type=_seed_list, default=None)
    sim.add_argument("--topologies", type=_comma_list, default=None)
    sim.add_argument("--time-compression", type=float, default=1.0)
    sim.add_argument("--transport", choices=["tcp", "memory"], default="tcp")

    node = commands.add_parser("node", help="run one participant")
    node.add_argument("--bind", required=True, help="HOST:PORT of the config server")
    node.add_argument("--config-timeout", type=float, default=constants.CONFIG_IDLE_TIMEOUT_S)

    controller = commands.add_parser("controller", help="orchestrate a physical run")
    controller.add_argument("--scenario", required=True)
    controller.add_argument("--bind", required=True, help="HOST:PORT of the ingest service")
    controller.add_argument("--out", default="out")
    controller.add_argument("--deadline", type=float, default=constants.RUN_DEADLINE_S)

    report = commands.add_parser("report", help="re-render a stored run record")
    report.add_argument("--record", required=True)
    report.add_argument("--format", choices=REPORT_FORMATS, default="md")

    dataset = commands.add_parser("dataset", help="inspect or generate datasets")
    dataset_commands = dataset.add_subparsers(dest="dataset_command", required=True, parser_class=CliParser)
    inspect = dataset_commands.add_parser("inspect")
    inspect.add_argument("--data-dir", required=True)
    synth = dataset_commands.add_parser("synth")
    synth.add_argument("--spec", required=True)
    synth.add_argument("--out", required=True)
    return parser


def _load_scenario_or_usage(path):
    if not os.path.exists(path):
        raise UsageError(f"file not found: {path}")
    try:
        return load_scenario(path)
    except ScenarioValidationError as e:
        lines = [f"invalid scenario {path}:"]
        lines += [f"  {v.path}: {v.message}" for v in e.violations]
        raise UsageError("\n".join(lines))
    except (ScenarioParseError, MissingFieldError) as e:
        raise UsageError(f"{path}: {e}")


def _status_exit(status):
    return constants.EXIT_OK if status is RunStatus.COMPLETE else constants.EXIT_RUN_FAILURE


def cmd_sim(args):
    cfg = _load_scenario_or_usage(args.scenario)
    if args.time_compression < 1:
        raise UsageError("--time-compression must be >= 1")
    plans = sweep_plans(
        cfg,
        seeds=args.seeds,
        topologies=args.topologies,
        time_compression=args.time_compression,
        transport=args.transport,
    )
    if len(plans) == 1:
        result = run_simulation(plans[0])
        write_run_artifacts(result.record, args.out)
        print(f"{result.record.status.value} {os.path.join(args.out, constants.RUN_RECORD_FILE)}")
        return _status_exit(result.record.status)

    outcome = sweep(plans)
    worst = constants.EXIT_OK
    for plan, result in zip(plans, outcome.results):
        write_run_artifacts(result.record, os.path.join(args.out, plan.label))
        worst = max(worst, _status_exit(result.record.status))
    for fmt, extension in (("csv", "csv"), ("markdown", "md"), ("json", "json")):
        path = os.path.join(args.out, f"{constants.SWEEP_REPORT_STEM}.{extension}")
        write_text(path, render_sweep(outcome, fmt))
    print(render_sweep(outcome, "markdown"), end="")
    return worst


def cmd_node(args):
    host, port = parse_bind(args.bind)
    try:
        assignment = serve_config_once(host, port, idle_timeout_s=args.config_timeout)
    except ConfigTimeoutError as e:
        logger.error("config wait timed out error=%s", e)
        return constants.EXIT_TIMEOUT
    cfg = assignment.scenario
    me = cfg.participant(assignment.node_id)
    listener = PeerListener(host, me.peer_port)
    directory = {p.node_id: (p.host, p.peer_port) for p in cfg.participants}
    services = NodeServices(
        transport=TcpTransport(directory, listener, rounds=cfg.rounds),
        sampler=TelemetrySampler(
            resources=OsResourceSource(),
            meter=build_meter(cfg.power_meter, assignment.node_seed),
            clock=TelemetryClock(),
            interval_ms=cfg.power_meter.sample_interval_ms,
        ),
        reporter=HttpReporter(me.metrics_endpoint),
    )
    summary = run_node(cfg, assignment.node_id, services)
    return constants.EXIT_RUN_FAILURE if summary.failed else constants.EXIT_OK


def cmd_controller(args):
    cfg = _load_scenario_or_usage(args.scenario)
    service = ControllerService(cfg)
    server = serve_ingest_endpoints(args.bind, service, deadline_s=args.deadline)
    try:
        try:
            service.distribute()
        except DistributionError as e:
            logger.error("distribution aborted error=%s", e)
            write_run_artifacts(service.snapshot(), args.out)
            return constants.EXIT_RUN_FAILURE
        service.wait()
    finally:
        server.shutdown()
    record = service.snapshot()
    write_run_artifacts(record, args.out)
    print(f"{record.status.value} {os.path.join(args.out, constants.RUN_RECORD_FILE)}")
    return _status_exit(record.status)


def cmd_report(args):
    if not os.path.exists(args.record):
        raise UsageError(f"file not found: {args.record}")
    record = load_run_record(args.record)
    sys.stdout.write(render_report(record, args.format))
    return constants.EXIT_OK


def _shape_text(n_features):
    side = math.isqrt(n_features)
    return f"{side}x{side}" if side * side == n_features else f"{n_features} features"


def _describe_split(name, images, labels):
    histogram = ", ".join(f"{k}:{int(c)}" for k, c in enumerate(np.bincount(labels)))
    return f"{name}: {images.shape[0]} samples, {_shape_text(images.shape[1])}, labels {{{histogram}}}"


def cmd_dataset(args):
    if args.dataset_command == "inspect":
        summary, problems = inspect_idx_dir(args.data_dir)
        if problems:
            for name, diagnostic in sorted(problems.items()):
                print(f"{name}: {diagnostic}", file=sys.stderr)
            return constants.EXIT_USAGE
        train_images, test_images = summary["train_images"], summary["test_images"]
        for images_key, labels_key in (("train_images", "train_labels"), ("test_images", "test_labels")):
            if summary[images_key].shape[0] != summary[labels_key].shape[0]:
                print(f"{images_key}/{labels_key}: sample counts differ", file=sys.stderr)
                return constants.EXIT_USAGE
        print(
            f"{train_images.shape[0]} train / {test_images.shape[0]} test, "
            f"{_shape_text(train_images.shape[1])}"
        )
        print(_describe_split("train", train_images, summary["train_labels"]))
        print(_describe_split("test", test_images, summary["test_labels"]))
        return constants.EXIT_OK

    spec, seed = _read_synth_spec(args.spec)
    dataset = gen_synthetic(spec, seed)
    out = args.out if args.out.endswith(".npz") else args.out + ".npz"
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    save_dataset(dataset, out)
    print(f"{len(dataset)} samples, {dataset.n_features} features, {dataset.n_classes} classes -> {out}")
    return constants.EXIT_OK


def _read_synth_spec(path):
    """
    Accepts either a full scenario with a synthetic dataset (seeded by its
    master_seed) or a bare object with n_samples, n_features, n_classes,
    cluster_stddev and an optional seed.
    """
    if not os.path.exists(path):
        raise UsageError(f"file not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as handle:
            document = json.load(handle)
    except json.JSONDecodeError as e:
        raise UsageError(f"{path}: not valid JSON ({e})")
    if not isinstance(document, dict):
        raise UsageError(f"{path}: expected a JSON object")
    if "scenario_name" in document:
        cfg = scenario_from_dict(document)
        if cfg.dataset.source is not DataSource.SYNTHETIC:
            raise UsageError(f"{path}: scenario dataset is not synthetic")
        return cfg.dataset.synthetic, cfg.master_seed
    seed = document.pop("seed", constants.DEFAULT_MASTER_SEED)
    try:
        spec = SyntheticSpec.model_validate(document)
    except ValidationError as e:
        raise UsageError(f"{path}: bad synthetic spec ({e})")
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise UsageError(f"{path}: seed must be a non-negative integer")
    return spec, seed


COMMANDS = {
    "sim": cmd_sim,
    "node": cmd_node,
    "controller": cmd_controller,
    "report": cmd_report,
    "dataset": cmd_dataset,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    try:
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return constants.EXIT_USAGE
    except ScenarioValidationError as e:
        for violation in e.violations:
            print(f"{violation.path}: {violation.message}", file=sys.stderr)
        return constants.EXIT_USAGE
    except (FedmeshError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        logger.debug("command failed", exc_info=True)
        return constants.EXIT_USAGE

