import logging
import os
import sys

from flask import Flask
from flask_apscheduler import APScheduler

LOG_ENV_VAR = "FEDMESH_LOG"
LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
LOG_FORMAT = "ts=%(asctime)s level=%(levelname)s logger=%(name)s msg=%(message)s"

logger = logging.getLogger("fedmesh")


def configure_logging(level_name=None):
    """
    Sends fedmesh and werkzeug logs to standard error as key=value lines.
    The level comes from `level_name`, else FEDMESH_LOG, else info.
    """
    requested = (level_name or os.environ.get(LOG_ENV_VAR) or "info").lower()
    level = LOG_LEVELS.get(requested, logging.INFO)

    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter(LOG_FORMAT, datefmt="%Y-%m-%dT%H:%M:%S"))
    for name in ("fedmesh", "werkzeug", "apscheduler"):
        named = logging.getLogger(name)
        named.handlers[:] = [handler]
        named.propagate = False
    logger.setLevel(level)
    # request lines and scheduler chatter only at debug
    quiet = logging.DEBUG if level == logging.DEBUG else logging.WARNING
    logging.getLogger("werkzeug").setLevel(quiet)
    logging.getLogger("apscheduler").setLevel(quiet)

    if requested not in LOG_LEVELS:
        logger.warning("unknown %s=%s, using info", LOG_ENV_VAR, requested)
    return level


def create_node_app(config_slot):
    """App for a node's one-shot config server (POST /config, GET /health)."""
    app = Flask(__name__)
    app.config["CONFIG_SLOT"] = config_slot

    from .config_routing import config_blueprint

    app.register_blueprint(config_blueprint, url_prefix="/")

    @app.before_request
    def note_activity():
        config_slot.touch()

    return app


def create_controller_app(run_service, deadline_s=None):
    """
    App for the controller's ingest service (POST /metrics, POST /summary,
    GET /health). When `deadline_s` is given, a scheduler job closes the run
    as PARTIAL_FAILURE once the deadline passes.
    """
    app = Flask(__name__)
    app.config["RUN_SERVICE"] = run_service
    app.config["SCHEDULER_API_ENABLED"] = False

    from .ingest_routing import ingest_blueprint

    app.register_blueprint(ingest_blueprint, url_prefix="/")

    # one scheduler per app so several runs can share a process
    scheduler = APScheduler()
    scheduler.init_app(app)
    scheduler.start()
    app.config["RUN_SCHEDULER"] = scheduler
    if deadline_s is not None:
        run_service.schedule_deadline(scheduler, deadline_s)
    return app
