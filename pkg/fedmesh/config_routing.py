"""
This module handles a node's one-shot configuration server: a lightweight
HTTP endpoint that accepts exactly one valid scenario on POST /config and is
then shut down so the port is released.
"""

import logging
import threading
import time

from flask import Blueprint, current_app, jsonify, request
from werkzeug.serving import make_server

from . import constants, create_node_app
from .errors import (
    ConfigTimeoutError,
    MissingFieldError,
    ScenarioParseError,
    ScenarioValidationError,
)
from .scenario import parse_assignment

logger = logging.getLogger(__name__)

config_blueprint = Blueprint("config", __name__)


class ConfigSlot:
    """Holds the single accepted assignment and the time of the last request."""

    def __init__(self):
        self.port = None
        self.assignment = None
        self.last_activity = time.monotonic()
        self._lock = threading.Lock()

    def touch(self):
        self.last_activity = time.monotonic()

    @property
    def filled(self):
        return self.assignment is not None

    def fill(self, assignment):
        with self._lock:
            if self.assignment is not None:
                return False
            self.assignment = assignment
            return True


@config_blueprint.route("/config", methods=["POST"])
def receive_config():
    """
    Accepts the scenario document for this node.
    POST: 200 {"status": "ok", "node_id": K} on a valid config; 400 with the
          parse error or the list of violations otherwise, in which case the
          server keeps listening.
    """
    slot = current_app.config["CONFIG_SLOT"]
    try:
        assignment = parse_assignment(request.get_data(), bound_port=slot.port)
    except ScenarioParseError as e:
        logger.warning("config rejected reason=parse error=%s", e)
        return jsonify(status="error", error=str(e), position=e.position), 400
    except MissingFieldError as e:
        logger.warning("config rejected reason=missing field=%s", e.field)
        return jsonify(status="error", error=str(e), violations=[
            {"path": e.field, "message": "missing required field"}
        ]), 400
    except ScenarioValidationError as e:
        logger.warning("config rejected reason=invalid violations=%d", len(e.violations))
        return jsonify(
            status="error", error=str(e), violations=[v.to_dict() for v in e.violations]
        ), 400

    if not slot.fill(assignment):
        return jsonify(status="error", error="a configuration was already accepted"), 409
    logger.info(
        "config accepted scenario=%s node_id=%d",
        assignment.scenario.scenario_name,
        assignment.node_id,
    )
    return jsonify(status="ok", node_id=assignment.node_id), 200


@config_blueprint.route("/health", methods=["GET"])
def config_health():
    """
    Reports whether this node still waits for its config.
    GET: 200 {"status": "waiting", "port": P} before a config is accepted,
         409 {"status": "configured"} after.
    """
    slot = current_app.config["CONFIG_SLOT"]
    if slot.filled:
        return jsonify(status="configured"), 409
    return jsonify(status="waiting", port=slot.port), 200


class ConfigServer:
    """
    Binds immediately so callers can learn the port (useful with port 0),
    then serves one connection at a time until a valid config arrives.
    """

    def __init__(self, host, port, idle_timeout_s=constants.CONFIG_IDLE_TIMEOUT_S):
        self.slot = ConfigSlot()
        self.idle_timeout_s = idle_timeout_s
        self._server = make_server(host, port, create_node_app(self.slot), threaded=False)
        self._server.timeout = constants.CONFIG_POLL_S
        self.host = host
        self.port = self._server.server_port
        self.slot.port = self.port
        self._stopped = threading.Event()

    def serve(self):
        """Blocks until a config is accepted; always releases the port."""
        logger.info("config server listening host=%s port=%d", self.host, self.port)
        self.slot.touch()
        try:
            while not self.slot.filled and not self._stopped.is_set():
                idle = time.monotonic() - self.slot.last_activity
                if idle > self.idle_timeout_s:
                    raise ConfigTimeoutError(
                        f"no configuration on {self.host}:{self.port} "
                        f"within {self.idle_timeout_s:.0f}s"
                    )
                self._server.handle_request()
        finally:
            self.close()
        logger.info("config server closed port=%d", self.port)
        return self.slot.assignment

    def stop(self):
        """Makes a pending serve() return None at its next poll."""
        self._stopped.set()

    def close(self):
        self._server.server_close()


def serve_config_once(host, port, idle_timeout_s=constants.CONFIG_IDLE_TIMEOUT_S):
    """Serves POST /config until one valid config arrives; returns its ConfigAssignment."""
    return ConfigServer(host, port, idle_timeout_s=idle_timeout_s).serve()
