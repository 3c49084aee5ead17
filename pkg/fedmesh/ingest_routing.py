"""
This module handles the controller's ingest routes: periodic metric reports,
end-of-run node summaries, a liveness check and a run status view.
"""

import logging

from flask import Blueprint, current_app, jsonify, request

from .errors import RecordError, RunStateError, UnknownNodeError
from .models import MetricReport, NodeSummary

logger = logging.getLogger(__name__)

ingest_blueprint = Blueprint("ingest", __name__)


def _ingest(record_type):
    body = request.get_json(silent=True)
    if body is None:
        return jsonify(status="error", error="body must be a JSON object"), 400
    try:
        message = record_type.from_dict(body)
    except RecordError as e:
        logger.warning("ingest rejected reason=malformed error=%s", e)
        return jsonify(status="error", error=str(e)), 400

    service = current_app.config["RUN_SERVICE"]
    try:
        service.ingest(message)
    except UnknownNodeError as e:
        logger.warning("ingest rejected reason=unknown_node node=%d", message.node_id)
        return jsonify(status="error", error=str(e)), 400
    except RunStateError as e:
        return jsonify(status="error", error=str(e)), 409
    return jsonify(status="ok"), 200


@ingest_blueprint.route("/metrics", methods=["POST"])
def metrics():
    """
    POST: Stores one MetricReport. 200 when stored or already present, 400 for
          a malformed body or an unknown node, 409 when the run is not running.
    """
    return _ingest(MetricReport)


@ingest_blueprint.route("/summary", methods=["POST"])
def summary():
    """
    POST: Stores one NodeSummary; the last missing summary completes the run.
    """
    return _ingest(NodeSummary)


@ingest_blueprint.route("/health", methods=["GET"])
def health():
    return "ok", 200, {"Content-Type": "text/plain; charset=utf-8"}


@ingest_blueprint.route("/status", methods=["GET"])
def status():
    """
    GET: Run status with the number of stored summaries and metric reports.
    """
    return jsonify(current_app.config["RUN_SERVICE"].health()), 200
