"""
This module contains helper functions shared by nodes and the controller:
posting JSON bodies with bounded retries, writing JSON artifacts, parsing
host:port strings and naming the field behind a validation error.
"""

import json
import logging
import os
import time

import requests

from . import constants

logger = logging.getLogger(__name__)


def post_json_with_retry(url, body, retries, success_message, error_message, delay=None):
    """
    POSTs `body` as JSON to `url`, retrying up to `retries` times on
    connection problems or 5xx answers. A 4xx answer is final. Never raises;
    returns the response on success and None otherwise.
    """
    delay = constants.RETRY_DELAY_S if delay is None else delay
    attempts = retries + 1
    for attempt in range(1, attempts + 1):
        try:
            response = requests.post(
                url,
                json=body,
                timeout=constants.HTTP_TIMEOUT_S,
                headers={"Connection": "close"},
            )
            if 200 <= response.status_code < 300:
                logger.debug("%s url=%s attempt=%d", success_message, url, attempt)
                return response
            logger.warning(
                "%s url=%s attempt=%d status=%d body=%s",
                error_message,
                url,
                attempt,
                response.status_code,
                response.text[:200],
            )
            if 400 <= response.status_code < 500:
                return None
        except requests.RequestException as e:
            logger.warning("%s url=%s attempt=%d error=%s", error_message, url, attempt, e)
        if attempt < attempts:
            time.sleep(delay)
    return None


def format_loc(loc):
    """Dotted path of a pydantic error location, e.g. participants[1].peer_port."""
    path = ""
    for part in loc:
        if isinstance(part, int):
            path += f"[{part}]"
        else:
            path = f"{path}.{part}" if path else str(part)
    return path


def join_url(base, path):
    return base.rstrip("/") + "/" + path.lstrip("/")


def parse_bind(text):
    """Splits HOST:PORT into (host, port)."""
    host, sep, port = text.rpartition(":")
    if not sep or not host or not port.isdigit():
        raise ValueError(f"expected HOST:PORT, got '{text}'")
    port = int(port)
    if not 0 <= port <= 65535:
        raise ValueError(f"port {port} out of range")
    return host, port


def write_json(path, document):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(document, handle, indent=2, sort_keys=True)
        handle.write("\n")


def write_text(path, text):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as handle:
        handle.write(text)
