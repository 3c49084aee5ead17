"""
This module defines the telemetry records that flow from nodes to the
controller: power and resource samples, periodic metric reports, and the
end-of-run node summary. Each record converts to and from the JSON objects
carried in the HTTP bodies of POST /metrics and POST /summary.
"""

import json
from typing import Annotated, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from . import constants
from .errors import RecordError
from .helper_functions import format_loc

NonNegInt = Annotated[int, Field(ge=0)]
NonNegFloat = Annotated[float, Field(ge=0.0)]
Percent = Annotated[float, Field(ge=0.0, le=100.0)]


class _Record(BaseModel):
    model_config = ConfigDict(frozen=True, allow_inf_nan=False, ser_json_inf_nan="constants")

    def to_dict(self):
        # NaN losses stay NaN in JSON
        return json.loads(self.model_dump_json())

    @classmethod
    def from_dict(cls, body):
        """Validates a decoded JSON body; any problem is a RecordError naming the field."""
        if not isinstance(body, dict):
            raise RecordError(f"{cls.__name__} body must be a JSON object")
        try:
            return cls.model_validate(body)
        except ValidationError as exc:
            error = exc.errors()[0]
            where = format_loc(error["loc"]) or cls.__name__
            raise RecordError(f"{where}: {error['msg']}") from exc


class PowerSample(_Record):
    """
    One meter reading.

    Attributes:
        timestamp_ms (int): Telemetry clock time of the reading.
        voltage_v (float): Bus voltage in volts.
        current_a (float): Current in amperes.
        power_w (float): Power in watts, voltage_v * current_a.
    """

    timestamp_ms: NonNegInt
    voltage_v: NonNegFloat
    current_a: NonNegFloat
    power_w: NonNegFloat

    @model_validator(mode="after")
    def _power_is_product(self):
        if abs(self.power_w - self.voltage_v * self.current_a) > constants.POWER_TOLERANCE_W:
            raise ValueError(
                f"power_w {self.power_w} does not match voltage_v * current_a "
                f"({self.voltage_v * self.current_a})"
            )
        return self


class ResourceSample(_Record):
    timestamp_ms: NonNegInt
    cpu_pct: Percent
    ram_pct: Percent
    missing: bool = False


class MetricReport(_Record):
    """
    Periodic node-to-controller telemetry.

    Attributes:
        node_id (int): Reporting node.
        seq (int): Per-node counter, strictly increasing.
        timestamp_ms (int): Telemetry clock time, nondecreasing per node.
        round (int): Federation round in progress.
        cpu_pct (float): CPU utilization in [0, 100].
        ram_pct (float): RAM utilization in [0, 100].
        bytes_sent (int): Model bytes sent so far.
        bytes_recv (int): Model bytes received so far.
        power_w (float | None): Latest meter reading, if a meter is attached.
        phase (str): Node phase when the report was taken.
    """

    node_id: NonNegInt
    seq: NonNegInt
    timestamp_ms: NonNegInt
    round: NonNegInt
    cpu_pct: Percent
    ram_pct: Percent
    bytes_sent: NonNegInt
    bytes_recv: NonNegInt
    power_w: Optional[NonNegFloat] = None
    phase: str = ""


class NodeSummary(_Record):
    """
    End-of-run batch report of one node, including its full power log.

    Attributes:
        node_id (int): Reporting node.
        phase (str): DONE, or FAILED with `diagnostic` explaining why.
        f1_final (float): Macro-F1 after the last completed aggregation.
        f1_per_round (tuple[float]): Macro-F1 after each aggregation.
        loss_per_round (tuple[float]): Mean local training loss per round.
        round_digests (tuple[str]): SHA-256 of the parameters after each aggregation.
        energy_j (float): Trapezoidal integral of power_log.
        avg_power_w (float): Mean of the power samples.
        avg_cpu_pct (float): Mean CPU utilization over the run.
        avg_ram_pct (float): Mean RAM utilization over the run.
        total_bytes_sent (int): Model bytes sent.
        total_bytes_recv (int): Model bytes received.
        duration_s (float): Telemetry clock span of the run.
        dropped_reports (int): Metric reports that never reached the controller.
        power_log (tuple[PowerSample]): Every power reading of the run.
    """

    node_id: NonNegInt
    phase: str
    f1_final: NonNegFloat
    f1_per_round: tuple[float, ...] = ()
    energy_j: NonNegFloat
    avg_power_w: NonNegFloat
    total_bytes_sent: NonNegInt
    total_bytes_recv: NonNegInt
    duration_s: NonNegFloat
    power_log: tuple[PowerSample, ...] = ()
    loss_per_round: tuple[Annotated[float, Field(allow_inf_nan=True)], ...] = ()
    round_digests: tuple[str, ...] = ()
    avg_cpu_pct: NonNegFloat = 0.0
    avg_ram_pct: NonNegFloat = 0.0
    dropped_reports: NonNegInt = 0
    diagnostic: Optional[str] = None

    @property
    def failed(self):
        return self.phase != "DONE"
