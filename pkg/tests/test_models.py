import json
import math

import pytest
from pydantic import ValidationError

from fedmesh.errors import RecordError
from fedmesh.models import MetricReport, NodeSummary, PowerSample, ResourceSample


def report_body(**changes):
    body = {
        "node_id": 1,
        "seq": 4,
        "timestamp_ms": 4000,
        "round": 2,
        "cpu_pct": 40.0,
        "ram_pct": 30.0,
        "bytes_sent": 10,
        "bytes_recv": 10,
        "power_w": 3.1,
        "phase": "TRAINING",
    }
    body.update(changes)
    return body


def summary_body(**changes):
    body = {
        "node_id": 0,
        "phase": "DONE",
        "f1_final": 0.9,
        "energy_j": 30.0,
        "avg_power_w": 3.0,
        "total_bytes_sent": 100,
        "total_bytes_recv": 100,
        "duration_s": 10.0,
    }
    body.update(changes)
    return body


def test_power_must_equal_voltage_times_current():
    PowerSample(timestamp_ms=0, voltage_v=5.0, current_a=0.6, power_w=3.0)
    with pytest.raises(ValidationError):
        PowerSample(timestamp_ms=0, voltage_v=5.0, current_a=0.6, power_w=3.1)


def test_power_sample_body_with_mismatched_power_is_rejected():
    body = {"timestamp_ms": 0, "voltage_v": 5.0, "current_a": 0.6, "power_w": 3.0 + 1e-5}
    with pytest.raises(RecordError) as excinfo:
        PowerSample.from_dict(body)
    assert "voltage_v * current_a" in str(excinfo.value)


def test_metric_report_from_dict():
    report = MetricReport.from_dict(report_body())
    assert report.seq == 4
    assert report.to_dict() == report_body()


@pytest.mark.parametrize(
    "changes, field",
    [
        ({"cpu_pct": 140.0}, "cpu_pct"),
        ({"seq": -1}, "seq"),
        ({"bytes_sent": "many"}, "bytes_sent"),
        ({"ram_pct": float("nan")}, "ram_pct"),
    ],
)
def test_bad_metric_report_names_the_field(changes, field):
    with pytest.raises(RecordError) as excinfo:
        MetricReport.from_dict(report_body(**changes))
    assert str(excinfo.value).startswith(f"{field}:")


def test_missing_field_is_named():
    body = report_body()
    del body["timestamp_ms"]
    with pytest.raises(RecordError) as excinfo:
        MetricReport.from_dict(body)
    assert str(excinfo.value).startswith("timestamp_ms:")


def test_non_object_body():
    with pytest.raises(RecordError):
        NodeSummary.from_dict([1, 2, 3])


def test_bad_power_log_entry_names_its_index():
    log = [
        {"timestamp_ms": 0, "voltage_v": 5.0, "current_a": 0.6, "power_w": 3.0},
        {"timestamp_ms": 1000, "voltage_v": -5.0, "current_a": 0.6, "power_w": 3.0},
    ]
    with pytest.raises(RecordError) as excinfo:
        NodeSummary.from_dict(summary_body(power_log=log))
    assert str(excinfo.value).startswith("power_log[1].voltage_v:")


def test_diverged_loss_survives_json():
    summary = NodeSummary.from_dict(summary_body(loss_per_round=[0.7, float("nan")]))
    again = NodeSummary.from_dict(json.loads(json.dumps(summary.to_dict())))
    assert again.loss_per_round[0] == 0.7
    assert math.isnan(again.loss_per_round[1])


def test_summary_failed_flag():
    assert not NodeSummary.from_dict(summary_body()).failed
    failed = NodeSummary.from_dict(summary_body(phase="FAILED", diagnostic="EXCHANGING round 3: timeout"))
    assert failed.failed
    assert failed.power_log == ()


def test_resource_sample_defaults_to_present():
    sample = ResourceSample(timestamp_ms=0, cpu_pct=12.5, ram_pct=40.0)
    assert sample.missing is False
