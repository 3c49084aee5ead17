"""
This module samples CPU/RAM utilization and electrical power, integrates
energy, and keeps the power log that a node ships in its end-of-run summary.

The power meter is an interface with three backends: a simulated affine model
calibrated to small ARM boards (idle plus load-proportional draw), a replay
backend that plays back a recorded power-log CSV, and none.
"""

import csv
import logging
import threading
import time
from dataclasses import dataclass, field
from datetime import datetime

import numpy as np
import psutil
from apscheduler.schedulers.background import BackgroundScheduler
from pydantic import ValidationError

from . import constants
from .errors import PowerLogError, TelemetryError
from .helper_functions import format_loc
from .models import PowerSample, ResourceSample
from .scenario import MeterBackend

logger = logging.getLogger(__name__)

POWER_LOG_HEADER = ["timestamp_ms", "voltage_v", "current_a", "power_w"]
TRAINING_PHASE = "training"


class TelemetryClock:
    """
    Millisecond clock that runs `compression` times faster than wall time,
    starting at `origin_ms`.
    """

    def __init__(self, compression=1.0, origin_ms=None):
        if compression < 1.0:
            raise TelemetryError("time compression must be >= 1")
        self.compression = compression
        self._origin_ms = int(time.time() * 1000) if origin_ms is None else origin_ms
        self._started = time.monotonic()

    def now_ms(self):
        elapsed = time.monotonic() - self._started
        return self._origin_ms + int(elapsed * 1000.0 * self.compression)

    def real_seconds(self, telemetry_ms):
        """Wall-clock seconds corresponding to a telemetry interval."""
        return telemetry_ms / 1000.0 / self.compression


class ManualClock:
    """A clock that only moves when told to; drives deterministic tests and replays."""

    def __init__(self, start_ms=0):
        self.compression = 1.0
        self._now = start_ms

    def now_ms(self):
        return self._now

    def advance(self, ms):
        self._now += ms

    def real_seconds(self, telemetry_ms):
        return telemetry_ms / 1000.0


# Power


@dataclass
class MeterModel:
    """
    Affine power model P = idle + coefficient * u + N(0, noise^2).

    Attributes:
        idle_watts (float): Draw at zero utilization.
        load_coefficient_watts (float): Additional draw at full utilization.
        noise_stddev_watts (float): Gaussian measurement noise.
        seed (int): Seed of the noise stream.
    """

    idle_watts: float = constants.DEFAULT_IDLE_WATTS
    load_coefficient_watts: float = constants.DEFAULT_LOAD_COEFFICIENT_WATTS
    noise_stddev_watts: float = constants.DEFAULT_NOISE_STDDEV_WATTS
    seed: int = 0
    rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        for name in ("idle_watts", "load_coefficient_watts", "noise_stddev_watts"):
            if getattr(self, name) < 0:
                raise TelemetryError(f"{name} must be >= 0")
        self.rng = np.random.default_rng(self.seed)


def simulate_power(utilization, model):
    """Watts drawn at CPU utilization `utilization` in [0, 1], clamped at 0."""
    if not 0.0 <= utilization <= 1.0:
        raise TelemetryError(f"utilization {utilization} outside [0, 1]")
    watts = model.idle_watts + model.load_coefficient_watts * utilization
    if model.noise_stddev_watts > 0:
        watts += model.rng.normal(0.0, model.noise_stddev_watts)
    return max(watts, 0.0)


class SimulatedMeter:
    def __init__(self, model, voltage_v=constants.USB_BUS_VOLTAGE):
        self.model = model
        self.voltage_v = voltage_v

    def read(self, utilization, timestamp_ms):
        watts = simulate_power(min(max(utilization, 0.0), 1.0), self.model)
        return PowerSample(
            timestamp_ms=timestamp_ms,
            voltage_v=self.voltage_v,
            current_a=watts / self.voltage_v,
            power_w=watts,
        )


class ReplayMeter:
    """Plays back a recorded power log cyclically, restamped with the current time."""

    def __init__(self, path):
        self._samples = read_power_log(path)
        if not self._samples:
            raise TelemetryError(f"replay log {path} has no samples")
        self._index = 0

    def read(self, utilization, timestamp_ms):
        recorded = self._samples[self._index % len(self._samples)]
        self._index += 1
        return PowerSample(
            timestamp_ms=timestamp_ms,
            voltage_v=recorded.voltage_v,
            current_a=recorded.current_a,
            power_w=recorded.power_w,
        )


class NullMeter:
    def read(self, utilization, timestamp_ms):
        return None


def build_meter(spec, seed):
    if spec.backend is MeterBackend.SIMULATED:
        return SimulatedMeter(
            MeterModel(
                idle_watts=spec.idle_watts,
                load_coefficient_watts=spec.load_coefficient_watts,
                noise_stddev_watts=spec.noise_stddev_watts,
                seed=seed,
            )
        )
    if spec.backend is MeterBackend.REPLAY:
        return ReplayMeter(spec.replay_path)
    return NullMeter()


def integrate_energy(log):
    """Joules under the power curve by the trapezoidal rule; 0 for fewer than two samples."""
    if len(log) < 2:
        return 0.0
    times = np.array([sample.timestamp_ms for sample in log], dtype=np.float64)
    if np.any(np.diff(times) <= 0):
        raise TelemetryError("power log timestamps must be strictly increasing")
    watts = np.array([sample.power_w for sample in log], dtype=np.float64)
    seconds = np.diff(times) / 1000.0
    return float(np.sum((watts[1:] + watts[:-1]) * seconds) / 2.0)


def write_power_log(log, path):
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(POWER_LOG_HEADER)
        for sample in log:
            writer.writerow(
                [
                    sample.timestamp_ms,
                    f"{sample.voltage_v:.9f}",
                    f"{sample.current_a:.9f}",
                    f"{sample.power_w:.9f}",
                ]
            )


def read_power_log(path):
    log = []
    with open(path, "r", newline="", encoding="utf-8") as handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if header is None:
            raise PowerLogError("missing header", line=1)
        if [column.strip() for column in header] != POWER_LOG_HEADER:
            raise PowerLogError(f"unexpected header {header}", line=1)
        for line_number, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(POWER_LOG_HEADER):
                raise PowerLogError(f"expected 4 columns, got {len(row)}", line=line_number)
            try:
                sample = PowerSample(
                    timestamp_ms=int(row[0]),
                    voltage_v=float(row[1]),
                    current_a=float(row[2]),
                    power_w=float(row[3]),
                )
            except ValidationError as e:
                error = e.errors()[0]
                where = format_loc(error["loc"]) or "row"
                raise PowerLogError(f"{where}: {error['msg']}", line=line_number) from e
            except ValueError as e:
                raise PowerLogError(str(e), line=line_number) from e
            if log and sample.timestamp_ms <= log[-1].timestamp_ms:
                raise PowerLogError("timestamps must be strictly increasing", line=line_number)
            log.append(sample)
    return log


# Resources


class OsResourceSource:
    """Host CPU and memory utilization from psutil."""

    def __init__(self):
        try:
            psutil.cpu_percent(interval=None)
        except (psutil.Error, OSError):
            pass

    def sample(self, timestamp_ms, phase):
        try:
            cpu = float(psutil.cpu_percent(interval=None))
            ram = float(psutil.virtual_memory().percent)
        except (psutil.Error, OSError) as e:
            logger.warning("resource sample missing error=%s", e)
            return ResourceSample(timestamp_ms=timestamp_ms, cpu_pct=0.0, ram_pct=0.0, missing=True)
        return ResourceSample(
            timestamp_ms=timestamp_ms,
            cpu_pct=min(max(cpu, 0.0), 100.0),
            ram_pct=min(max(ram, 0.0), 100.0),
        )


class SimulatedResourceSource:
    """
    Two-level CPU pattern: training draws from N(40, 5^2), every other phase
    from N(8, 2^2), both clipped to [0, 100]. RAM hovers around 33%.
    `noise_scale` multiplies every standard deviation (0 gives the means).
    """

    def __init__(self, seed, noise_scale=1.0):
        self._rng = np.random.default_rng(seed)
        self.noise_scale = noise_scale

    def sample(self, timestamp_ms, phase):
        if phase == TRAINING_PHASE:
            mean, std = constants.TRAINING_CPU_MEAN, constants.TRAINING_CPU_STDDEV
        else:
            mean, std = constants.IDLE_CPU_MEAN, constants.IDLE_CPU_STDDEV
        cpu = self._rng.normal(mean, std * self.noise_scale)
        ram = self._rng.normal(constants.RAM_MEAN, constants.RAM_STDDEV * self.noise_scale)
        return ResourceSample(
            timestamp_ms=timestamp_ms,
            cpu_pct=float(np.clip(cpu, 0.0, 100.0)),
            ram_pct=float(np.clip(ram, 0.0, 100.0)),
        )


def sample_resources(source, timestamp_ms, phase="idle"):
    return source.sample(timestamp_ms, phase)


class TelemetrySampler:
    """
    Periodic sampler of resources and power. A BackgroundScheduler job takes
    one sample per interval; the log append and snapshot reads share a lock,
    so the training thread is never involved.
    """

    def __init__(self, resources, meter, clock, interval_ms=constants.DEFAULT_SAMPLE_INTERVAL_MS):
        self.resources = resources
        self.meter = meter
        self.clock = clock
        self.interval_ms = interval_ms
        self.phase = "idle"
        self._lock = threading.Lock()
        self._power_log = []
        self._resource_log = []
        self._scheduler = None

    def set_phase(self, phase):
        self.phase = phase

    def sample_once(self):
        with self._lock:
            timestamp = self.clock.now_ms()
            if self._resource_log and timestamp <= self._resource_log[-1].timestamp_ms:
                timestamp = self._resource_log[-1].timestamp_ms + 1
            resource = sample_resources(self.resources, timestamp, self.phase)
            self._resource_log.append(resource)
            power = self.meter.read(resource.cpu_pct / 100.0, timestamp)
            if power is not None:
                self._power_log.append(power)
            return resource, power

    def every(self, interval_ms, func, job_id):
        """Registers another periodic job on the sampler's scheduler."""
        if self._scheduler is None:
            self._scheduler = BackgroundScheduler(daemon=True)
        self._scheduler.add_job(
            func,
            "interval",
            seconds=self.clock.real_seconds(interval_ms),
            id=job_id,
            max_instances=1,
            coalesce=True,
            next_run_time=datetime.now(),
        )

    def start(self):
        self.every(self.interval_ms, self.sample_once, "telemetry_sample")
        self._scheduler.start()
        logger.debug("telemetry sampler started interval_ms=%d", self.interval_ms)

    def stop(self):
        if self._scheduler is not None and self._scheduler.running:
            self._scheduler.shutdown(wait=True)
        self.sample_once()

    def latest(self):
        with self._lock:
            resource = self._resource_log[-1] if self._resource_log else None
            power = self._power_log[-1] if self._power_log else None
            return resource, power

    def power_log(self):
        with self._lock:
            return tuple(self._power_log)

    def resource_log(self):
        with self._lock:
            return tuple(self._resource_log)

    def averages(self):
        """(mean cpu_pct, mean ram_pct) over non-missing samples."""
        with self._lock:
            present = [sample for sample in self._resource_log if not sample.missing]
        if not present:
            return 0.0, 0.0
        return (
            float(np.mean([sample.cpu_pct for sample in present])),
            float(np.mean([sample.ram_pct for sample in present])),
        )
