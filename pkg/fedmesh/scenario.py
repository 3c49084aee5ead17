"""
This module defines the experiment configuration that the controller hands to
every node: the participants, the overlay topology, the dataset, the MLP and
the telemetry settings. Documents are JSON with snake_case keys; the schema is
described in docs/scenario.md.
"""

import json
from dataclasses import dataclass
from enum import Enum
from typing import Annotated, Optional
from urllib.parse import urlparse

from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    ValidationError,
    ValidationInfo,
    field_validator,
    model_validator,
)

from . import constants
from .errors import MissingFieldError, ScenarioParseError, ScenarioValidationError
from .helper_functions import format_loc


class TopologyKind(str, Enum):
    FULLY = "fully"
    STAR = "star"
    RING = "ring"
    RANDOM = "random"


class DataSource(str, Enum):
    MNIST = "mnist"
    FASHION_MNIST = "fashion_mnist"
    SYNTHETIC = "synthetic"


class PartitionKind(str, Enum):
    IID = "iid"


class InitScheme(str, Enum):
    UNIFORM_HE = "uniform_he"


class MeterBackend(str, Enum):
    SIMULATED = "simulated"
    REPLAY = "replay"
    NONE = "none"


class AggregationWeights(str, Enum):
    EQUAL = "equal"
    SAMPLES = "samples"


Count = Annotated[int, Field(strict=True, ge=1)]
NodeId = Annotated[int, Field(strict=True, ge=0)]
Port = Annotated[int, Field(strict=True, ge=1, le=65535)]
Seed = Annotated[int, Field(strict=True, ge=0, le=constants.MASK64)]
NonNegative = Annotated[float, Field(strict=True, ge=0.0)]
Seconds = Annotated[float, Field(strict=True, gt=0.0)]


@dataclass(frozen=True)
class Violation:
    """A single violated invariant: dotted field path plus message."""

    path: str
    message: str

    def to_dict(self):
        return {"path": self.path, "message": self.message}


class _Spec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


class ParticipantSpec(_Spec):
    """
    One node of the federation.

    Attributes:
        node_id (int): Identity, 0..N-1.
        host (str): Address the node listens on.
        config_port (int): Port of the one-shot config server.
        peer_port (int): Port of the TCP listener for model exchange.
        metrics_endpoint (str): Base URL of the controller's ingest service.
    """

    node_id: NodeId
    host: str = Field(strict=True, min_length=1)
    config_port: Port
    peer_port: Port
    metrics_endpoint: str = Field(strict=True)

    @field_validator("metrics_endpoint")
    @classmethod
    def _http_url(cls, value):
        endpoint = urlparse(value)
        if endpoint.scheme not in ("http", "https") or not endpoint.netloc:
            raise ValueError("must be an http(s) URL")
        return value


class TopologySpec(_Spec):
    kind: TopologyKind
    edge_probability: Optional[float] = Field(default=None, gt=0.0, le=1.0)
    hub_id: Optional[NodeId] = None
    seed: Seed = 0

    @model_validator(mode="before")
    @classmethod
    def _kind_defaults(cls, data):
        if not isinstance(data, dict):
            return data
        kind = data.get("kind")
        if kind == TopologyKind.RANDOM and data.get("edge_probability") is None:
            data = dict(data, edge_probability=constants.DEFAULT_EDGE_PROBABILITY)
        elif kind == TopologyKind.STAR and data.get("hub_id") is None:
            data = dict(data, hub_id=0)
        return data


class SyntheticSpec(_Spec):
    n_samples: Count
    n_features: Count
    n_classes: Annotated[int, Field(strict=True, ge=2)]
    cluster_stddev: NonNegative

    @model_validator(mode="after")
    def _enough_samples(self):
        if self.n_samples < self.n_classes:
            raise ValueError("n_samples must be >= n_classes")
        return self


class DatasetSpec(_Spec):
    source: DataSource
    data_dir: str = "data"
    synthetic: Optional[SyntheticSpec] = Field(default=None, validate_default=True)
    partition: PartitionKind = PartitionKind.IID
    test_fraction: float = Field(default=constants.DEFAULT_TEST_FRACTION, gt=0.0, lt=1.0)

    @field_validator("synthetic")
    @classmethod
    def _present_iff_synthetic(cls, synthetic, info: ValidationInfo):
        source = info.data.get("source")
        if source is DataSource.SYNTHETIC and synthetic is None:
            raise ValueError("required when source is synthetic")
        if source not in (None, DataSource.SYNTHETIC) and synthetic is not None:
            raise ValueError("only allowed when source is synthetic")
        return synthetic

    @property
    def n_features(self):
        if self.synthetic is not None:
            return self.synthetic.n_features
        return constants.IMAGE_INPUT_DIM

    @property
    def n_classes(self):
        if self.synthetic is not None:
            return self.synthetic.n_classes
        return constants.IMAGE_CLASSES


class ModelSpec(_Spec):
    input_dim: Count
    hidden_dims: tuple[Count, ...] = ()
    output_dim: Count
    init_scheme: InitScheme = InitScheme.UNIFORM_HE

    def layer_shapes(self):
        """(fan_in, fan_out) for every dense layer, input to output."""
        dims = [self.input_dim, *self.hidden_dims, self.output_dim]
        return list(zip(dims[:-1], dims[1:]))

    def param_count(self):
        return sum(fan_in * fan_out + fan_out for fan_in, fan_out in self.layer_shapes())

    def to_dict(self):
        return self.model_dump(mode="json")


class MeterSpec(_Spec):
    backend: MeterBackend = MeterBackend.SIMULATED
    idle_watts: NonNegative = constants.DEFAULT_IDLE_WATTS
    load_coefficient_watts: NonNegative = constants.DEFAULT_LOAD_COEFFICIENT_WATTS
    noise_stddev_watts: NonNegative = constants.DEFAULT_NOISE_STDDEV_WATTS
    sample_interval_ms: Count = constants.DEFAULT_SAMPLE_INTERVAL_MS
    replay_path: Optional[str] = Field(default=None, validate_default=True)

    @field_validator("replay_path")
    @classmethod
    def _present_iff_replay(cls, replay_path, info: ValidationInfo):
        backend = info.data.get("backend")
        if backend is MeterBackend.REPLAY and not replay_path:
            raise ValueError("required for the replay backend")
        if backend not in (None, MeterBackend.REPLAY) and replay_path is not None:
            raise ValueError("only allowed for the replay backend")
        return replay_path


def _default_model_document(dataset):
    """The model a scenario gets when it names none, read off the raw dataset section."""
    synthetic = dataset.get("synthetic") if isinstance(dataset, dict) else None
    if isinstance(synthetic, dict) and dataset.get("source") == DataSource.SYNTHETIC:
        return {
            "input_dim": synthetic.get("n_features"),
            "hidden_dims": list(constants.SYNTHETIC_HIDDEN_DIMS),
            "output_dim": synthetic.get("n_classes"),
        }
    return {
        "input_dim": constants.IMAGE_INPUT_DIM,
        "hidden_dims": list(constants.IMAGE_HIDDEN_DIMS),
        "output_dim": constants.IMAGE_CLASSES,
    }


class ScenarioConfig(_Spec):
    """
    Full experiment description distributed to every node.

    Values are immutable once constructed and safe to share between threads.
    Field types and ranges are checked field by field; the invariants that
    span several fields are checked last and raise ScenarioValidationError.
    """

    scenario_name: str = Field(strict=True, min_length=1)
    participants: tuple[ParticipantSpec, ...] = Field(min_length=1)
    topology: TopologySpec
    dataset: DatasetSpec
    model: ModelSpec
    rounds: Count = constants.DEFAULT_ROUNDS
    local_epochs: Count = constants.DEFAULT_LOCAL_EPOCHS
    learning_rate: float = Field(default=constants.DEFAULT_LEARNING_RATE, strict=True, gt=0.0)
    batch_size: Count = constants.DEFAULT_BATCH_SIZE
    metric_interval_ms: Count = constants.DEFAULT_METRIC_INTERVAL_MS
    power_meter: MeterSpec = Field(default_factory=MeterSpec)
    master_seed: Seed = constants.DEFAULT_MASTER_SEED
    aggregation_weights: AggregationWeights = AggregationWeights.EQUAL
    neighbor_timeout_s: Seconds = constants.DEFAULT_NEIGHBOR_TIMEOUT_S
    connect_timeout_s: Seconds = constants.DEFAULT_CONNECT_TIMEOUT_S

    @model_validator(mode="before")
    @classmethod
    def _default_model(cls, data):
        if isinstance(data, dict) and data.get("model") is None:
            data = dict(data, model=_default_model_document(data.get("dataset")))
        return data

    @model_validator(mode="after")
    def _cross_field_invariants(self):
        violations = []
        _check_participants(self, violations)
        _check_topology(self, violations)
        _check_model(self, violations)
        if violations:
            raise ScenarioValidationError(violations)
        return self

    @property
    def n_nodes(self):
        return len(self.participants)

    def participant(self, node_id):
        for participant in self.participants:
            if participant.node_id == node_id:
                return participant
        raise KeyError(node_id)

    def node_seed(self, node_id):
        return derive_node_seed(self.master_seed, node_id)


class ConfigAssignment(BaseModel):
    """A scenario as delivered to one node, with the node's identity."""

    model_config = ConfigDict(frozen=True)

    scenario: ScenarioConfig
    node_id: NodeId
    node_seed: Seed

    @model_validator(mode="before")
    @classmethod
    def _derived_seed(cls, data):
        if isinstance(data, dict) and data.get("node_seed") is None:
            scenario, node_id = data.get("scenario"), data.get("node_id")
            if isinstance(scenario, ScenarioConfig) and type(node_id) is int:
                data = dict(data, node_seed=scenario.node_seed(node_id))
        return data

    @field_validator("node_id")
    @classmethod
    def _is_participant(cls, node_id, info: ValidationInfo):
        scenario = info.data.get("scenario")
        if scenario is not None and node_id not in {p.node_id for p in scenario.participants}:
            raise ValueError(f"{node_id} is not a participant")
        return node_id


def derive_node_seed(master_seed, node_id):
    return (master_seed ^ (node_id + 1)) & constants.MASK64


# Invariants spanning several fields


def _check_participants(cfg, out):
    seen_ids = set()
    duplicate = False
    for index, participant in enumerate(cfg.participants):
        if participant.node_id in seen_ids:
            duplicate = True
            out.append(
                Violation(
                    f"participants[{index}].node_id", f"duplicate node_id {participant.node_id}"
                )
            )
        seen_ids.add(participant.node_id)
    if not duplicate and sorted(seen_ids) != list(range(len(cfg.participants))):
        out.append(Violation("participants", "node ids must be exactly 0..N-1"))

    endpoints = {}
    for index, participant in enumerate(cfg.participants):
        for port_name in ("config_port", "peer_port"):
            key = (participant.host, getattr(participant, port_name))
            path = f"participants[{index}].{port_name}"
            if key in endpoints:
                out.append(
                    Violation(path, f"address {key[0]}:{key[1]} already used by {endpoints[key]}")
                )
            else:
                endpoints[key] = path


def _check_topology(cfg, out):
    topology = cfg.topology
    n = len(cfg.participants)
    if topology.hub_id is not None and topology.hub_id >= n:
        out.append(Violation("topology.hub_id", "hub_id out of range"))
    if topology.kind is TopologyKind.RING and n < 3:
        out.append(Violation("topology.kind", "ring needs at least 3 participants"))


def _check_model(cfg, out):
    if cfg.model.input_dim != cfg.dataset.n_features:
        out.append(
            Violation("model.input_dim", f"must equal n_features ({cfg.dataset.n_features})")
        )
    if cfg.model.output_dim != cfg.dataset.n_classes:
        out.append(
            Violation("model.output_dim", f"must equal n_classes ({cfg.dataset.n_classes})")
        )


# Parsing

_ASSIGNMENT_KEYS = ("node_id", "node_seed")


def _violations(exc):
    return [Violation(format_loc(error["loc"]), error["msg"]) for error in exc.errors()]


def _decode(text):
    if isinstance(text, (bytes, bytearray)):
        try:
            text = text.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ScenarioParseError(
                f"document is not UTF-8: {exc.reason}", position=exc.start
            ) from exc
    try:
        document = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioParseError(
            f"malformed JSON at line {exc.lineno} column {exc.colno}: {exc.msg}",
            line=exc.lineno,
            column=exc.colno,
            position=exc.pos,
        ) from exc
    if not isinstance(document, dict):
        raise ScenarioParseError("scenario document must be a JSON object", 1, 1, 0)
    return document


def scenario_from_dict(document):
    """
    Builds a ScenarioConfig from a decoded JSON object and validates it.
    Raises MissingFieldError for the first absent required field and
    ScenarioValidationError for everything else.
    """
    body = {key: value for key, value in document.items() if key not in _ASSIGNMENT_KEYS}
    try:
        return ScenarioConfig.model_validate(body)
    except ValidationError as exc:
        for error in exc.errors():
            if error["type"] == "missing":
                raise MissingFieldError(format_loc(error["loc"])) from exc
        raise ScenarioValidationError(_violations(exc)) from exc


def parse_scenario(text):
    """
    Parses a UTF-8 JSON scenario document into a validated ScenarioConfig.
    Unspecified optional fields take their documented defaults.
    """
    return scenario_from_dict(_decode(text))


def parse_assignment(text, bound_port=None):
    """
    Parses a /config body: a scenario document optionally carrying the
    receiving node's `node_id` and `node_seed`. Without an explicit node_id
    the node is identified by the config port it is bound to.
    """
    document = _decode(text)
    cfg = scenario_from_dict(document)
    node_id = document.get("node_id")
    if node_id is None:
        matches = [p.node_id for p in cfg.participants if p.config_port == bound_port]
        if len(matches) != 1:
            raise ScenarioValidationError(
                [Violation("node_id", "absent and not derivable from the bound config port")]
            )
        node_id = matches[0]
    try:
        return ConfigAssignment(scenario=cfg, node_id=node_id, node_seed=document.get("node_seed"))
    except ValidationError as exc:
        raise ScenarioValidationError(_violations(exc)) from exc


# Serialization


def scenario_to_dict(cfg):
    return cfg.model_dump(mode="json", exclude_none=True)


def serialize_scenario(cfg, indent=2):
    return json.dumps(scenario_to_dict(cfg), indent=indent)


def assignment_body(cfg, node_id):
    """The /config body for one participant: the scenario plus its identity."""
    document = scenario_to_dict(cfg)
    document["node_id"] = node_id
    document["node_seed"] = cfg.node_seed(node_id)
    return document


def with_overrides(cfg, **changes):
    """A copy of `cfg` with `changes` applied as is; run validate_scenario to check it."""
    return cfg.model_copy(update=changes)


def validate_scenario(cfg):
    """
    Returns every violated invariant of `cfg` as a list of Violation, in a
    fixed order: field checks in declaration order, then the checks spanning
    participants, topology and model. An empty list means the configuration
    is valid.
    """
    try:
        ScenarioConfig.model_validate(cfg.model_dump())
    except ValidationError as exc:
        return _violations(exc)
    except ScenarioValidationError as exc:
        return exc.violations
    return []


def load_scenario(path):
    with open(path, "r", encoding="utf-8") as handle:
        return parse_scenario(handle.read())
