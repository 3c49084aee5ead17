"""
Exception hierarchy for the testbed. Every failure a caller is expected to
handle derives from FedmeshError so the CLI can map it to an exit code.
"""


class FedmeshError(Exception):
    """Base class for all testbed errors."""


# Scenario


class ScenarioError(FedmeshError):
    """Raised for any problem with a scenario document."""


class ScenarioParseError(ScenarioError):
    """
    The scenario text is not well-formed JSON.

    Attributes:
        line (int): 1-based line of the offending character.
        column (int): 1-based column of the offending character.
        position (int): 0-based character offset into the document.
    """

    def __init__(self, message, line=None, column=None, position=None):
        super().__init__(message)
        self.line = line
        self.column = column
        self.position = position


class MissingFieldError(ScenarioError):
    """A required field is absent. `field` holds its dotted path."""

    def __init__(self, field):
        super().__init__(f"missing required field '{field}'")
        self.field = field


class ScenarioValidationError(ScenarioError):
    """The document parsed but violates one or more scenario invariants."""

    def __init__(self, violations):
        self.violations = list(violations)
        summary = "; ".join(f"{v.path}: {v.message}" for v in self.violations)
        super().__init__(f"invalid scenario: {summary}")


# Topology and data


class TopologyError(FedmeshError):
    pass


class DatasetError(FedmeshError):
    pass


class IdxFormatError(DatasetError):
    """The buffer does not start with a supported IDX magic number."""


class TruncationError(FedmeshError):
    """A buffer or stream ended before its declared length."""


# Model


class IncompatibleArchitectureError(FedmeshError):
    """Parameters were produced for a different MLP architecture."""


class ShapeMismatchError(FedmeshError):
    pass


# Wire protocol


class ProtocolError(FedmeshError):
    pass


class UnknownMessageTypeError(ProtocolError):
    pass


class OversizeFrameError(ProtocolError):
    pass


class FrameTruncatedError(ProtocolError, TruncationError):
    pass


class PeerClosedError(FrameTruncatedError):
    """The stream ended cleanly on a frame boundary."""


class ConfigTimeoutError(FedmeshError):
    """No valid configuration arrived before the idle timeout."""


# Node


class NeighborTimeoutError(FedmeshError):
    """
    The round barrier timed out.

    Attributes:
        round (int): The round being waited on.
        missing (list[int]): Neighbors whose model never arrived.
    """

    def __init__(self, round_index, missing):
        self.round = round_index
        self.missing = sorted(missing)
        names = ", ".join(f"node {m}" for m in self.missing)
        super().__init__(f"round {round_index}: no model from {names}")


class IllegalTransitionError(FedmeshError):
    pass


# Telemetry


class TelemetryError(FedmeshError):
    pass


class PowerLogError(TelemetryError):
    """A power log file is malformed. `line` is the 1-based file line."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


# Controller


class RunStateError(FedmeshError):
    """An operation was attempted in a run state that does not allow it."""


class NotReadyError(RunStateError):
    pass


class UnknownNodeError(FedmeshError):
    pass


class DistributionError(FedmeshError):
    """Config distribution failed. `failed` maps node id to a diagnostic."""

    def __init__(self, failed):
        self.failed = dict(failed)
        names = ", ".join(f"node {k} ({v})" for k, v in sorted(self.failed.items()))
        super().__init__(f"config distribution aborted: {names}")


class SweepError(FedmeshError):
    pass


class RecordError(FedmeshError, ValueError):
    """A telemetry body is missing fields or carries out-of-range values."""
