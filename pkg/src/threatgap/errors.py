"""Exception hierarchy shared across the pipeline."""

from __future__ import annotations


class ThreatGapError(Exception):
    """Base class for all errors raised by this package."""


# core model
class EmptyValue(ThreatGapError, ValueError):
    pass


class MalformedIp(ThreatGapError, ValueError):
    pass


class UnknownTechnique(ThreatGapError, KeyError):
    pass


class RecordError(ThreatGapError, ValueError):
    """A serialized record failed to decode or violates a type invariant."""


# telemetry store
class SchemaViolation(ThreatGapError, ValueError):
    def __init__(self, message: str, row_number: int | None = None, column: str | None = None):
        super().__init__(message)
        self.row_number = row_number
        self.column = column


class DuplicateTable(ThreatGapError, ValueError):
    pass


class UnknownTable(ThreatGapError, KeyError):
    pass


class EmptyRowSet(ThreatGapError, ValueError):
    pass


# model gateway
class InputSchemaViolation(ThreatGapError, ValueError):
    pass


class BackendFailure(ThreatGapError, RuntimeError):
    pass


class FixtureMissing(BackendFailure):
    pass


class ContractDefinitionError(ThreatGapError, ValueError):
    pass


# timeline / investigation / alerting
class EmptySchedule(ThreatGapError, ValueError):
    pass


class OutOfRange(ThreatGapError, ValueError):
    pass


class SinkUnavailable(ThreatGapError, OSError):
    pass


# evaluation
class UnknownTemplate(ThreatGapError, KeyError):
    pass


class PhaseNotPresent(ThreatGapError, ValueError):
    pass


class WouldEmptyIncident(ThreatGapError, ValueError):
    pass


class EmptyTotal(ThreatGapError, ValueError):
    pass


# cli
class ConfigError(ThreatGapError):
    pass


class JobFailure(ThreatGapError):
    pass


class MissingReports(ThreatGapError):
    pass
