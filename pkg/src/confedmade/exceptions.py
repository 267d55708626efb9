"""Exception hierarchy.

Everything raised on purpose by this package derives from ``ConfedmadeError`` so
the CLI can turn it into a machine-readable error record.
"""


class ConfedmadeError(Exception):
    """Base class for all package errors."""

    kind = "error"

    def to_record(self) -> dict:
        return {"error": self.kind, "type": type(self).__name__, "message": str(self)}


class DimensionError(ConfedmadeError, ValueError):
    kind = "dimension"

    def __init__(self, what, expected, actual):
        self.what = what
        self.expected = expected
        self.actual = actual
        super().__init__(f"{what}: expected shape {expected}, got {actual}")


class ValidationError(ConfedmadeError, ValueError):
    kind = "validation"


class NumericError(ConfedmadeError, FloatingPointError):
    kind = "numeric"

    def __init__(self, message, terms=None):
        self.terms = dict(terms or {})
        super().__init__(message)


class DeterminismError(ConfedmadeError, RuntimeError):
    kind = "determinism"


class ConfigurationError(ConfedmadeError, ValueError):
    kind = "configuration"


class UsageError(ConfedmadeError, RuntimeError):
    kind = "usage"


class ConsistencyError(ConfedmadeError, KeyError):
    kind = "consistency"

    def __str__(self):
        return str(self.args[0]) if self.args else ""


class ProtocolError(ConfedmadeError, RuntimeError):
    kind = "protocol"


class TopologyError(ConfedmadeError, ValueError):
    kind = "topology"


class AggregationError(ConfedmadeError, ValueError):
    kind = "aggregation"


class DataError(ConfedmadeError, ValueError):
    kind = "data"


class FormatError(ConfedmadeError, ValueError):
    kind = "format"

    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class ScenarioError(ConfedmadeError, RuntimeError):
    """An error raised inside ``run_scenario`` with (task, round, client) context."""

    kind = "scenario"

    def __init__(self, cause, task=None, round=None, client=None):
        self.cause = cause
        self.task = task
        self.round = round
        self.client = client
        super().__init__(
            f"task={task} round={round} client={client}: {type(cause).__name__}: {cause}"
        )

    def to_record(self):
        rec = super().to_record()
        rec.update(task=self.task, round=self.round, client=self.client,
                   cause=type(self.cause).__name__)
        return rec
