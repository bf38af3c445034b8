"""Exception types shared across the package."""


class SfcSimError(Exception):
    """Base class for all errors raised by sfcsim."""


class NoPath(SfcSimError):
    pass


class MalformedHeader(SfcSimError):
    pass


class PastEvent(SfcSimError):
    pass


class UnknownTarget(SfcSimError):
    pass


class InvalidSpec(SfcSimError):
    pass


class InsufficientResources(SfcSimError):
    """Raised when an instance or virtual link cannot be placed.

    ``item`` names the first instance or virtual link that could not be
    satisfied.
    """

    def __init__(self, message, item=None):
        super().__init__(message)
        self.item = item


class NotCommitted(SfcSimError):
    pass


class UnknownFlow(SfcSimError):
    pass


class Unrecoverable(SfcSimError):
    pass


class PresetPreconditionFailed(SfcSimError):
    pass


class ScenarioError(SfcSimError):
    """Base for scenario-file problems; carries the offending line and field."""

    def __init__(self, message, line=None, field=None, path=None):
        self.line = line
        self.field = field
        self.path = path
        where = []
        if path:
            where.append(str(path))
        if line is not None:
            where.append(f"line {line}")
        if field:
            where.append(f"field '{field}'")
        prefix = ", ".join(where)
        super().__init__(f"{prefix}: {message}" if prefix else message)


class ParseError(ScenarioError):
    pass


class SchemaError(ScenarioError):
    pass
