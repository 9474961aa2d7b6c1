"""Exception hierarchy shared by every module."""

from __future__ import annotations


class FedskewError(Exception):
    """Base class. ``field`` names the offending config key when known."""

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field

    def to_dict(self) -> dict:
        out = {"error": type(self).__name__, "message": str(self)}
        if self.field is not None:
            out["field"] = self.field
        return out


class ConfigError(FedskewError):
    pass


class ShapeError(FedskewError):
    pass


class DataError(FedskewError):
    pass


class EmptyClassError(DataError):
    pass


class FormatError(FedskewError):
    pass


class DomainError(FedskewError):
    pass


class PartitionError(FedskewError):
    pass


class ShareError(FedskewError):
    pass


class DegenerateReferenceError(FedskewError):
    pass


class BoundInputError(FedskewError):
    pass
