"""Exception hierarchy shared by every leafvit module."""


class LeafVitError(Exception):
    """Base class for all errors raised by leafvit."""


class DimensionError(LeafVitError, ValueError):
    pass


class ConfigError(LeafVitError, ValueError):
    pass


class StatisticsError(LeafVitError, ValueError):
    pass


class ContractError(LeafVitError, ValueError):
    pass


class LabelError(LeafVitError, ValueError):
    pass


class IngestionError(LeafVitError):
    pass


class DecodeError(LeafVitError):
    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ArchiveError(LeafVitError):
    """Raised for unreadable, corrupted or inconsistent MVW1 archives."""

    def __init__(self, message: str, field: str | None = None, offset: int | None = None):
        parts = [message]
        if field is not None:
            parts.append(f"field={field}")
        if offset is not None:
            parts.append(f"offset={offset}")
        super().__init__(" ".join(parts) if len(parts) == 1 else f"{message} [{', '.join(parts[1:])}]")
        self.field = field
        self.offset = offset


class NumericError(LeafVitError, FloatingPointError):
    pass
