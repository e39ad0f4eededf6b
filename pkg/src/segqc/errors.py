"""Exception types shared across the package."""


class SegQCError(Exception):
    """Base class for all errors raised by segqc."""


class NiftiParseError(SegQCError):
    """Malformed or unsupported NIfTI payload. `field` names the offending header field."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class NiftiWriteError(SegQCError):
    """Volume cannot be represented in the NIfTI-1 format."""


class EmptyMaskError(SegQCError):
    """Operation requires a nonempty mask."""


class NoLungFoundError(SegQCError):
    """Lung-mask heuristic found no candidate component."""


class DegenerateLabelsError(SegQCError):
    """Training labels contain fewer than two distinct classes."""


class ModelFormatError(SegQCError):
    """Model file is corrupt, tampered with, or has an unknown format version."""


class VersionMismatchError(SegQCError):
    """Model and feature extractor versions are incompatible."""


class StaleWindowError(SegQCError):
    """Report window_id is not strictly greater than the last ingested one."""


class SchemaError(SegQCError):
    """Wire payload violates the report schema."""

    def __init__(self, problems):
        super().__init__("; ".join(problems))
        self.problems = list(problems)


class EmptyWindowError(SegQCError):
    """Site aggregation was asked to summarize an empty batch."""
