"""Exception types shared across the pipeline.

Every error that crosses a module boundary is a subclass of :class:`AuditError`
so callers can catch one family.  The CLI maps the three ``*ExitError``
subclasses onto its documented exit codes.
"""

from __future__ import annotations

__all__ = [
    "AuditError",
    "ConfigError",
    "MissingToolError",
    "StageOrderError",
    "TransportError",
    "ServiceParseError",
    "MissingArticleError",
    "RecordRejectedError",
    "XmlParseError",
    "InvalidNotebookError",
    "UnparseableDepsError",
    "IntegrityGateError",
    "InconsistentStageDataError",
]


class AuditError(Exception):
    """Base class for all pipeline errors."""


class ConfigError(AuditError):
    """Invalid or contradictory configuration (CLI exit code 2)."""


class MissingToolError(AuditError):
    """A required external tool (git, env manager) is absent (exit code 3)."""


class StageOrderError(AuditError):
    """A stage was invoked before its prerequisites ran (exit code 4)."""


class TransportError(AuditError):
    """Network-level failure talking to a remote service.

    Retryable: the caller may re-issue the request after backoff.
    """

    retryable = True


class ServiceParseError(AuditError):
    """A service answered, but the payload was not what we expected."""

    def __init__(self, message: str, payload_excerpt: str = ""):
        super().__init__(message)
        self.payload_excerpt = payload_excerpt[:500]


class MissingArticleError(AuditError):
    """The archive has no full text for the requested article id."""


class RecordRejectedError(AuditError):
    """A parsed record is missing a required field and cannot be stored."""


class XmlParseError(ServiceParseError):
    """Full-text XML is not well-formed.

    ``offset`` is a (line, column) pair when the underlying parser provides
    one, so truncated payloads can be reported with a position.
    """

    def __init__(self, message: str, offset: tuple[int, int] | None = None):
        super().__init__(message)
        self.offset = offset


class InvalidNotebookError(AuditError):
    """Notebook file is not parseable as a notebook document."""


class UnparseableDepsError(AuditError):
    """A dependency file exists but cannot be read statically."""


class IntegrityGateError(AuditError):
    """A record failed its type invariants at the store boundary.

    ``constraint`` names the violated invariant, e.g. ``"orcid-checksum"``.
    """

    def __init__(self, constraint: str, message: str):
        super().__init__(f"{constraint}: {message}")
        self.constraint = constraint


class InconsistentStageDataError(AuditError):
    """Stage outputs contradict each other (e.g. diffs without an execution)."""
