"""Exception hierarchy for the triage toolkit.

Everything raised on purpose derives from TriageError so callers can
catch one base class at service boundaries.
"""

from __future__ import annotations


class TriageError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(TriageError):
    """Bad or missing operator configuration (files, credentials, patterns)."""


class RequestValidationError(TriageError):
    """A triage request document violates the request schema.

    ``details`` lists one human-readable diagnostic per offending entry.
    """

    def __init__(self, message: str, details: list[str] | None = None):
        super().__init__(message)
        self.details = list(details or [])


class TemplateError(TriageError):
    """Prompt template construction or rendering failed."""


class BackendError(TriageError):
    """Chat-completion backend returned a non-success response."""

    def __init__(self, message: str, status: int | None = None, body: str = ""):
        super().__init__(message)
        self.status = status
        self.body = body


class BackendUnavailableError(BackendError):
    """Transport failed on every attempt; the request may be retried later."""


class BackendProtocolError(BackendError):
    """The backend answered with a body the client cannot interpret."""


class SummarizationError(TriageError):
    """The summarization chain produced no usable summary after retrying.

    Carries the raw final completion so the failure can be inspected.
    """

    def __init__(self, message: str, raw_completion: str = ""):
        super().__init__(message)
        self.raw_completion = raw_completion


class ActionError(TriageError):
    """A post-analysis action (ticket, mail) failed permanently."""


class StoreError(TriageError):
    """The open-report store is unreadable or corrupt."""


class NotFoundError(TriageError):
    """A referenced entity (job id, ticket key) does not exist."""
