"""Post-analysis actions: ticket filing, email notification, routing.

The analysis outcome decides the route: confirmed bugs that represent a
new cluster get a tracker ticket, duplicates point at the ticket that
already covers them, everything else lands in one batched notification
email per request so a human can look.
"""

from __future__ import annotations

import os
import smtplib
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from email.message import EmailMessage
from enum import Enum
from typing import TYPE_CHECKING, Optional

import requests

from .errors import ActionError, ConfigError, StoreError
from .registry import OpenReport, ReportRegistry, TicketRef, utcnow

if TYPE_CHECKING:  # pragma: no cover
    from .pipeline import BugSummary

TRACKER_TOKEN_ENV = "BUGBLITZ_TRACKER_TOKEN"
CREATE_ISSUE_PATH = "/rest/api/2/issue"


class ActionKind(str, Enum):
    TICKET_FILED = "ticket_filed"
    DUPLICATE_OF = "duplicate_of"
    NOTIFIED = "notified"
    NONE = "none"


def select_action(
    is_bug: Optional[bool],
    digest_size: int,
    is_representative: bool = False,
    matched_existing: bool = False,
) -> ActionKind:
    """Route a resolved outcome to its post-analysis action."""
    if digest_size == 0 or not is_bug:
        return ActionKind.NOTIFIED
    if is_representative and not matched_existing:
        return ActionKind.TICKET_FILED
    return ActionKind.DUPLICATE_OF


@dataclass(frozen=True)
class TrackerConfig:
    base_url: str
    project_key: str
    issue_type: str = "Bug"
    retries: int = 2
    timeout: float = 10.0
    extra_fields: dict = field(default_factory=dict)


@dataclass(frozen=True)
class MailConfig:
    relay_host: str
    relay_port: int = 25
    sender: str = "triage@localhost"
    recipients: tuple[str, ...] = ()
    starttls: bool = False
    timeout: float = 10.0
    retries: int = 1


@dataclass(frozen=True)
class Notification:
    recipients: tuple[str, ...]
    subject: str
    body: str
    failure_ids: tuple[str, ...]

    def __post_init__(self):
        if not self.recipients:
            raise ValueError("a notification needs at least one recipient")
        if not self.subject:
            raise ValueError("a notification needs a non-empty subject")


class TrackerClient:
    """REST client for the bug tracker's create-issue endpoint."""

    def __init__(
        self,
        config: TrackerConfig,
        session: Optional[requests.Session] = None,
        token: Optional[str] = None,
        backoff_base: float = 0.25,
    ):
        self.config = config
        self._session = session or requests.Session()
        self._token = token
        self._backoff_base = backoff_base

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        token = self._token if self._token is not None else os.environ.get(TRACKER_TOKEN_ENV)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        return headers

    def post_ticket(self, summary: "BugSummary") -> TicketRef:
        fields = {
            "project": {"key": self.config.project_key},
            "issuetype": {"name": self.config.issue_type},
            "summary": summary.summary,
            "description": summary.description,
        }
        fields.update(self.config.extra_fields)
        url = self.config.base_url.rstrip("/") + CREATE_ISSUE_PATH
        attempts = self.config.retries + 1
        last_failure = "no attempt made"
        for attempt in range(attempts):
            if attempt:
                time.sleep(self._backoff_base * (2 ** (attempt - 1)))
            try:
                resp = self._session.post(
                    url, json={"fields": fields}, headers=self._headers(),
                    timeout=self.config.timeout,
                )
            except (requests.ConnectionError, requests.Timeout) as exc:
                last_failure = str(exc)
                continue
            if resp.status_code in (401, 403):
                raise ConfigError(
                    f"tracker rejected credentials (status {resp.status_code}); "
                    f"check {TRACKER_TOKEN_ENV}"
                )
            if resp.status_code >= 500:
                last_failure = f"status {resp.status_code}"
                continue
            if resp.status_code >= 400:
                raise ActionError(
                    f"tracker refused the issue (status {resp.status_code}): {resp.text[:300]}"
                )
            try:
                data = resp.json()
                key = data["key"]
            except (ValueError, KeyError, TypeError) as exc:
                raise ActionError(f"tracker response lacked an issue key: {exc}") from exc
            issue_url = data.get("self") or f"{self.config.base_url.rstrip('/')}/browse/{key}"
            return TicketRef(tracker_key=key, url=issue_url, created_at=utcnow())
        raise ActionError(f"tracker unreachable after {attempts} attempts: {last_failure}")


class Mailer:
    """SMTP notification sender; delivery failure is a status, not a crash."""

    def __init__(self, config: MailConfig):
        self.config = config

    def send_notification(self, notification: Notification) -> str:
        """Submit to the relay; returns 'delivered' or 'failed'."""
        msg = EmailMessage()
        msg["Subject"] = notification.subject
        msg["From"] = self.config.sender
        msg["To"] = ", ".join(notification.recipients)
        msg.set_content(notification.body)
        attempts = self.config.retries + 1
        for attempt in range(attempts):
            if attempt:
                time.sleep(0.1 * (2 ** (attempt - 1)))
            try:
                with smtplib.SMTP(
                    self.config.relay_host, self.config.relay_port, timeout=self.config.timeout
                ) as smtp:
                    if self.config.starttls:
                        smtp.starttls()
                    smtp.send_message(msg)
                return "delivered"
            except (OSError, smtplib.SMTPException):
                continue
        return "failed"


DRY_RUN_EPOCH = datetime(1970, 1, 1, tzinfo=timezone.utc)


class ActionRunner:
    """Executes the side effects the pipeline decides on.

    Without a configured tracker, ticket filing degrades to dry-run refs
    with a warning instead of failing the request; without mail
    configuration, notification is skipped the same way.
    """

    def __init__(
        self,
        tracker: Optional[TrackerClient] = None,
        mailer: Optional[Mailer] = None,
        registry: Optional[ReportRegistry] = None,
        dry_run: bool = False,
    ):
        self.tracker = tracker
        self.mailer = mailer
        self.registry = registry
        self.dry_run = dry_run
        self._dry_counter = 0

    def _dry_ref(self) -> TicketRef:
        self._dry_counter += 1
        return TicketRef(
            tracker_key=f"DRYRUN-{self._dry_counter}",
            url=f"https://dry-run.invalid/{self._dry_counter}",
            created_at=DRY_RUN_EPOCH,
        )

    def file_ticket(self, summary: "BugSummary") -> tuple[TicketRef, list[str]]:
        """Create a ticket and record it as an open report.

        A registry append failure after a successful create is reported
        as a desync warning; the ticket ref is still returned.
        """
        warnings: list[str] = []
        if self.dry_run:
            return self._dry_ref(), warnings
        if self.tracker is None:
            warnings.append("tracker not configured; issued a dry-run ticket ref")
            return self._dry_ref(), warnings
        ticket = self.tracker.post_ticket(summary)
        if self.registry is None:
            warnings.append(
                f"no report registry configured; ticket {ticket.tracker_key} will not "
                "suppress future duplicates"
            )
            return ticket, warnings
        try:
            self.registry.append(
                OpenReport(ticket=ticket, summary=summary.summary, description=summary.description)
            )
        except (StoreError, OSError) as exc:
            warnings.append(
                f"registry desync: ticket {ticket.tracker_key} created but not recorded ({exc})"
            )
        return ticket, warnings

    def notify(self, notification: Notification) -> tuple[str, list[str]]:
        if self.dry_run:
            return "skipped", []
        if self.mailer is None:
            return "skipped", ["mail not configured; notification skipped"]
        status = self.mailer.send_notification(notification)
        if status != "delivered":
            return status, [f"notification delivery failed for {notification.subject!r}"]
        return status, []
