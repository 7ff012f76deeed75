"""The four-stage analysis pipeline.

Per failure: root error analysis picks the single root-cause record out
of the digest, diagnosis classifies it bug vs. environment issue, and
confirmed bugs get a summary via a three-turn prompt chain. Duplicate
detection then runs once per request over all produced summaries and
decides which summaries become tickets.

Each stage receives exactly one task: diagnosis never sees the full
error list, and summarization never decides bug-ness. Parsing of model
output is total: any completion yields a usable result, and an
unparseable diagnosis counts as a bug so that no report is silently
dropped.
"""

from __future__ import annotations

import re
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import nullcontext
from dataclasses import dataclass, field
from json import JSONDecodeError, loads as json_loads
from typing import Callable, Mapping, Optional, Sequence

from .action import ActionKind, ActionRunner, Notification, select_action
from .errors import (
    ActionError,
    BackendUnavailableError,
    ConfigError,
    SummarizationError,
    TriageError,
)
from .ingestion import ErrorDigest, ErrorRecord, TriageRequest, extract_errors
from .llm import ChatMessage, ModelProfile, Submodule, validate_profiles
from .registry import OpenReport, ReportRegistry, TicketRef
from .templates import (
    DIAGNOSIS_TEMPLATE_ID,
    DUPLICATE_TEMPLATE_ID,
    ROOT_ERROR_TEMPLATE_ID,
    SUMMARIZE_CHAIN_TEMPLATE_ID,
    TemplateSet,
    render,
)

DEFAULT_MAX_WORKERS = 4
SUMMARY_WORD_LIMIT = 10

_ROOT_INDEX_RE = re.compile(r"(?<![\w.])(\d+)(?![\w.])")
_FINAL_ANSWER_RE = re.compile(r"final\s+answer\s*:\s*['\"]?(true|false)", re.IGNORECASE)
_YES_NO_RE = re.compile(r"\b(yes|no)\b", re.IGNORECASE)
_JSON_FENCE_RE = re.compile(r"```json\s*(.*?)\s*```", re.DOTALL | re.IGNORECASE)


@dataclass(frozen=True)
class RootCauseFinding:
    failure_id: str
    chosen_index: int
    chosen_record: ErrorRecord
    raw_answer: str
    fallback_used: bool


@dataclass(frozen=True)
class DiagnosisVerdict:
    failure_id: str
    is_bug: bool
    reasoning: str
    raw_answer: str


@dataclass(frozen=True)
class BugSummary:
    failure_id: str
    summary: str
    description: str
    summary_word_count: int

    @classmethod
    def create(cls, failure_id: str, summary: str, description: str) -> "BugSummary":
        return cls(failure_id, summary, description, len(summary.split()))


@dataclass(frozen=True)
class DuplicateCluster:
    representative: str
    members: tuple[str, ...]
    matched_existing: Optional[OpenReport] = None


@dataclass
class TriageOutcome:
    failure_id: str
    digest_size: int = 0
    root_cause: Optional[RootCauseFinding] = None
    verdict: Optional[DiagnosisVerdict] = None
    summary: Optional[BugSummary] = None
    cluster: Optional[str] = None
    action: ActionKind = ActionKind.NONE
    action_ref: Optional[str] = None
    ticket: Optional[TicketRef] = None
    error: Optional[str] = None
    warnings: list[str] = field(default_factory=list)
    stage_timings: dict[str, float] = field(default_factory=dict)

    def to_dict(self, include_timings: bool = True) -> dict:
        doc = {
            "failure_id": self.failure_id,
            "digest_size": self.digest_size,
            "root_cause": None,
            "verdict": None,
            "summary": None,
            "cluster": self.cluster,
            "action": self.action.value,
            "action_ref": self.action_ref,
            "ticket": self.ticket.to_dict() if self.ticket else None,
            "error": self.error,
            "warnings": list(self.warnings),
        }
        if self.root_cause:
            doc["root_cause"] = {
                "chosen_index": self.root_cause.chosen_index,
                "matched_line": self.root_cause.chosen_record.matched_line,
                "pattern_id": self.root_cause.chosen_record.pattern_id,
                "line_number": self.root_cause.chosen_record.line_number,
                "fallback_used": self.root_cause.fallback_used,
            }
        if self.verdict:
            doc["verdict"] = {"is_bug": self.verdict.is_bug, "reasoning": self.verdict.reasoning}
        if self.summary:
            doc["summary"] = {
                "summary": self.summary.summary,
                "description": self.summary.description,
                "summary_word_count": self.summary.summary_word_count,
            }
        if include_timings:
            doc["stage_timings"] = {k: round(v, 6) for k, v in self.stage_timings.items()}
        return doc


# ---------------------------------------------------------------------------
# Output parsers (total functions; fallbacks preserve recall)
# ---------------------------------------------------------------------------

def parse_root_index(text: str) -> Optional[int]:
    """First standalone integer in a completion, if any."""
    match = _ROOT_INDEX_RE.search(text)
    return int(match.group(1)) if match else None


def parse_final_answer(text: str) -> Optional[bool]:
    """Last 'Final answer: True|False' token, if any."""
    matches = list(_FINAL_ANSWER_RE.finditer(text))
    if not matches:
        return None
    return matches[-1].group(1).lower() == "true"


def parse_yes_no(text: str) -> Optional[bool]:
    matches = list(_YES_NO_RE.finditer(text))
    if not matches:
        return None
    return matches[-1].group(1).lower() == "yes"


def extract_summary_payload(text: str) -> tuple[str, str]:
    """Pull {summary, description} out of the last fenced json block.

    Accepts only a flat two-key object with non-empty string values;
    anything else raises ValueError so the caller can retry the chain.
    """
    blocks = _JSON_FENCE_RE.findall(text)
    if not blocks:
        raise ValueError("no fenced json block in completion")
    try:
        payload = json_loads(blocks[-1])
    except JSONDecodeError as exc:
        raise ValueError(f"fenced block is not valid JSON: {exc}") from exc
    if not isinstance(payload, dict):
        raise ValueError("fenced block is not a JSON object")
    if set(payload) != {"summary", "description"}:
        raise ValueError(f"expected exactly the keys summary/description, got {sorted(payload)}")
    summary, description = payload["summary"], payload["description"]
    if not isinstance(summary, str) or not isinstance(description, str):
        raise ValueError("summary and description must be plain strings")
    if not summary.strip() or not description.strip():
        raise ValueError("summary and description must be non-empty")
    return summary, description


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------

def _templates(templates: Optional[TemplateSet]) -> TemplateSet:
    return templates if templates is not None else TemplateSet()


def format_error_list(digest: ErrorDigest) -> str:
    return "\n".join(f"[{r.index}] {r.matched_line}" for r in digest.records)


def analyze_root_error(
    digest: ErrorDigest,
    backend,
    profile: ModelProfile,
    templates: Optional[TemplateSet] = None,
) -> RootCauseFinding:
    """Pick the root-cause record from a non-empty digest.

    A single-candidate digest is a forced choice and skips the backend.
    When the completion holds no usable index, the deepest (last) record
    wins, since stack traces usually end at the proximate failure.
    """
    if not digest.records:
        raise ValueError("cannot analyze an empty digest")
    if len(digest.records) == 1:
        return RootCauseFinding(digest.failure_id, 1, digest.records[0], "", False)
    template = _templates(templates).get(ROOT_ERROR_TEMPLATE_ID)
    messages = render(template, {"error_list": format_error_list(digest)})
    result = backend.complete(messages, profile)
    index = parse_root_index(result.text)
    if index is None or not 1 <= index <= len(digest.records):
        return RootCauseFinding(
            digest.failure_id, len(digest.records), digest.records[-1], result.text, True
        )
    return RootCauseFinding(digest.failure_id, index, digest.records[index - 1], result.text, False)


def diagnose(
    finding: RootCauseFinding,
    backend,
    profile: ModelProfile,
    templates: Optional[TemplateSet] = None,
) -> DiagnosisVerdict:
    """Classify the root-cause error as bug or environment issue.

    The prompt carries the chosen record only, never the full digest.
    A completion without a final-answer token counts as a bug.
    """
    template = _templates(templates).get(DIAGNOSIS_TEMPLATE_ID)
    messages = render(template, {"error_line": finding.chosen_record.matched_line})
    result = backend.complete(messages, profile)
    verdict = parse_final_answer(result.text)
    if verdict is None:
        return DiagnosisVerdict(finding.failure_id, True, "fallback", result.text)
    matches = list(_FINAL_ANSWER_RE.finditer(result.text))
    reasoning = result.text[: matches[-1].start()].strip() or result.text.strip()
    return DiagnosisVerdict(finding.failure_id, verdict, reasoning, result.text)


def _run_chain(
    chain_turns: Sequence[ChatMessage], backend, profile: ModelProfile
) -> str:
    conversation: list[ChatMessage] = []
    text = ""
    for turn in chain_turns:
        conversation.append(turn)
        result = backend.complete(conversation, profile)
        text = result.text
        conversation.append(ChatMessage("assistant", text or "(empty)"))
    return text


def summarize(
    finding: RootCauseFinding,
    backend,
    profile: ModelProfile,
    templates: Optional[TemplateSet] = None,
) -> BugSummary:
    """Produce the {summary, description} pair via the prompt chain.

    The chain is retried in full once: a structurally bad payload twice
    in a row raises SummarizationError; an over-long summary is accepted
    on the second pass rather than truncated.
    """
    template = _templates(templates).get(SUMMARIZE_CHAIN_TEMPLATE_ID)
    chain_turns = render(
        template,
        {
            "error_content": finding.chosen_record.context,
            "error_line": finding.chosen_record.matched_line,
        },
    )
    final_text = ""
    for attempt in (0, 1):
        final_text = _run_chain(chain_turns, backend, profile)
        try:
            summary_text, description = extract_summary_payload(final_text)
        except ValueError as exc:
            if attempt == 1:
                raise SummarizationError(
                    f"no usable summary after retry: {exc}", raw_completion=final_text
                ) from exc
            continue
        summary = BugSummary.create(finding.failure_id, summary_text, description)
        if summary.summary_word_count <= SUMMARY_WORD_LIMIT or attempt == 1:
            return summary
    raise AssertionError("unreachable")  # pragma: no cover


def _normalized_report_key(summary: str, description: str) -> str:
    return " ".join(summary.lower().split()) + "\n" + " ".join(description.lower().split())


def detect_duplicates(
    summaries: Sequence[BugSummary],
    open_reports: Sequence[OpenReport],
    backend,
    profile: ModelProfile,
    templates: Optional[TemplateSet] = None,
    on_warning: Optional[Callable[[str, str], None]] = None,
) -> list[DuplicateCluster]:
    """Partition a request's bug summaries into duplicate clusters.

    Byte-identical reports (after lowercasing and whitespace collapse)
    merge without model calls. Remaining candidates are compared, in
    ascending failure_id order, against each accepted cluster
    representative and then each open report; the first YES wins. A
    failed or unparseable comparison counts as NO: a duplicate ticket
    is recoverable, a dropped bug is not. ``on_warning`` receives
    (failure_id, message) for every degraded comparison.
    """
    warn = on_warning or (lambda _fid, _msg: None)
    template = _templates(templates).get(DUPLICATE_TEMPLATE_ID)

    def same(existing_summary: str, existing_description: str, candidate: BugSummary) -> bool:
        try:
            messages = render(
                template,
                {
                    "summary_a": existing_summary,
                    "description_a": existing_description,
                    "summary_b": candidate.summary,
                    "description_b": candidate.description,
                },
            )
            verdict = parse_yes_no(backend.complete(messages, profile).text)
        except TriageError as exc:
            warn(candidate.failure_id, f"duplicate comparison failed, assuming NO: {exc}")
            return False
        if verdict is None:
            warn(candidate.failure_id, "unparseable duplicate verdict, assuming NO")
            return False
        return verdict

    ordered = sorted(summaries, key=lambda s: s.failure_id)
    group_order: list[str] = []
    groups: dict[str, list[BugSummary]] = {}
    for item in ordered:
        key = _normalized_report_key(item.summary, item.description)
        if key not in groups:
            groups[key] = []
            group_order.append(key)
        groups[key].append(item)

    reps: list[BugSummary] = []
    members_of: list[list[str]] = []
    matched: list[Optional[OpenReport]] = []
    for key in group_order:
        group = groups[key]
        candidate = group[0]
        placed = False
        for i, rep in enumerate(reps):
            if same(rep.summary, rep.description, candidate):
                members_of[i].extend(s.failure_id for s in group)
                placed = True
                break
        if placed:
            continue
        existing = None
        for report in open_reports:
            if same(report.summary, report.description, candidate):
                existing = report
                break
        reps.append(candidate)
        members_of.append([s.failure_id for s in group])
        matched.append(existing)

    clusters = []
    for i, rep in enumerate(reps):
        ids = tuple(sorted(members_of[i]))
        clusters.append(DuplicateCluster(representative=ids[0], members=ids, matched_existing=matched[i]))
    return clusters


# ---------------------------------------------------------------------------
# Request orchestration
# ---------------------------------------------------------------------------

def run_pipeline(
    request: TriageRequest,
    registry: Sequence,
    backend,
    profiles: Mapping[Submodule, ModelProfile],
    report_registry: Optional[ReportRegistry] = None,
    *,
    templates: Optional[TemplateSet] = None,
    actions: Optional[ActionRunner] = None,
    max_workers: int = DEFAULT_MAX_WORKERS,
) -> list[TriageOutcome]:
    """Triage every failure in a request and execute the chosen actions.

    Outcomes come back in submission order. A stage failure marks its
    own outcome as errored without touching siblings; only a backend
    declared unavailable aborts the whole request (callers may retry).
    """
    validate_profiles(profiles)
    templates = _templates(templates)
    if request.options.dry_run or actions is None:
        actions = ActionRunner(
            registry=actions.registry if actions else report_registry, dry_run=True
        )

    digests: dict[str, ErrorDigest] = {}
    abort: list[BaseException] = []

    def process(failure) -> TriageOutcome:
        outcome = TriageOutcome(failure_id=failure.failure_id)
        started = time.monotonic()
        digest = extract_errors(failure, registry)
        outcome.stage_timings["extract"] = time.monotonic() - started
        outcome.digest_size = len(digest)
        outcome.warnings.extend(digest.provenance)
        digests[failure.failure_id] = digest
        if not digest.records:
            outcome.action = ActionKind.NOTIFIED
            return outcome
        try:
            started = time.monotonic()
            outcome.root_cause = analyze_root_error(
                digest, backend, profiles[Submodule.ROOT_ERROR_ANALYSIS], templates
            )
            outcome.stage_timings["root_analysis"] = time.monotonic() - started

            started = time.monotonic()
            outcome.verdict = diagnose(
                outcome.root_cause, backend, profiles[Submodule.BUG_DIAGNOSIS], templates
            )
            outcome.stage_timings["diagnosis"] = time.monotonic() - started
            if not outcome.verdict.is_bug:
                outcome.action = ActionKind.NOTIFIED
                return outcome

            started = time.monotonic()
            try:
                outcome.summary = summarize(
                    outcome.root_cause, backend, profiles[Submodule.BUG_SUMMARIZATION], templates
                )
            except SummarizationError as exc:
                outcome.action = ActionKind.NOTIFIED
                outcome.warnings.append(
                    f"summarization failed; raw completion: {exc.raw_completion[:500]!r}"
                )
            finally:
                outcome.stage_timings["summarization"] = time.monotonic() - started
        except BackendUnavailableError as exc:
            abort.append(exc)
            outcome.error = str(exc)
            outcome.action = ActionKind.NONE
        except TriageError as exc:
            outcome.error = str(exc)
            outcome.action = ActionKind.NONE
        return outcome

    failures = list(request.failures)
    if max_workers > 1 and len(failures) > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            outcomes = list(pool.map(process, failures))
    else:
        outcomes = [process(f) for f in failures]
    if abort:
        raise abort[0]

    by_id = {o.failure_id: o for o in outcomes}
    summaries = [o.summary for o in outcomes if o.summary is not None]

    use_registry = report_registry is not None and request.options.dedup_against_registry
    guard = report_registry.dedup_lock if use_registry else nullcontext()
    with guard:
        open_reports = report_registry.open_reports() if use_registry else []
        dedup_started = time.monotonic()
        clusters = detect_duplicates(
            summaries,
            open_reports,
            backend,
            profiles[Submodule.DUPLICATE_DETECTION],
            templates,
            on_warning=lambda fid, msg: by_id[fid].warnings.append(msg),
        )
        dedup_elapsed = time.monotonic() - dedup_started
        for cluster in clusters:
            for member in cluster.members:
                by_id[member].cluster = cluster.representative
                by_id[member].stage_timings["dedup"] = dedup_elapsed
            _apply_cluster_action(cluster, by_id, actions)

    _send_batched_notification(request, outcomes, digests, actions)
    return outcomes


def _apply_cluster_action(
    cluster: DuplicateCluster, by_id: Mapping[str, TriageOutcome], actions: ActionRunner
) -> None:
    representative = by_id[cluster.representative]
    rep_kind = select_action(
        is_bug=True,
        digest_size=representative.digest_size,
        is_representative=True,
        matched_existing=cluster.matched_existing is not None,
    )
    if rep_kind is ActionKind.DUPLICATE_OF:
        ref = cluster.matched_existing.ticket.tracker_key
        for member in cluster.members:
            by_id[member].action = ActionKind.DUPLICATE_OF
            by_id[member].action_ref = ref
        return
    started = time.monotonic()
    try:
        ticket, warnings = actions.file_ticket(representative.summary)
    except (ActionError, ConfigError) as exc:
        representative.error = f"ticket filing failed: {exc}"
        representative.action = ActionKind.NONE
        for member in cluster.members:
            if member != cluster.representative:
                by_id[member].action = ActionKind.NONE
                by_id[member].warnings.append(
                    f"ticket for representative {cluster.representative} failed: {exc}"
                )
        return
    finally:
        representative.stage_timings["action"] = time.monotonic() - started
    representative.action = rep_kind
    representative.action_ref = ticket.tracker_key
    representative.ticket = ticket
    representative.warnings.extend(warnings)
    for member in cluster.members:
        if member != cluster.representative:
            by_id[member].action = select_action(
                is_bug=True, digest_size=by_id[member].digest_size, is_representative=False
            )
            by_id[member].action_ref = ticket.tracker_key


def _send_batched_notification(
    request: TriageRequest,
    outcomes: Sequence[TriageOutcome],
    digests: Mapping[str, ErrorDigest],
    actions: ActionRunner,
) -> None:
    notified = [o for o in outcomes if o.action is ActionKind.NOTIFIED]
    if not notified:
        return
    if actions.dry_run:
        return
    recipients = tuple(actions.mailer.config.recipients) if actions.mailer else ()
    if not recipients:
        for outcome in notified:
            outcome.warnings.append("mail not configured; notification skipped")
        return
    lines = []
    for outcome in notified:
        if outcome.verdict is not None:
            verdict_text = "environment issue" if not outcome.verdict.is_bug else "bug (unsummarized)"
        elif outcome.digest_size == 0:
            verdict_text = "no errors matched the pattern registry"
        else:
            verdict_text = "unanalyzed"
        lines.append(f"- {outcome.failure_id}: {verdict_text}")
        digest = digests.get(outcome.failure_id)
        if digest:
            for record in digest.records[:5]:
                lines.append(f"    {record.matched_line}")
    notification = Notification(
        recipients=recipients,
        subject=f"[test-triage] {len(notified)} failure(s) need review ({request.request_id})",
        body="\n".join(lines) + "\n",
        failure_ids=tuple(o.failure_id for o in notified),
    )
    status, warnings = actions.notify(notification)
    for outcome in notified:
        outcome.warnings.extend(warnings)
