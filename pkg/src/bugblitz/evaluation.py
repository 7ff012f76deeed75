"""Labeled-dataset evaluation and fine-tuning data export.

A dataset is a directory of per-sample log files plus one labels
document keyed by sample id. Recall counts labeled bugs the pipeline
identified; precision counts posted tickets that would need no human
correction; both are pure counting functions over (outcomes, labels).

The exporter turns the same labels into instruction/response pairs for
model adaptation, dropping samples whose labels reference things the
log never mentions (the classic project-name hazard) and collapsing
exact duplicates. Exports are byte-deterministic.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

from .action import ActionKind
from .errors import ConfigError
from .ingestion import (
    ErrorDigest,
    ErrorPattern,
    RequestOptions,
    TestFailure,
    TriageRequest,
    extract_errors,
)
from .llm import ModelProfile, Submodule
from .pipeline import TriageOutcome, format_error_list, run_pipeline
from .templates import (
    DIAGNOSIS_TEMPLATE_ID,
    ROOT_ERROR_TEMPLATE_ID,
    SUMMARIZE_CHAIN_TEMPLATE_ID,
    TemplateSet,
    render,
)

logger = logging.getLogger(__name__)

LABELS_FILE = "labels.json"
LOGS_DIR = "logs"

RULE_LABEL_LOG_MISMATCH = "label_log_mismatch"
RULE_EXACT_DUPLICATE = "exact_duplicate"
RULE_EMPTY_DIGEST = "empty_digest"
RULE_ROOT_INDEX_OUT_OF_RANGE = "root_index_out_of_range"

EXPORT_TASKS = ("root_analysis", "diagnosis", "summarization")


@dataclass(frozen=True)
class EvaluationSample:
    sample_id: str
    raw_log: str
    summ: str
    root_err_idx: tuple[int, ...]
    desc: str
    is_bug: bool = True
    duplicate_group: Optional[str] = None


@dataclass
class MetricsReport:
    recall: Optional[float]
    precision: Optional[float]
    bugs_total: int
    bugs_identified: int
    tickets_posted: int
    tickets_clean: int
    root_accuracy: Optional[float]
    per_sample: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "recall": self.recall,
            "precision": self.precision,
            "bugs_total": self.bugs_total,
            "bugs_identified": self.bugs_identified,
            "tickets_posted": self.tickets_posted,
            "tickets_clean": self.tickets_clean,
            "root_accuracy": self.root_accuracy,
            "per_sample": self.per_sample,
        }


def load_dataset(path: str | Path) -> list[EvaluationSample]:
    """Load labels.json plus logs/<sample_id>.log pairs.

    A label without its log file is an error; a log file without a
    label is only warned about. Label extensions (is_bug,
    duplicate_group) are optional so raw three-field label files load.
    """
    root = Path(path)
    labels_path = root / LABELS_FILE
    try:
        raw = labels_path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read labels document {labels_path}: {exc}") from exc
    try:
        labels = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ConfigError(
            f"malformed labels document {labels_path} at line {exc.lineno}, "
            f"column {exc.colno}: {exc.msg}"
        ) from exc
    if not isinstance(labels, dict):
        raise ConfigError(f"labels document {labels_path} must be an object keyed by sample_id")

    logs_dir = root / LOGS_DIR
    samples: list[EvaluationSample] = []
    for sample_id in sorted(labels):
        entry = labels[sample_id]
        if not isinstance(entry, dict):
            raise ConfigError(f"label {sample_id!r}: entry must be an object")
        log_path = logs_dir / f"{sample_id}.log"
        if not log_path.exists():
            raise ConfigError(f"label {sample_id!r}: missing log file {log_path}")
        raw_log = log_path.read_bytes().decode("utf-8", errors="replace")
        try:
            summ = str(entry["summ"])
            desc = str(entry["desc"])
        except KeyError as exc:
            raise ConfigError(f"label {sample_id!r}: missing field {exc.args[0]!r}") from exc
        idx = entry.get("root_err_idx", [])
        if not isinstance(idx, list) or not all(
            isinstance(i, int) and not isinstance(i, bool) and i >= 1 for i in idx
        ):
            raise ConfigError(f"label {sample_id!r}: root_err_idx must be a list of integers >= 1")
        is_bug = bool(entry.get("is_bug", True))
        if is_bug and not idx:
            raise ConfigError(f"label {sample_id!r}: root_err_idx must be non-empty for a bug")
        group = entry.get("duplicate_group")
        samples.append(
            EvaluationSample(
                sample_id=sample_id,
                raw_log=raw_log,
                summ=summ,
                root_err_idx=tuple(idx),
                desc=desc,
                is_bug=is_bug,
                duplicate_group=str(group) if group is not None else None,
            )
        )

    if logs_dir.is_dir():
        labeled = {f"{s.sample_id}.log" for s in samples}
        extras = sorted(p.name for p in logs_dir.glob("*.log") if p.name not in labeled)
        if extras:
            logger.warning("dataset %s: %d unlabeled log file(s): %s", root, len(extras),
                           ", ".join(extras[:10]))
    return samples


def build_eval_request(samples: Sequence[EvaluationSample]) -> TriageRequest:
    """One dry-run request over the whole dataset, registry dedup off."""
    failures = tuple(
        TestFailure(failure_id=s.sample_id, test_name=s.sample_id, raw_log=s.raw_log)
        for s in samples
    )
    return TriageRequest(
        request_id="evaluation",
        failures=failures,
        options=RequestOptions(dry_run=True, dedup_against_registry=False),
    )


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def compute_recall(
    outcomes: Sequence[TriageOutcome], samples: Sequence[EvaluationSample]
) -> Optional[float]:
    """Identified bugs over all labeled bugs; None when there are no bugs."""
    by_id = {o.failure_id: o for o in outcomes}
    bugs = [s for s in samples if s.is_bug]
    if not bugs:
        return None
    identified = 0
    for sample in bugs:
        outcome = by_id.get(sample.sample_id)
        if outcome is not None and outcome.verdict is not None and outcome.verdict.is_bug:
            identified += 1
    return identified / len(bugs)


def _norm_text(text: str) -> str:
    return " ".join(text.lower().split())


_TOKEN_RE = re.compile(r"[A-Za-z0-9_.:\-]+")
_ERROR_SUFFIX_RE = re.compile(r"(?:error|exception)$", re.IGNORECASE)
_ALLCAPS_RE = re.compile(r"^[A-Z][A-Z0-9_\-]{3,}$")


def key_error_token(label_summary: str) -> str:
    """The token a generated summary must carry to count as matching.

    Preference order: first Error/Exception-suffixed token, first
    long ALLCAPS token, else the longest token.
    """
    tokens = _TOKEN_RE.findall(label_summary)
    for token in tokens:
        if _ERROR_SUFFIX_RE.search(token):
            return token
    for token in tokens:
        if _ALLCAPS_RE.match(token):
            return token
    return max(tokens, key=len, default="")


def summary_matches(generated: str, label_summary: str) -> bool:
    """Proxy for 'the ticket needed no human rewording'.

    Isolated here on purpose; swap this predicate to change what counts
    as a clean ticket.
    """
    token = key_error_token(label_summary)
    if token:
        return _norm_text(token) in _norm_text(generated)
    return _norm_text(label_summary) in _norm_text(generated)


def _count_tickets(
    outcomes: Sequence[TriageOutcome], samples: Sequence[EvaluationSample]
) -> tuple[int, int]:
    """(posted, clean) ticket counts per the human-intervention proxy."""
    by_sample = {s.sample_id: s for s in samples}
    posted = [o for o in outcomes if o.action is ActionKind.TICKET_FILED]
    first_in_group: dict[str, str] = {}
    for outcome in sorted(posted, key=lambda o: o.failure_id):
        sample = by_sample.get(outcome.failure_id)
        if sample is not None and sample.duplicate_group:
            first_in_group.setdefault(sample.duplicate_group, outcome.failure_id)
    clean = 0
    for outcome in posted:
        sample = by_sample.get(outcome.failure_id)
        if sample is None or not sample.is_bug:
            continue
        if outcome.summary is None or not summary_matches(outcome.summary.summary, sample.summ):
            continue
        if sample.duplicate_group and first_in_group[sample.duplicate_group] != outcome.failure_id:
            continue
        clean += 1
    return len(posted), clean


def compute_precision(
    outcomes: Sequence[TriageOutcome], samples: Sequence[EvaluationSample]
) -> Optional[float]:
    """Clean tickets over posted tickets; None when nothing was posted.

    A posted ticket is clean iff its sample is a real bug, the generated
    summary matches the labeled one, and it is not a missed duplicate
    (only the first posted ticket of a duplicate_group is eligible).
    """
    posted, clean = _count_tickets(outcomes, samples)
    if not posted:
        return None
    return clean / posted


def score_root_accuracy(
    outcomes: Sequence[TriageOutcome], samples: Sequence[EvaluationSample]
) -> Optional[float]:
    """Fraction of scoreable samples whose chosen index is in the label.

    Scoreable means the digest was non-empty and the label carries at
    least one root index.
    """
    by_id = {o.failure_id: o for o in outcomes}
    correct = 0
    total = 0
    for sample in samples:
        if not sample.root_err_idx:
            continue
        outcome = by_id.get(sample.sample_id)
        if outcome is None or outcome.digest_size == 0:
            continue
        total += 1
        if outcome.root_cause is not None and outcome.root_cause.chosen_index in sample.root_err_idx:
            correct += 1
    return correct / total if total else None


def evaluate_outcomes(
    outcomes: Sequence[TriageOutcome], samples: Sequence[EvaluationSample]
) -> MetricsReport:
    by_id = {o.failure_id: o for o in outcomes}
    bugs = [s for s in samples if s.is_bug]
    identified = sum(
        1
        for s in bugs
        if (o := by_id.get(s.sample_id)) is not None
        and o.verdict is not None
        and o.verdict.is_bug
    )
    posted, clean = _count_tickets(outcomes, samples)
    per_sample = []
    for sample in samples:
        outcome = by_id.get(sample.sample_id)
        per_sample.append(
            {
                "sample_id": sample.sample_id,
                "is_bug": sample.is_bug,
                "predicted_bug": bool(outcome.verdict.is_bug)
                if outcome and outcome.verdict
                else None,
                "action": outcome.action.value if outcome else None,
                "root_correct": (
                    outcome.root_cause.chosen_index in sample.root_err_idx
                    if outcome and outcome.root_cause and sample.root_err_idx
                    else None
                ),
                "summary_match": (
                    summary_matches(outcome.summary.summary, sample.summ)
                    if outcome and outcome.summary
                    else None
                ),
            }
        )
    return MetricsReport(
        recall=compute_recall(outcomes, samples),
        precision=(clean / posted) if posted else None,
        bugs_total=len(bugs),
        bugs_identified=identified,
        tickets_posted=posted,
        tickets_clean=clean,
        root_accuracy=score_root_accuracy(outcomes, samples),
        per_sample=per_sample,
    )


def evaluate_samples(
    samples: Sequence[EvaluationSample],
    patterns: Sequence[ErrorPattern],
    backend,
    profiles: Mapping[Submodule, ModelProfile],
    templates: Optional[TemplateSet] = None,
    max_workers: int = 4,
) -> tuple[list[TriageOutcome], MetricsReport]:
    request = build_eval_request(samples)
    outcomes = run_pipeline(
        request, patterns, backend, profiles, templates=templates, max_workers=max_workers
    )
    return outcomes, evaluate_outcomes(outcomes, samples)


# ---------------------------------------------------------------------------
# Fine-tuning export
# ---------------------------------------------------------------------------

@dataclass
class ExportReport:
    records_written: int
    samples_exported: int
    dropped: dict[str, int]
    cleaned_nonprintable: int

    def to_dict(self) -> dict:
        return {
            "records_written": self.records_written,
            "samples_exported": self.samples_exported,
            "dropped": dict(self.dropped),
            "cleaned_nonprintable": self.cleaned_nonprintable,
        }


_CODE_TOKEN_RES = (
    re.compile(r"\d"),
    re.compile(r"[_\-]"),
    re.compile(r"[a-z][A-Z]"),
    re.compile(r"^[A-Z]{3,}"),
)


def _code_tokens(text: str) -> list[str]:
    """Identifier-looking tokens a log would have to contain verbatim."""
    out = []
    for token in _TOKEN_RE.findall(text):
        if len(token) < 3:
            continue
        if any(rx.search(token) for rx in _CODE_TOKEN_RES):
            out.append(token)
    return out


def mismatched_label_tokens(sample: EvaluationSample) -> list[str]:
    """Label tokens (summ + desc) that the raw log never mentions."""
    log_lower = sample.raw_log.lower()
    flagged = []
    for token in _code_tokens(sample.summ) + _code_tokens(sample.desc):
        if token.lower() not in log_lower:
            flagged.append(token)
    return flagged


def _flatten_prompt(messages) -> str:
    return "\n".join(f"{m.role} >>\n{m.content}" for m in messages)


_PRINTABLE_KEEP = {"\n", "\t"}


def _strip_nonprintable(text: str) -> str:
    return "".join(ch for ch in text if ch in _PRINTABLE_KEEP or ch >= " ")


def export_finetune_dataset(
    samples: Sequence[EvaluationSample],
    digests: Mapping[str, ErrorDigest],
    out_path: str | Path,
    templates: Optional[TemplateSet] = None,
) -> ExportReport:
    """Write instruction/response JSONL for the three trainable tasks.

    Per surviving sample: a diagnosis record always (both classes keep
    the dataset diverse); a root-analysis and a summarization record
    only for bugs, whose ground truth comes from a human ticket.
    Identical datasets produce byte-identical files.
    """
    templates = templates if templates is not None else TemplateSet()
    root_tpl = templates.get(ROOT_ERROR_TEMPLATE_ID)
    diag_tpl = templates.get(DIAGNOSIS_TEMPLATE_ID)
    chain_tpl = templates.get(SUMMARIZE_CHAIN_TEMPLATE_ID)

    dropped = {
        RULE_LABEL_LOG_MISMATCH: 0,
        RULE_EXACT_DUPLICATE: 0,
        RULE_EMPTY_DIGEST: 0,
        RULE_ROOT_INDEX_OUT_OF_RANGE: 0,
    }
    cleaned = 0
    records: list[dict] = []
    seen_identities: set[tuple] = set()
    exported_samples = 0

    for sample in sorted(samples, key=lambda s: s.sample_id):
        if mismatched_label_tokens(sample):
            dropped[RULE_LABEL_LOG_MISMATCH] += 1
            continue
        identity = (
            sample.raw_log,
            sample.summ,
            sample.desc,
            sample.root_err_idx,
            sample.is_bug,
            sample.duplicate_group,
        )
        if identity in seen_identities:
            dropped[RULE_EXACT_DUPLICATE] += 1
            continue
        seen_identities.add(identity)

        digest = digests.get(sample.sample_id)
        if digest is None or not digest.records:
            dropped[RULE_EMPTY_DIGEST] += 1
            continue
        if sample.is_bug and sample.root_err_idx[0] > len(digest.records):
            dropped[RULE_ROOT_INDEX_OUT_OF_RANGE] += 1
            continue

        sample_records: list[dict] = []
        if sample.is_bug:
            root_index = sample.root_err_idx[0]
            record = digest.records[root_index - 1]
            sample_records.append(
                {
                    "task": "root_analysis",
                    "sample_id": sample.sample_id,
                    "prompt": _flatten_prompt(
                        render(root_tpl, {"error_list": format_error_list(digest)})
                    ),
                    "completion": str(root_index),
                }
            )
            sample_records.append(
                {
                    "task": "summarization",
                    "sample_id": sample.sample_id,
                    "prompt": _flatten_prompt(
                        render(
                            chain_tpl,
                            {"error_content": record.context, "error_line": record.matched_line},
                        )
                    ),
                    "completion": "```json\n"
                    + json.dumps({"summary": sample.summ, "description": sample.desc})
                    + "\n```",
                }
            )
        else:
            record = digest.records[-1]
        sample_records.append(
            {
                "task": "diagnosis",
                "sample_id": sample.sample_id,
                "prompt": _flatten_prompt(render(diag_tpl, {"error_line": record.matched_line})),
                "completion": f"Final answer: {sample.is_bug}",
            }
        )

        for rec in sample_records:
            stripped_prompt = _strip_nonprintable(rec["prompt"])
            stripped_completion = _strip_nonprintable(rec["completion"])
            if stripped_prompt != rec["prompt"] or stripped_completion != rec["completion"]:
                cleaned += 1
            rec["prompt"] = stripped_prompt
            rec["completion"] = stripped_completion
        records.extend(sample_records)
        exported_samples += 1

    out_path = Path(out_path)
    with open(out_path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True, ensure_ascii=False))
            fh.write("\n")
    return ExportReport(
        records_written=len(records),
        samples_exported=exported_samples,
        dropped=dropped,
        cleaned_nonprintable=cleaned,
    )


def build_digests(
    samples: Sequence[EvaluationSample], patterns: Sequence[ErrorPattern]
) -> dict[str, ErrorDigest]:
    return {
        s.sample_id: extract_errors(
            TestFailure(failure_id=s.sample_id, raw_log=s.raw_log), patterns
        )
        for s in samples
    }
