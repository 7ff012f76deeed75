"""Failed-test log ingestion.

Raw logs are scanned line by line against an operator-customized error
pattern registry; each matching line becomes a numbered error record
with a configurable context window. Extraction is a pure function of
(log, registry), so compiled registries can be shared freely across
request handlers.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

try:
    import tomllib
except ModuleNotFoundError:  # py3.10
    import tomli as tomllib

from .errors import ConfigError, RequestValidationError

# Per-failure log cap; the tail beyond it is dropped and noted in the
# digest provenance so downstream prompt sizes stay bounded.
LOG_SIZE_CAP = 10 * 2**20
DEFAULT_CONTEXT_BEFORE = 2
DEFAULT_CONTEXT_AFTER = 5


@dataclass(frozen=True)
class ErrorPattern:
    pattern_id: str
    expression: str
    priority: int
    context_before: int = DEFAULT_CONTEXT_BEFORE
    context_after: int = DEFAULT_CONTEXT_AFTER

    def __post_init__(self):
        if self.context_before < 0 or self.context_after < 0:
            raise ConfigError(f"pattern {self.pattern_id!r}: context sizes must be >= 0")
        try:
            compiled = re.compile(self.expression)
        except re.error as exc:
            raise ConfigError(f"pattern {self.pattern_id!r}: invalid expression: {exc}") from exc
        object.__setattr__(self, "_compiled", compiled)

    @property
    def compiled(self) -> re.Pattern:
        return self._compiled  # type: ignore[attr-defined]


@dataclass(frozen=True)
class ErrorRecord:
    index: int
    matched_line: str
    context: str
    pattern_id: str
    line_number: int


@dataclass(frozen=True)
class ErrorDigest:
    failure_id: str
    records: tuple[ErrorRecord, ...]
    provenance: tuple[str, ...] = ()

    def __len__(self) -> int:
        return len(self.records)


@dataclass(frozen=True)
class TestFailure:
    """One failed test case: metadata plus its raw log."""

    __test__ = False  # keep pytest from collecting this as a test class

    failure_id: str
    test_name: str = ""
    suite: Optional[str] = None
    test_info: dict[str, str] = field(default_factory=dict)
    raw_log: Union[str, bytes] = ""


@dataclass(frozen=True)
class RequestOptions:
    dry_run: bool = False
    dedup_against_registry: bool = True


@dataclass(frozen=True)
class TriageRequest:
    request_id: str
    failures: tuple[TestFailure, ...]
    options: RequestOptions = RequestOptions()


def load_pattern_registry(source: bytes | str) -> list[ErrorPattern]:
    """Parse a TOML pattern document into a validated, ordered registry.

    The document holds one ``[[pattern]]`` table per entry with fields
    id / expr / priority and optional before / after context sizes.
    Returned patterns are sorted by (priority, pattern_id); lower
    priority values match first.
    """
    if isinstance(source, str):
        source = source.encode("utf-8")
    try:
        doc = tomllib.loads(source.decode("utf-8"))
    except UnicodeDecodeError as exc:
        raise ConfigError(f"pattern registry is not UTF-8: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"malformed pattern registry: {exc}") from exc
    entries = doc.get("pattern", [])
    if not isinstance(entries, list):
        raise ConfigError("pattern registry: 'pattern' must be an array of tables")
    patterns: list[ErrorPattern] = []
    seen: set[str] = set()
    for i, entry in enumerate(entries):
        if not isinstance(entry, dict):
            raise ConfigError(f"pattern registry: entry #{i + 1} is not a table")
        try:
            pattern_id = entry["id"]
            expression = entry["expr"]
        except KeyError as exc:
            raise ConfigError(
                f"pattern registry: entry #{i + 1} lacks required field {exc.args[0]!r}"
            ) from exc
        if not isinstance(pattern_id, str) or not pattern_id:
            raise ConfigError(f"pattern registry: entry #{i + 1} id must be a non-empty string")
        if pattern_id in seen:
            raise ConfigError(f"pattern registry: duplicate pattern id {pattern_id!r}")
        seen.add(pattern_id)
        priority = entry.get("priority", 100)
        if not isinstance(priority, int):
            raise ConfigError(f"pattern {pattern_id!r}: priority must be an integer")
        patterns.append(
            ErrorPattern(
                pattern_id=pattern_id,
                expression=str(expression),
                priority=priority,
                context_before=int(entry.get("before", DEFAULT_CONTEXT_BEFORE)),
                context_after=int(entry.get("after", DEFAULT_CONTEXT_AFTER)),
            )
        )
    patterns.sort(key=lambda p: (p.priority, p.pattern_id))
    return patterns


def extract_errors(failure: TestFailure, registry: Sequence[ErrorPattern]) -> ErrorDigest:
    """Scan the failure's log and build its ordered error digest.

    A line matched by several patterns yields exactly one record,
    attributed to the highest-priority match. Context windows are
    clipped at the log boundaries and may overlap between records.
    """
    raw = failure.raw_log
    provenance: list[str] = []
    if isinstance(raw, bytes):
        try:
            text = raw.decode("utf-8")
        except UnicodeDecodeError:
            text = raw.decode("utf-8", errors="replace")
            provenance.append("encoding: invalid UTF-8 byte runs replaced")
    else:
        text = raw
    if len(text) > LOG_SIZE_CAP:
        cut = text.rfind("\n", 0, LOG_SIZE_CAP)
        cut = cut if cut > 0 else LOG_SIZE_CAP
        provenance.insert(
            0, f"truncated: log exceeded the 10 MiB cap; {len(text) - cut} trailing characters dropped"
        )
        text = text[:cut]

    lines = text.splitlines()
    records: list[ErrorRecord] = []
    for line_idx, line in enumerate(lines):
        for pattern in registry:
            if pattern.compiled.search(line):
                start = max(0, line_idx - pattern.context_before)
                end = min(len(lines), line_idx + pattern.context_after + 1)
                records.append(
                    ErrorRecord(
                        index=len(records) + 1,
                        matched_line=line,
                        context="\n".join(lines[start:end]),
                        pattern_id=pattern.pattern_id,
                        line_number=line_idx + 1,
                    )
                )
                break
    return ErrorDigest(
        failure_id=failure.failure_id,
        records=tuple(records),
        provenance=tuple(provenance),
    )


def assemble_request(payload: Union[dict, str, bytes]) -> TriageRequest:
    """Validate a request document and build the pipeline's unit of work.

    test_info keys keep their submission order. All schema problems in
    one payload are reported together rather than one at a time.
    """
    if isinstance(payload, (str, bytes)):
        try:
            payload = json.loads(payload)
        except json.JSONDecodeError as exc:
            raise RequestValidationError(f"request body is not valid JSON: {exc}") from exc
    if not isinstance(payload, dict):
        raise RequestValidationError("request document must be a JSON object")

    problems: list[str] = []
    raw_failures = payload.get("failures", [])
    if not isinstance(raw_failures, list):
        raise RequestValidationError("'failures' must be an array")

    failures: list[TestFailure] = []
    seen_ids: dict[str, int] = {}
    for i, entry in enumerate(raw_failures):
        if not isinstance(entry, dict):
            problems.append(f"failures[{i}]: not an object")
            continue
        failure_id = entry.get("failure_id")
        if not isinstance(failure_id, str) or not failure_id:
            problems.append(f"failures[{i}]: missing or empty 'failure_id'")
            failure_id = None
        raw_log = entry.get("raw_log")
        if not isinstance(raw_log, str):
            label = failure_id or f"failures[{i}]"
            problems.append(f"{label}: missing 'raw_log'")
            raw_log = ""
        if failure_id is not None:
            seen_ids[failure_id] = seen_ids.get(failure_id, 0) + 1
        test_info = entry.get("test_info", {})
        if not isinstance(test_info, dict):
            problems.append(f"{failure_id or i}: 'test_info' must be an object")
            test_info = {}
        failures.append(
            TestFailure(
                failure_id=failure_id or f"<missing-{i}>",
                test_name=str(entry.get("test_name", "")),
                suite=entry.get("suite"),
                test_info={str(k): str(v) for k, v in test_info.items()},
                raw_log=raw_log,
            )
        )
    duplicates = sorted(fid for fid, n in seen_ids.items() if n > 1)
    if duplicates:
        problems.append(f"duplicate failure_id values: {', '.join(duplicates)}")
    if problems:
        raise RequestValidationError(
            f"invalid triage request ({len(problems)} problem(s))", details=problems
        )

    raw_options = payload.get("options", {})
    if not isinstance(raw_options, dict):
        raise RequestValidationError("'options' must be an object")
    options = RequestOptions(
        dry_run=bool(raw_options.get("dry_run", False)),
        dedup_against_registry=bool(raw_options.get("dedup_against_registry", True)),
    )
    request_id = payload.get("request_id")
    if not isinstance(request_id, str) or not request_id:
        request_id = _derive_request_id(failures)
    return TriageRequest(request_id=request_id, failures=tuple(failures), options=options)


def _derive_request_id(failures: Sequence[TestFailure]) -> str:
    digest = hashlib.sha1("\x00".join(f.failure_id for f in failures).encode()).hexdigest()
    return f"req-{digest[:12]}"
