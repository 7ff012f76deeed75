"""Chat-completion backends and per-stage model configuration.

Two interchangeable backends expose ``complete(messages, profile)``:

* :class:`HttpChatBackend` talks to any endpoint speaking the common
  chat-completion HTTP schema (messages array in, single choice out).
* :class:`MockBackend` is a deterministic keyword-rule engine used for
  hermetic tests and the CLI's ``--backend=mock`` mode.

Each analysis stage runs under its own :class:`ModelProfile`; the
defaults pair every stage with a 7B-class instruction model.
"""

from __future__ import annotations

import json
import os
import re
import threading
import time
from dataclasses import dataclass
from enum import Enum
from typing import Mapping, Optional, Sequence

import requests

from .errors import (
    BackendError,
    BackendProtocolError,
    BackendUnavailableError,
    ConfigError,
)

API_KEY_ENV = "BUGBLITZ_LLM_API_KEY"
COMPLETIONS_PATH = "/v1/chat/completions"
DEFAULT_MAX_IN_FLIGHT = 4

_ROLES = ("system", "user", "assistant")


class Submodule(str, Enum):
    """The four analysis stages, each served by its own model profile."""

    ROOT_ERROR_ANALYSIS = "root_error_analysis"
    BUG_DIAGNOSIS = "bug_diagnosis"
    BUG_SUMMARIZATION = "bug_summarization"
    DUPLICATE_DETECTION = "duplicate_detection"


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str

    def __post_init__(self):
        if self.role not in _ROLES:
            raise ValueError(f"unknown chat role {self.role!r}")


@dataclass(frozen=True)
class ModelProfile:
    """Generation parameters for one analysis stage."""

    submodule: Submodule
    model_name: str
    endpoint: str = "http://127.0.0.1:8000"
    temperature: float = 0.0
    max_tokens: int = 128
    timeout: float = 60.0
    retries: int = 2

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_tokens <= 0:
            raise ValueError("max_tokens must be > 0")
        if self.retries < 0:
            raise ValueError("retries must be >= 0")


@dataclass(frozen=True)
class CompletionResult:
    text: str
    model_name: str
    latency: float
    truncated: bool = False


# Default model per stage; max_tokens sized to each stage's output contract
# (an index, a verdict with reasoning, a JSON snippet, a YES/NO token).
_DEFAULT_MODELS = {
    Submodule.ROOT_ERROR_ANALYSIS: ("DeepSeek-Coder-7b-instruct", 64),
    Submodule.BUG_DIAGNOSIS: ("Mistral-7B-Instruct", 128),
    Submodule.BUG_SUMMARIZATION: ("CodeLlama-7b-Instruct", 512),
    Submodule.DUPLICATE_DETECTION: ("CodeLlama-7b-Instruct", 32),
}


def default_profiles(endpoint: str = "http://127.0.0.1:8000") -> dict[Submodule, ModelProfile]:
    """One profile per stage, all pointed at `endpoint`."""
    profiles = {}
    for sub, (model, max_tokens) in _DEFAULT_MODELS.items():
        profiles[sub] = ModelProfile(
            submodule=sub, model_name=model, endpoint=endpoint, max_tokens=max_tokens
        )
    return profiles


def validate_profiles(profiles: Mapping[Submodule, ModelProfile]) -> None:
    """Fail fast when any of the four stages lacks a profile."""
    missing = [sub.value for sub in Submodule if sub not in profiles]
    if missing:
        raise ConfigError(f"missing model profiles for: {', '.join(missing)}")
    for sub, profile in profiles.items():
        if profile.submodule != sub:
            raise ConfigError(
                f"profile registered under {sub.value} declares submodule "
                f"{profile.submodule.value}"
            )


def validate_conversation(messages: Sequence[ChatMessage]) -> None:
    if not messages:
        raise ValueError("conversation must contain at least one message")
    if messages[0].role not in ("system", "user"):
        raise ValueError("conversation must start with a system or user message")
    for msg in messages:
        if not msg.content:
            raise ValueError("chat message content must be non-empty")


class HttpChatBackend:
    """Client for a chat-completion HTTP endpoint.

    Retries transient transport failures (connection errors, timeouts,
    5xx) with exponential backoff, up to ``profile.retries`` extra
    attempts. In-flight completions are capped per endpoint with a
    counting gate so a large request cannot stampede one inference
    server.
    """

    def __init__(
        self,
        session: Optional[requests.Session] = None,
        api_key: Optional[str] = None,
        backoff_base: float = 0.5,
        max_in_flight: int = DEFAULT_MAX_IN_FLIGHT,
    ):
        self._session = session or requests.Session()
        self._api_key = api_key
        self._backoff_base = backoff_base
        self._max_in_flight = max_in_flight
        self._gates: dict[str, threading.BoundedSemaphore] = {}
        self._gates_lock = threading.Lock()

    def _gate(self, endpoint: str) -> threading.BoundedSemaphore:
        with self._gates_lock:
            gate = self._gates.get(endpoint)
            if gate is None:
                gate = threading.BoundedSemaphore(self._max_in_flight)
                self._gates[endpoint] = gate
            return gate

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        key = self._api_key
        if key is None:
            key = os.environ.get(API_KEY_ENV)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    @staticmethod
    def _url(endpoint: str) -> str:
        base = endpoint.rstrip("/")
        if base.endswith("/chat/completions"):
            return base
        return base + COMPLETIONS_PATH

    def complete(self, messages: Sequence[ChatMessage], profile: ModelProfile) -> CompletionResult:
        validate_conversation(messages)
        payload = {
            "model": profile.model_name,
            "messages": [{"role": m.role, "content": m.content} for m in messages],
            "temperature": profile.temperature,
            "max_tokens": profile.max_tokens,
        }
        url = self._url(profile.endpoint)
        attempts = profile.retries + 1
        started = time.monotonic()
        last_failure = "no attempt made"
        with self._gate(profile.endpoint):
            for attempt in range(attempts):
                if attempt:
                    time.sleep(self._backoff_base * (2 ** (attempt - 1)))
                try:
                    resp = self._session.post(
                        url, json=payload, headers=self._headers(), timeout=profile.timeout
                    )
                except (requests.ConnectionError, requests.Timeout) as exc:
                    last_failure = str(exc)
                    continue
                if resp.status_code >= 500:
                    last_failure = f"status {resp.status_code}"
                    continue
                if resp.status_code >= 400:
                    raise BackendError(
                        f"chat completion failed with status {resp.status_code}",
                        status=resp.status_code,
                        body=resp.text[:500],
                    )
                return self._parse(resp, profile, time.monotonic() - started)
        raise BackendUnavailableError(
            f"endpoint {profile.endpoint} unavailable after {attempts} attempts: {last_failure}"
        )

    @staticmethod
    def _parse(resp: requests.Response, profile: ModelProfile, latency: float) -> CompletionResult:
        try:
            data = resp.json()
            choice = data["choices"][0]
            text = choice["message"]["content"]
        except (ValueError, LookupError, TypeError) as exc:
            raise BackendProtocolError(
                f"malformed completion response: {exc}", body=resp.text[:500]
            ) from exc
        if not isinstance(text, str):
            raise BackendProtocolError("completion content is not a string", body=resp.text[:500])
        truncated = choice.get("finish_reason") == "length"
        return CompletionResult(
            text=text,
            model_name=data.get("model", profile.model_name),
            latency=latency,
            truncated=truncated,
        )


# ---------------------------------------------------------------------------
# Deterministic mock backend
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MockCall:
    """One recorded mock completion, for call-log assertions in tests."""

    submodule: Submodule
    messages: tuple[ChatMessage, ...]
    response: str


@dataclass(frozen=True)
class MockRule:
    """Keyword-triggered canned behaviour for one stage.

    ``value`` depends on the stage: an int index for root analysis, a
    bool verdict for diagnosis, a summary string for summarization, a
    bool same/different verdict for duplicate detection.
    """

    submodule: Submodule
    keyword: str
    value: object


_QUOTED_SPAN_RE = re.compile(r'"([^"\n]+)"')


class MockBackend:
    """Keyword-rule completion engine standing in for a live endpoint.

    Matching scope per stage: root analysis, diagnosis and duplicate
    detection match rule keywords against the last user turn (the turn
    carrying the error under analysis); summarization matches across
    all user turns because the final chain turn is a fixed formatting
    instruction with no error content. Longest keyword wins ties.

    Defaults when no rule fires: root analysis answers index 1,
    diagnosis answers bug=True (recall over precision), summarization
    derives a short summary from the quoted error content, duplicate
    detection answers NO (unknown pairs stay separate).

    The mock is a pure function of the conversation text; every call is
    appended to ``calls`` for gating assertions.
    """

    def __init__(self, rules: Sequence[MockRule] = ()):
        by_stage: dict[Submodule, list[MockRule]] = {sub: [] for sub in Submodule}
        for rule in rules:
            by_stage[rule.submodule].append(rule)
        for stage_rules in by_stage.values():
            stage_rules.sort(key=lambda r: (-len(r.keyword), r.keyword))
        self._rules = by_stage
        self.calls: list[MockCall] = []
        self._lock = threading.Lock()

    def complete(self, messages: Sequence[ChatMessage], profile: ModelProfile) -> CompletionResult:
        validate_conversation(messages)
        sub = profile.submodule
        user_turns = [m.content for m in messages if m.role == "user"]
        scan_text = "\n".join(user_turns) if sub is Submodule.BUG_SUMMARIZATION else (
            user_turns[-1] if user_turns else ""
        )
        rule = self._match(sub, scan_text)
        text = self._synthesize(sub, rule, user_turns)
        result = CompletionResult(text=text, model_name=profile.model_name, latency=0.0)
        with self._lock:
            self.calls.append(MockCall(sub, tuple(messages), text))
        return result

    def calls_for(self, submodule: Submodule) -> list[MockCall]:
        with self._lock:
            return [c for c in self.calls if c.submodule is submodule]

    def _match(self, sub: Submodule, text: str) -> Optional[MockRule]:
        for rule in self._rules[sub]:
            if rule.keyword in text:
                return rule
        return None

    def _synthesize(self, sub: Submodule, rule: Optional[MockRule], user_turns: list[str]) -> str:
        if sub is Submodule.ROOT_ERROR_ANALYSIS:
            index = int(rule.value) if rule else 1
            return f"The root cause error is [{index}]."
        if sub is Submodule.BUG_DIAGNOSIS:
            if rule is None:
                return (
                    "No test-environment signature was found in the error, "
                    "so according to the criteria it is a bug. Final answer: True"
                )
            if rule.value:
                return (
                    f"{rule.keyword} is not a network connection error or disk "
                    "out of space error, so according to the criteria it is a "
                    "bug rather than test environment issue. Final answer: True"
                )
            return (
                f"{rule.keyword} indicates a test environment issue rather "
                "than a bug according to the criteria. Final answer: False"
            )
        if sub is Submodule.BUG_SUMMARIZATION:
            summary, description = self._summarize(rule, user_turns)
            snippet = json.dumps({"summary": summary, "description": description})
            return f"Here is the summary of the issue:\n```json\n{snippet}\n```"
        if sub is Submodule.DUPLICATE_DETECTION:
            same = bool(rule.value) if rule else False
            if same:
                return "The two reports describe the same underlying bug. YES"
            return "The two reports describe different bugs. NO"
        raise ValueError(f"unhandled submodule {sub}")  # pragma: no cover

    @staticmethod
    def _summarize(rule: Optional[MockRule], user_turns: list[str]) -> tuple[str, str]:
        spans = [s for turn in user_turns for s in _QUOTED_SPAN_RE.findall(turn)]
        if rule is not None:
            matching = [s for s in spans if rule.keyword in s]
            description = matching[-1] if matching else (spans[-1] if spans else rule.keyword)
            return str(rule.value), description
        if spans:
            description = spans[-1]
            words = description.split()[:7]
            return "Test failure: " + " ".join(words), description
        return "Test failure with no extracted error content", "no error content provided"


# Reference rule table: environment-issue signatures answer False, the
# explicit bug signatures answer True (the default already does), and
# unknown errors fall through to the bug default.
REFERENCE_MOCK_RULES: tuple[MockRule, ...] = (
    MockRule(Submodule.BUG_DIAGNOSIS, "PI_ERROR_DEVICE_NOT_FOUND", True),
    MockRule(Submodule.BUG_DIAGNOSIS, "dnnl::error", True),
    MockRule(Submodule.BUG_DIAGNOSIS, "No space left on device", False),
    MockRule(Submodule.BUG_DIAGNOSIS, "disk out of space", False),
    MockRule(Submodule.BUG_DIAGNOSIS, "Disk quota exceeded", False),
    MockRule(Submodule.BUG_DIAGNOSIS, "Network is unreachable", False),
    MockRule(Submodule.BUG_DIAGNOSIS, "Connection timed out", False),
    MockRule(Submodule.BUG_DIAGNOSIS, "Temporary failure in name resolution", False),
)


_RULE_FIELDS = {
    Submodule.ROOT_ERROR_ANALYSIS: ("index", int),
    Submodule.BUG_DIAGNOSIS: ("verdict", bool),
    Submodule.BUG_SUMMARIZATION: ("summary", str),
    Submodule.DUPLICATE_DETECTION: ("same", bool),
}


def load_mock_rules(path) -> list[MockRule]:
    """Load a rule table from a JSON file (list of rule objects).

    Each object carries ``submodule``, ``keyword`` and one stage-specific
    value field: ``index``, ``verdict``, ``summary`` or ``same``.
    """
    with open(path, "rb") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"malformed mock rule file {path}: {exc}") from exc
    if not isinstance(raw, list):
        raise ConfigError(f"mock rule file {path} must contain a JSON array")
    rules = []
    for i, entry in enumerate(raw):
        try:
            sub = Submodule(entry["submodule"])
            keyword = entry["keyword"]
        except (KeyError, ValueError, TypeError) as exc:
            raise ConfigError(f"mock rule #{i} in {path} is invalid: {exc}") from exc
        field_name, field_type = _RULE_FIELDS[sub]
        if field_name not in entry:
            raise ConfigError(f"mock rule #{i} in {path} lacks the {field_name!r} field")
        value = entry[field_name]
        if not isinstance(value, field_type) or (field_type is int and isinstance(value, bool)):
            raise ConfigError(
                f"mock rule #{i} in {path}: {field_name!r} must be {field_type.__name__}"
            )
        if not isinstance(keyword, str) or not keyword:
            raise ConfigError(f"mock rule #{i} in {path}: keyword must be a non-empty string")
        rules.append(MockRule(sub, keyword, value))
    return rules
