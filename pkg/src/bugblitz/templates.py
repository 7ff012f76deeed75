"""Prompt templates for the four analysis stages.

Templates are versioned resources embedded here and overridable from a
templates directory (one ``<template_id>.json`` per template), so prompt
iteration never requires a code change. Placeholders use ``{name}``
syntax with ``{{``/``}}`` escaping literal braces; rendering is strict:
the binding map must cover the placeholders exactly.
"""

from __future__ import annotations

import json
import string
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional

from .errors import TemplateError
from .llm import ChatMessage

ROOT_ERROR_TEMPLATE_ID = "root_error.v1"
DIAGNOSIS_TEMPLATE_ID = "diagnosis.v1"
SUMMARIZE_CHAIN_TEMPLATE_ID = "summarize_chain.v1"
DUPLICATE_TEMPLATE_ID = "duplicate.v1"

_PLACEHOLDER_CHARS = set(string.ascii_lowercase + string.digits + "_")


def _scan_placeholders(template_id: str, text: str) -> set[str]:
    """Collect ``{name}`` fields, rejecting format specs and indexing."""
    names = set()
    try:
        parsed = list(string.Formatter().parse(text))
    except ValueError as exc:
        raise TemplateError(f"template {template_id!r}: bad placeholder syntax: {exc}") from exc
    for _literal, field_name, format_spec, conversion in parsed:
        if field_name is None:
            continue
        if format_spec or conversion or not field_name:
            raise TemplateError(
                f"template {template_id!r}: placeholders must be plain names, got "
                f"{field_name!r}"
            )
        if not set(field_name) <= _PLACEHOLDER_CHARS:
            raise TemplateError(
                f"template {template_id!r}: invalid placeholder name {field_name!r}"
            )
        names.add(field_name)
    return names


@dataclass(frozen=True)
class PromptTemplate:
    """An ordered list of (role, text) turns with named placeholders."""

    template_id: str
    turns: tuple[tuple[str, str], ...]
    placeholders: frozenset[str]

    @classmethod
    def build(cls, template_id: str, turns: list[tuple[str, str]]) -> "PromptTemplate":
        if not turns:
            raise TemplateError(f"template {template_id!r} has no turns")
        names: set[str] = set()
        for role, text in turns:
            if role not in ("system", "user", "assistant"):
                raise TemplateError(f"template {template_id!r}: unknown role {role!r}")
            names |= _scan_placeholders(template_id, text)
        return cls(template_id, tuple((r, t) for r, t in turns), frozenset(names))

    def to_json(self) -> str:
        doc = {
            "template_id": self.template_id,
            "turns": [{"role": r, "text": t} for r, t in self.turns],
        }
        return json.dumps(doc, indent=2)

    @classmethod
    def from_json(cls, data: str | bytes) -> "PromptTemplate":
        try:
            doc = json.loads(data)
            template_id = doc["template_id"]
            turns = [(t["role"], t["text"]) for t in doc["turns"]]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise TemplateError(f"malformed template document: {exc}") from exc
        return cls.build(template_id, turns)


def render(template: PromptTemplate, bindings: Mapping[str, str]) -> list[ChatMessage]:
    """Substitute bindings into every turn, verbatim and unescaped.

    The binding map must match the placeholder set exactly; a missing or
    unknown name is a template error rather than silent text damage.
    """
    provided = set(bindings)
    missing = sorted(template.placeholders - provided)
    if missing:
        raise TemplateError(
            f"template {template.template_id!r}: missing bindings for: {', '.join(missing)}"
        )
    extra = sorted(provided - template.placeholders)
    if extra:
        raise TemplateError(
            f"template {template.template_id!r}: unknown bindings: {', '.join(extra)}"
        )
    messages = []
    for role, text in template.turns:
        messages.append(ChatMessage(role, text.format_map(dict(bindings))))
    return messages


# ---------------------------------------------------------------------------
# Built-in stage templates
# ---------------------------------------------------------------------------

_ROOT_ERROR = PromptTemplate.build(
    ROOT_ERROR_TEMPLATE_ID,
    [
        (
            "system",
            "You are a software QA assistant. You will be given the numbered "
            "list of errors extracted from the log of one failing test. "
            "Identify the single error that is the root cause of the failure "
            "and reply with its number only. Any other answer is not allowed.",
        ),
        (
            "user",
            'The errors are:\n"[1] FAILED tests/test_linalg.py::test_matmul\n'
            "[2] Traceback (most recent call last):\n"
            '[3] RuntimeError: could not create engine: backend device unavailable".\n'
            "Answer:",
        ),
        ("assistant", "3"),
        (
            "user",
            'The errors are:\n"[1] error: process exited with code 1\n'
            '[2] terminate called after throwing an instance of \'std::bad_alloc\'".\n'
            "Answer:",
        ),
        ("assistant", "2"),
        ("user", 'The errors are:\n"{error_list}".\nAnswer:'),
    ],
)

_DIAGNOSIS = PromptTemplate.build(
    DIAGNOSIS_TEMPLATE_ID,
    [
        (
            "system",
            "You are a software QA assistant to help analyze whether an error "
            "is caused by bug in code or test environment issue (for example "
            "unstable network, disk out of space, etc.) based on my given "
            "error log. Please give final answer in 'True' if the error is "
            "caused by bug, or 'False' if the error is caused by test "
            "environment issue, any other answer is not allowed. I will "
            "provide the error info next",
        ),
        (
            "user",
            'The error is: "[1] what():  Native API failed. Native API returns: '
            '-1 (PI_ERROR_DEVICE_NOT_FOUND) -1 (PI_ERROR_DEVICE_NOT_FOUND)".\nAnswer:',
        ),
        (
            "assistant",
            "PI_ERROR_DEVICE_NOT_FOUND is not network connection error or disk "
            "out of space error, so according to the criteria, it is a bug "
            "rather than test environment issue. Final answer: True",
        ),
        (
            "user",
            "The error is: \"terminate called after throwing an instance of "
            "'dnnl::error'\".\nAnswer:",
        ),
        (
            "assistant",
            "dnnl::error is not network connection error or disk out of space "
            "error, so according to the criteria, it is a bug rather than test "
            "environment issue. Final answer: True",
        ),
        (
            "user",
            'The error is: "OSError: [Errno 28] No space left on device".\nAnswer:',
        ),
        (
            "assistant",
            "No space left on device is a disk out of space error, so "
            "according to the criteria, it is a test environments issue "
            "rather than a bug. Final answer: False",
        ),
        ("user", 'The error is: "{error_line}".\nAnswer:'),
    ],
)

_SUMMARIZE_CHAIN = PromptTemplate.build(
    SUMMARIZE_CHAIN_TEMPLATE_ID,
    [
        (
            "user",
            "Please generate a JSON snippet summarizing an issue for bug "
            "reporting with the format {{'summary':'', 'description':''}} "
            'based on the log: "{error_content}".',
        ),
        (
            "user",
            "Please fill in the JSON 'description' field with the error "
            "information of the issue without additional explanation. The "
            'line of error in the log is: "{error_line}", please fill in the '
            "JSON 'summary' field with the exact key error type and "
            "simplified error message, and keep the 'description' field "
            "unchanged. The length of 'summary' field is kept under 10 words.",
        ),
        (
            "user",
            "Please check the format and make sure it is a standard "
            "non-nested JSON snippet enclosed in '```json ... ```', with the "
            "format {{'summary':'', 'description':''}}.",
        ),
    ],
)

_DUPLICATE = PromptTemplate.build(
    DUPLICATE_TEMPLATE_ID,
    [
        (
            "system",
            "You are a software QA assistant. You will be given two bug "
            "reports, each with a summary and a description. Decide whether "
            "they describe the same underlying bug. Answer YES if they are "
            "duplicates or NO if they are not, any other answer is not allowed.",
        ),
        (
            "user",
            "Report A:\nsummary: {summary_a}\ndescription: {description_a}\n\n"
            "Report B:\nsummary: {summary_b}\ndescription: {description_b}\n\n"
            "Do these two reports describe the same bug? Answer YES or NO.",
        ),
    ],
)

BUILTIN_TEMPLATES: dict[str, PromptTemplate] = {
    t.template_id: t for t in (_ROOT_ERROR, _DIAGNOSIS, _SUMMARIZE_CHAIN, _DUPLICATE)
}


class TemplateSet:
    """Lookup table of templates, builtins overlaid by a directory."""

    def __init__(self, templates: Optional[Mapping[str, PromptTemplate]] = None):
        self._templates = dict(BUILTIN_TEMPLATES)
        if templates:
            self._templates.update(templates)

    def get(self, template_id: str) -> PromptTemplate:
        try:
            return self._templates[template_id]
        except KeyError:
            raise TemplateError(f"unknown template {template_id!r}") from None

    def ids(self) -> list[str]:
        return sorted(self._templates)


def load_templates(templates_dir: Optional[str | Path] = None) -> TemplateSet:
    """Builtins plus any ``<template_id>.json`` overrides in `templates_dir`."""
    overrides: dict[str, PromptTemplate] = {}
    if templates_dir:
        directory = Path(templates_dir)
        if not directory.is_dir():
            raise TemplateError(f"templates directory {directory} does not exist")
        for path in sorted(directory.glob("*.json")):
            template = PromptTemplate.from_json(path.read_bytes())
            expected = path.stem
            if template.template_id != expected:
                raise TemplateError(
                    f"{path} declares template_id {template.template_id!r}; "
                    f"expected {expected!r} from the file name"
                )
            overrides[template.template_id] = template
    return TemplateSet(overrides)
