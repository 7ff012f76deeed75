from __future__ import annotations

import json
import socket
import threading

import pytest

from bugblitz.errors import (
    BackendError,
    BackendProtocolError,
    BackendUnavailableError,
    ConfigError,
)
from bugblitz.llm import (
    ChatMessage,
    HttpChatBackend,
    MockBackend,
    MockRule,
    ModelProfile,
    REFERENCE_MOCK_RULES,
    Submodule,
    default_profiles,
    load_mock_rules,
    validate_profiles,
)
from bugblitz.pipeline import extract_summary_payload

from fakes import FakeChatServer


def profile_for(endpoint: str, sub=Submodule.BUG_DIAGNOSIS, retries=2, timeout=5.0):
    return ModelProfile(
        submodule=sub, model_name="test-model", endpoint=endpoint, retries=retries,
        timeout=timeout,
    )


def conversation(text: str) -> list[ChatMessage]:
    return [ChatMessage("system", "judge"), ChatMessage("user", text)]


def free_port() -> int:
    with socket.socket() as sock:
        sock.bind(("127.0.0.1", 0))
        return sock.getsockname()[1]


class TestDefaultProfiles:
    def test_one_profile_per_stage_with_stage_models(self):
        profiles = default_profiles()
        assert profiles[Submodule.ROOT_ERROR_ANALYSIS].model_name == "DeepSeek-Coder-7b-instruct"
        assert profiles[Submodule.BUG_DIAGNOSIS].model_name == "Mistral-7B-Instruct"
        assert profiles[Submodule.BUG_SUMMARIZATION].model_name == "CodeLlama-7b-Instruct"
        assert profiles[Submodule.DUPLICATE_DETECTION].model_name == "CodeLlama-7b-Instruct"

    def test_reproducible_decoding_defaults(self):
        for profile in default_profiles().values():
            assert profile.temperature == 0.0

    def test_missing_profile_fails_fast(self):
        profiles = default_profiles()
        del profiles[Submodule.BUG_DIAGNOSIS]
        with pytest.raises(ConfigError, match="bug_diagnosis"):
            validate_profiles(profiles)

    def test_invalid_parameters_rejected(self):
        with pytest.raises(ValueError):
            ModelProfile(Submodule.BUG_DIAGNOSIS, "m", temperature=-0.1)
        with pytest.raises(ValueError):
            ModelProfile(Submodule.BUG_DIAGNOSIS, "m", max_tokens=0)


class TestHttpChatBackend:
    def test_success_and_payload_shape(self):
        server = FakeChatServer(replies=["Final answer: True"])
        try:
            backend = HttpChatBackend(backoff_base=0.01)
            result = backend.complete(conversation("is this a bug?"), profile_for(server.base_url))
            assert result.text == "Final answer: True"
            assert result.truncated is False
            payload = server.payloads[0]
            assert payload["model"] == "test-model"
            assert payload["temperature"] == 0.0
            assert payload["max_tokens"] == 128
            assert payload["messages"][0] == {"role": "system", "content": "judge"}
        finally:
            server.close()

    def test_bearer_credential_forwarded(self):
        server = FakeChatServer()
        try:
            backend = HttpChatBackend(api_key="sekrit", backoff_base=0.01)
            backend.complete(conversation("x"), profile_for(server.base_url))
            assert server.headers_seen[0].get("Authorization") == "Bearer sekrit"
        finally:
            server.close()

    def test_api_key_env_forwarded(self, monkeypatch):
        server = FakeChatServer()
        try:
            monkeypatch.setenv("BUGBLITZ_LLM_API_KEY", "from-env")
            backend = HttpChatBackend(backoff_base=0.01)
            backend.complete(conversation("x"), profile_for(server.base_url))
            assert server.headers_seen[0].get("Authorization") == "Bearer from-env"
        finally:
            server.close()

    def test_retries_transient_5xx_then_succeeds(self):
        server = FakeChatServer(replies=["recovered"])
        server.script = [503, 502]
        try:
            backend = HttpChatBackend(backoff_base=0.01)
            result = backend.complete(conversation("x"), profile_for(server.base_url, retries=2))
            assert result.text == "recovered"
            assert server.requests_seen == 3
        finally:
            server.close()

    def test_unavailable_after_all_attempts(self):
        endpoint = f"http://127.0.0.1:{free_port()}"
        backend = HttpChatBackend(backoff_base=0.01)
        with pytest.raises(BackendUnavailableError, match="after 3 attempts"):
            backend.complete(conversation("x"), profile_for(endpoint, retries=2))

    def test_blocking_bounded_by_timeout_and_backoff_budget(self):
        import time

        endpoint = f"http://127.0.0.1:{free_port()}"
        backend = HttpChatBackend(backoff_base=0.05)
        started = time.monotonic()
        with pytest.raises(BackendUnavailableError):
            backend.complete(conversation("x"), profile_for(endpoint, retries=3, timeout=0.5))
        elapsed = time.monotonic() - started
        # 4 attempts x 0.5s timeout + backoff budget (0.05 + 0.1 + 0.2), with slack
        assert elapsed < 4 * 0.5 + 0.35 + 1.0

    def test_4xx_is_permanent_with_status_and_body(self):
        server = FakeChatServer()
        server.script = [422]
        try:
            backend = HttpChatBackend(backoff_base=0.01)
            with pytest.raises(BackendError) as excinfo:
                backend.complete(conversation("x"), profile_for(server.base_url, retries=3))
            assert excinfo.value.status == 422
            assert "scripted" in excinfo.value.body
            assert server.requests_seen == 1
        finally:
            server.close()

    def test_malformed_body_is_protocol_error(self):
        server = FakeChatServer(raw_body=b'{"unexpected": "shape"}')
        try:
            backend = HttpChatBackend(backoff_base=0.01)
            with pytest.raises(BackendProtocolError):
                backend.complete(conversation("x"), profile_for(server.base_url))
        finally:
            server.close()

    def test_truncated_flag_from_finish_reason(self):
        body = json.dumps(
            {"choices": [{"message": {"content": "partial"}, "finish_reason": "length"}]}
        ).encode()
        server = FakeChatServer(raw_body=body)
        try:
            result = HttpChatBackend(backoff_base=0.01).complete(
                conversation("x"), profile_for(server.base_url)
            )
            assert result.truncated is True
        finally:
            server.close()

    def test_in_flight_gate_bounds_concurrency(self):
        server = FakeChatServer(delay=0.15)
        try:
            backend = HttpChatBackend(backoff_base=0.01, max_in_flight=4)
            profile = profile_for(server.base_url)
            threads = [
                threading.Thread(
                    target=backend.complete, args=(conversation(f"q{i}"), profile)
                )
                for i in range(8)
            ]
            for t in threads:
                t.start()
            for t in threads:
                t.join()
            assert server.requests_seen == 8
            assert server.max_active <= 4
        finally:
            server.close()

    def test_empty_conversation_rejected(self):
        with pytest.raises(ValueError):
            HttpChatBackend().complete([], profile_for("http://127.0.0.1:1"))

    def test_conversation_must_start_with_system_or_user(self):
        with pytest.raises(ValueError):
            HttpChatBackend().complete(
                [ChatMessage("assistant", "hi")], profile_for("http://127.0.0.1:1")
            )


class TestMockBackend:
    def test_environment_keyword_in_last_user_turn_answers_false(self):
        mock = MockBackend(REFERENCE_MOCK_RULES)
        result = mock.complete(
            conversation('The error is: "OSError: [Errno 28] No space left on device".\nAnswer:'),
            profile_for("x", Submodule.BUG_DIAGNOSIS),
        )
        assert result.text.endswith("Final answer: False")

    def test_unknown_error_defaults_to_bug(self):
        mock = MockBackend(REFERENCE_MOCK_RULES)
        result = mock.complete(
            conversation("unknown mystery text"), profile_for("x", Submodule.BUG_DIAGNOSIS)
        )
        assert result.text.endswith("Final answer: True")

    def test_determinism_byte_identical(self):
        mock = MockBackend(REFERENCE_MOCK_RULES)
        messages = conversation('The error is: "PI_ERROR_DEVICE_NOT_FOUND".\nAnswer:')
        first = mock.complete(messages, profile_for("x", Submodule.BUG_DIAGNOSIS))
        second = mock.complete(messages, profile_for("x", Submodule.BUG_DIAGNOSIS))
        assert first.text == second.text

    def test_device_not_found_rule_answers_bug(self):
        mock = MockBackend(
            [MockRule(Submodule.BUG_DIAGNOSIS, "PI_ERROR_DEVICE_NOT_FOUND", True)]
        )
        result = mock.complete(
            conversation('The error is: "what(): Native API failed. PI_ERROR_DEVICE_NOT_FOUND".'),
            profile_for("x", Submodule.BUG_DIAGNOSIS),
        )
        assert result.text.endswith("Final answer: True")

    def test_root_analysis_synthesizes_index(self):
        mock = MockBackend([MockRule(Submodule.ROOT_ERROR_ANALYSIS, "beta", 2)])
        result = mock.complete(
            conversation('The errors are:\n"[1] alpha\n[2] beta\n[3] gamma".\nAnswer:'),
            profile_for("x", Submodule.ROOT_ERROR_ANALYSIS),
        )
        assert "[2]" in result.text

    def test_summarization_round_trips_through_extractor(self):
        mock = MockBackend(
            [MockRule(Submodule.BUG_SUMMARIZATION, "TypeError", "TypeError in Add op")]
        )
        result = mock.complete(
            conversation('Please summarize based on the log: "TypeError: bad input".'),
            profile_for("x", Submodule.BUG_SUMMARIZATION),
        )
        summary, description = extract_summary_payload(result.text)
        assert "TypeError" in summary
        assert "TypeError: bad input" in description
        assert len(summary.split()) <= 10

    def test_duplicate_rule_and_default(self):
        mock = MockBackend([MockRule(Submodule.DUPLICATE_DETECTION, "same-thing", True)])
        yes = mock.complete(
            conversation("Report A: same-thing\nReport B: same-thing"),
            profile_for("x", Submodule.DUPLICATE_DETECTION),
        )
        no = mock.complete(
            conversation("Report A: alpha\nReport B: beta"),
            profile_for("x", Submodule.DUPLICATE_DETECTION),
        )
        assert yes.text.endswith("YES")
        assert no.text.endswith("NO")

    def test_diagnosis_matches_last_user_turn_only(self):
        mock = MockBackend([MockRule(Submodule.BUG_DIAGNOSIS, "No space left on device", False)])
        messages = [
            ChatMessage("system", "judge"),
            ChatMessage("user", 'The error is: "No space left on device".'),
            ChatMessage("assistant", "Final answer: False"),
            ChatMessage("user", 'The error is: "TypeError: boom".'),
        ]
        result = mock.complete(messages, profile_for("x", Submodule.BUG_DIAGNOSIS))
        assert result.text.endswith("Final answer: True")

    def test_call_log_records_submodule(self):
        mock = MockBackend()
        mock.complete(conversation("x"), profile_for("x", Submodule.BUG_DIAGNOSIS))
        mock.complete(conversation("y"), profile_for("x", Submodule.ROOT_ERROR_ANALYSIS))
        assert len(mock.calls_for(Submodule.BUG_DIAGNOSIS)) == 1
        assert len(mock.calls_for(Submodule.ROOT_ERROR_ANALYSIS)) == 1


class TestLoadMockRules:
    def test_loads_typed_rules(self, tmp_path):
        path = tmp_path / "rules.json"
        path.write_text(
            json.dumps(
                [
                    {"submodule": "bug_diagnosis", "keyword": "boom", "verdict": False},
                    {"submodule": "root_error_analysis", "keyword": "alpha", "index": 2},
                    {"submodule": "bug_summarization", "keyword": "x", "summary": "s"},
                    {"submodule": "duplicate_detection", "keyword": "y", "same": True},
                ]
            )
        )
        rules = load_mock_rules(path)
        assert len(rules) == 4
        assert rules[0].value is False
        assert rules[1].value == 2

    def test_missing_value_field_rejected(self, tmp_path):
        path = tmp_path / "rules.json"
        path.write_text(json.dumps([{"submodule": "bug_diagnosis", "keyword": "k"}]))
        with pytest.raises(ConfigError, match="verdict"):
            load_mock_rules(path)

    def test_bundled_reference_rules_cover_disk_and_network(self):
        keywords = {r.keyword for r in REFERENCE_MOCK_RULES}
        assert "No space left on device" in keywords
        assert "Network is unreachable" in keywords
