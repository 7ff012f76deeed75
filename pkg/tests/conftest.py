from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from bugblitz.evaluation import load_dataset
from bugblitz.ingestion import load_pattern_registry
from bugblitz.llm import MockBackend, Submodule, default_profiles, load_mock_rules
from bugblitz.templates import TemplateSet

DATA_DIR = Path(__file__).parent / "data"
CORPUS_DIR = DATA_DIR / "corpus"


@pytest.fixture(scope="session")
def data_dir() -> Path:
    return DATA_DIR


@pytest.fixture(scope="session")
def patterns():
    return load_pattern_registry((DATA_DIR / "patterns.toml").read_bytes())


@pytest.fixture(scope="session")
def profiles():
    return default_profiles()


@pytest.fixture(scope="session")
def templates():
    return TemplateSet()


@pytest.fixture(scope="session")
def corpus_samples():
    return load_dataset(CORPUS_DIR)


@pytest.fixture(scope="session")
def tuned_rules():
    return load_mock_rules(DATA_DIR / "mock_rules.json")


@pytest.fixture
def tuned_backend(tuned_rules):
    return MockBackend(tuned_rules)


@pytest.fixture
def profile_for(profiles):
    def _get(submodule: Submodule):
        return profiles[submodule]

    return _get


@pytest.fixture
def write_config(tmp_path):
    """Write a minimal TOML config into tmp_path and return its path.

    Keyword sections (tracker=..., mail=...) are appended verbatim-ish;
    paths default to the bundled patterns file and a tmp registry dir.
    """

    def _write(
        patterns_path: Path | None = None,
        registry_dir: Path | None = None,
        tracker_url: str | None = None,
        mail_port: int | None = None,
        recipients: tuple[str, ...] = ("qa@example.com",),
        extra: str = "",
    ) -> Path:
        patterns_path = patterns_path or (DATA_DIR / "patterns.toml")
        registry_dir = registry_dir or (tmp_path / "registry")
        lines = [
            f'patterns_path = "{patterns_path}"',
            f'registry_dir = "{registry_dir}"',
        ]
        if tracker_url:
            lines += [
                "[tracker]",
                f'base_url = "{tracker_url}"',
                'project_key = "TEST"',
                'issue_type = "Bug"',
                "retries = 1",
                "timeout = 5.0",
            ]
        if mail_port:
            lines += [
                "[mail]",
                'relay_host = "127.0.0.1"',
                f"relay_port = {mail_port}",
                'sender = "triage@example.com"',
                "recipients = [" + ", ".join(f'"{r}"' for r in recipients) + "]",
                "retries = 0",
                "timeout = 3.0",
            ]
        if extra:
            lines.append(extra)
        config_path = tmp_path / "config.toml"
        config_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return config_path

    return _write
