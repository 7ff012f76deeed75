"""Service configuration: one TOML document, eagerly validated.

Sections: [server], top-level paths (patterns_path, registry_dir,
templates_dir), [profiles.<stage>] (all four stages or none; a partial
profiles section fails fast at load), and optional [tracker] / [mail].
Relative paths resolve against the config file's directory.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

try:
    import tomllib
except ModuleNotFoundError:  # py3.10
    import tomli as tomllib

from .action import MailConfig, TrackerConfig
from .errors import ConfigError
from .ingestion import load_pattern_registry
from .llm import ModelProfile, Submodule, default_profiles, validate_profiles
from .templates import load_templates


@dataclass(frozen=True)
class ServerConfig:
    host: str = "127.0.0.1"
    port: int = 8315
    max_body_bytes: int = 32 * 2**20
    job_ttl_seconds: float = 3600.0
    probe_backends: bool = False


@dataclass(frozen=True)
class AppConfig:
    patterns_path: Path
    registry_dir: Path
    server: ServerConfig = ServerConfig()
    profiles: dict[Submodule, ModelProfile] = field(default_factory=default_profiles)
    tracker: Optional[TrackerConfig] = None
    mail: Optional[MailConfig] = None
    templates_dir: Optional[Path] = None
    source_path: Optional[Path] = None


def _require(section: dict, key: str, where: str):
    try:
        return section[key]
    except KeyError:
        raise ConfigError(f"config: missing required key {key!r} in {where}") from None


def _profile_from(sub: Submodule, section: dict, defaults: ModelProfile) -> ModelProfile:
    return ModelProfile(
        submodule=sub,
        model_name=str(section.get("model_name", defaults.model_name)),
        endpoint=str(section.get("endpoint", defaults.endpoint)),
        temperature=float(section.get("temperature", defaults.temperature)),
        max_tokens=int(section.get("max_tokens", defaults.max_tokens)),
        timeout=float(section.get("timeout", defaults.timeout)),
        retries=int(section.get("retries", defaults.retries)),
    )


def load_config(path: str | Path) -> AppConfig:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    try:
        doc = tomllib.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"malformed config file {path}: {exc}") from exc
    try:
        return _build_config(path, doc)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"config {path}: invalid value: {exc}") from exc


def _build_config(path: Path, doc: dict) -> AppConfig:
    base = path.parent

    def resolve(p: str) -> Path:
        candidate = Path(p)
        return candidate if candidate.is_absolute() else (base / candidate)

    patterns_path = resolve(str(_require(doc, "patterns_path", "the top level")))
    registry_dir = resolve(str(_require(doc, "registry_dir", "the top level")))
    templates_dir = doc.get("templates_dir")
    templates_path = resolve(str(templates_dir)) if templates_dir else None

    server_doc = doc.get("server", {})
    server = ServerConfig(
        host=str(server_doc.get("host", "127.0.0.1")),
        port=int(server_doc.get("port", 8315)),
        max_body_bytes=int(server_doc.get("max_body_bytes", 32 * 2**20)),
        job_ttl_seconds=float(server_doc.get("job_ttl_seconds", 3600.0)),
        probe_backends=bool(server_doc.get("probe_backends", False)),
    )

    defaults = default_profiles()
    profiles_doc = doc.get("profiles")
    if profiles_doc is None:
        profiles = defaults
    else:
        if not isinstance(profiles_doc, dict):
            raise ConfigError("config: [profiles] must be a table of stage sections")
        profiles = {}
        for sub in Submodule:
            section = profiles_doc.get(sub.value)
            if section is None:
                raise ConfigError(
                    f"config: [profiles] is present but lacks [profiles.{sub.value}]"
                )
            profiles[sub] = _profile_from(sub, section, defaults[sub])
        unknown = set(profiles_doc) - {sub.value for sub in Submodule}
        if unknown:
            raise ConfigError(f"config: unknown profile sections: {', '.join(sorted(unknown))}")
    validate_profiles(profiles)

    tracker = None
    tracker_doc = doc.get("tracker")
    if tracker_doc is not None:
        tracker = TrackerConfig(
            base_url=str(_require(tracker_doc, "base_url", "[tracker]")),
            project_key=str(_require(tracker_doc, "project_key", "[tracker]")),
            issue_type=str(tracker_doc.get("issue_type", "Bug")),
            retries=int(tracker_doc.get("retries", 2)),
            timeout=float(tracker_doc.get("timeout", 10.0)),
            extra_fields=dict(tracker_doc.get("extra_fields", {})),
        )

    mail = None
    mail_doc = doc.get("mail")
    if mail_doc is not None:
        mail = MailConfig(
            relay_host=str(_require(mail_doc, "relay_host", "[mail]")),
            relay_port=int(mail_doc.get("relay_port", 25)),
            sender=str(mail_doc.get("sender", "triage@localhost")),
            recipients=tuple(str(r) for r in mail_doc.get("recipients", [])),
            starttls=bool(mail_doc.get("starttls", False)),
            timeout=float(mail_doc.get("timeout", 10.0)),
            retries=int(mail_doc.get("retries", 1)),
        )

    return AppConfig(
        patterns_path=patterns_path,
        registry_dir=registry_dir,
        server=server,
        profiles=profiles,
        tracker=tracker,
        mail=mail,
        templates_dir=templates_path,
        source_path=path,
    )


@dataclass(frozen=True)
class Check:
    name: str
    ok: bool
    detail: str


def readiness_checks(config: AppConfig, probe_backends: Optional[bool] = None) -> list[Check]:
    """Validate everything serving would need, without side effects.

    The same checks back both the health endpoint and `check-config`,
    so a passing check-config means the service would come up ready.
    Backend probing is optional and off by default.
    """
    checks: list[Check] = []

    try:
        patterns = load_pattern_registry(config.patterns_path.read_bytes())
        checks.append(Check("patterns_path", True, f"{len(patterns)} pattern(s)"))
    except (OSError, ConfigError) as exc:
        checks.append(Check("patterns_path", False, str(exc)))

    try:
        templates = load_templates(config.templates_dir)
        checks.append(Check("templates", True, f"{len(templates.ids())} template(s)"))
    except Exception as exc:
        checks.append(Check("templates", False, str(exc)))

    registry_dir = config.registry_dir
    try:
        from .registry import ReportRegistry

        store = ReportRegistry(registry_dir)
        checks.append(Check("registry_dir", True, f"{len(store.open_reports())} open report(s)"))
    except Exception as exc:
        checks.append(Check("registry_dir", False, str(exc)))

    try:
        validate_profiles(config.profiles)
        checks.append(Check("profiles", True, "all four stages configured"))
    except ConfigError as exc:
        checks.append(Check("profiles", False, str(exc)))

    do_probe = config.server.probe_backends if probe_backends is None else probe_backends
    if not do_probe:
        checks.append(Check("backend_probe", True, "skipped"))
    else:
        import requests

        endpoints = sorted({p.endpoint for p in config.profiles.values()})
        for endpoint in endpoints:
            try:
                requests.get(endpoint, timeout=3)
                checks.append(Check(f"backend {endpoint}", True, "reachable"))
            except requests.RequestException as exc:
                checks.append(Check(f"backend {endpoint}", False, str(exc)))
    return checks
