"""Operator command line.

Subcommands: triage a directory of log files, evaluate a labeled
dataset, export fine-tuning data, administer the open-report registry,
validate a config, and serve the HTTP API.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

from .config import load_config, readiness_checks
from .errors import ConfigError, TriageError
from .evaluation import (
    build_digests,
    evaluate_samples,
    export_finetune_dataset,
    load_dataset,
)
from .ingestion import RequestOptions, TestFailure, TriageRequest, load_pattern_registry
from .llm import load_mock_rules
from .registry import ReportRegistry
from .service import TriageServer, make_backend
from .templates import load_templates

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_PARTIAL = 2


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bugblitz", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, backend=False):
        p.add_argument("--config", required=True, help="path to the TOML config file")
        if backend:
            p.add_argument(
                "--backend", choices=("mock", "remote"), default="mock",
                help="chat-completion backend (default: mock)",
            )
            p.add_argument(
                "--mock-rules", default=None,
                help="JSON rule table for the mock backend (default: reference rules)",
            )

    p = sub.add_parser("triage", help="triage every *.log file in a directory")
    p.add_argument("dir", help="directory of per-failure log files")
    add_common(p, backend=True)
    p.add_argument("--dry-run", action="store_true", help="suppress tracker/mail side effects")
    p.add_argument("--out", default="-", help="report destination (default: stdout)")
    p.add_argument("--format", choices=("json", "human"), default="json")
    p.add_argument("--timings", action="store_true", help="include stage timings in the report")

    p = sub.add_parser("evaluate", help="run a labeled dataset and report recall/precision")
    p.add_argument("dataset", help="dataset directory (labels.json + logs/)")
    add_common(p, backend=True)
    p.add_argument("--out", default="-", help="report destination (default: stdout)")
    p.add_argument("--format", choices=("human", "json"), default="human")

    p = sub.add_parser("export-dataset", help="export fine-tuning records from a dataset")
    p.add_argument("dataset", help="dataset directory (labels.json + logs/)")
    add_common(p)
    p.add_argument("--out", default="finetune.jsonl", help="output JSONL path")

    p = sub.add_parser("registry", help="inspect or update the open-report registry")
    add_common(p)
    reg_sub = p.add_subparsers(dest="registry_command", required=True)
    reg_sub.add_parser("list", help="list all known reports")
    rp = reg_sub.add_parser("resolve", help="mark a report resolved")
    rp.add_argument("key", help="tracker key of the report")

    p = sub.add_parser("check-config", help="validate config, patterns, templates and stores")
    add_common(p)

    p = sub.add_parser("serve", help="run the HTTP triage service")
    add_common(p, backend=True)
    p.add_argument("--host", default=None)
    p.add_argument("--port", type=int, default=None)
    return parser


def _write_out(destination: str, text: str) -> None:
    if destination == "-":
        sys.stdout.write(text)
    else:
        Path(destination).write_text(text, encoding="utf-8")


def _make_backend(args):
    if getattr(args, "mock_rules", None) and args.backend != "mock":
        raise ConfigError("--mock-rules only applies to --backend mock")
    rules = load_mock_rules(args.mock_rules) if getattr(args, "mock_rules", None) else None
    return make_backend(args.backend, mock_rules=rules)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_triage(args) -> int:
    config = load_config(args.config)
    directory = Path(args.dir)
    if not directory.is_dir():
        print(f"error: {directory} is not a readable directory", file=sys.stderr)
        return EXIT_ERROR
    from .service import TriageApp

    app = TriageApp(config, _make_backend(args))
    failures = tuple(
        TestFailure(failure_id=path.stem, test_name=path.stem, raw_log=path.read_bytes())
        for path in sorted(directory.glob("*.log"))
    )
    request = TriageRequest(
        request_id=directory.name,
        failures=failures,
        options=RequestOptions(dry_run=args.dry_run),
    )
    response = app.run(request)

    if args.format == "json":
        text = json.dumps(
            response.to_dict(include_timings=args.timings), indent=2, sort_keys=True
        ) + "\n"
    else:
        lines = [f"request {response.request_id}: {response.status}"]
        for outcome in response.outcomes:
            detail = outcome.action_ref or outcome.error or ""
            lines.append(
                f"  {outcome.failure_id:<30} digest={outcome.digest_size:<3} "
                f"action={outcome.action.value:<12} {detail}"
            )
        text = "\n".join(lines) + "\n"
    _write_out(args.out, text)
    return {"completed": EXIT_OK, "partial": EXIT_PARTIAL}.get(response.status, EXIT_ERROR)


def _format_metric(value) -> str:
    return "null" if value is None else f"{value:.4f}"


def cmd_evaluate(args) -> int:
    config = load_config(args.config)
    samples = load_dataset(args.dataset)
    patterns = load_pattern_registry(config.patterns_path.read_bytes())
    templates = load_templates(config.templates_dir)
    _outcomes, report = evaluate_samples(
        samples, patterns, _make_backend(args), config.profiles, templates
    )
    if args.format == "json":
        text = json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"
    else:
        lines = [
            f"samples          {len(samples)}",
            f"recall           {_format_metric(report.recall)} "
            f"({report.bugs_identified}/{report.bugs_total} bugs identified)",
            f"precision        {_format_metric(report.precision)} "
            f"({report.tickets_clean}/{report.tickets_posted} tickets clean)",
            f"root accuracy    {_format_metric(report.root_accuracy)}",
        ]
        text = "\n".join(lines) + "\n"
    _write_out(args.out, text)
    return EXIT_OK


def cmd_export_dataset(args) -> int:
    config = load_config(args.config)
    samples = load_dataset(args.dataset)
    patterns = load_pattern_registry(config.patterns_path.read_bytes())
    templates = load_templates(config.templates_dir)
    digests = build_digests(samples, patterns)
    report = export_finetune_dataset(samples, digests, args.out, templates)
    print(f"wrote {report.records_written} record(s) for {report.samples_exported} sample(s) to {args.out}")
    for rule, count in sorted(report.dropped.items()):
        print(f"dropped[{rule}] = {count}")
    print(f"cleaned_nonprintable = {report.cleaned_nonprintable}")
    return EXIT_OK


def cmd_registry(args) -> int:
    config = load_config(args.config)
    registry = ReportRegistry(config.registry_dir)
    if args.registry_command == "list":
        reports = registry.all_reports()
        if not reports:
            print("registry is empty")
            return EXIT_OK
        for report in reports:
            print(f"{report.ticket.tracker_key:<16} {report.status:<9} {report.summary}")
        return EXIT_OK
    registry.mark_resolved(args.key)
    print(f"resolved {args.key}")
    return EXIT_OK


def cmd_check_config(args) -> int:
    config = load_config(args.config)
    checks = readiness_checks(config, probe_backends=False)
    ok = True
    for check in checks:
        marker = "ok  " if check.ok else "FAIL"
        print(f"[{marker}] {check.name}: {check.detail}")
        ok = ok and check.ok
    return EXIT_OK if ok else EXIT_ERROR


def cmd_serve(args) -> int:
    config = load_config(args.config)
    server = TriageServer(config, _make_backend(args), host=args.host, port=args.port)
    print(f"listening on http://{server.server_address[0]}:{server.port}")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.close()
    return EXIT_OK


_COMMANDS = {
    "triage": cmd_triage,
    "evaluate": cmd_evaluate,
    "export-dataset": cmd_export_dataset,
    "registry": cmd_registry,
    "check-config": cmd_check_config,
    "serve": cmd_serve,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except TriageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
