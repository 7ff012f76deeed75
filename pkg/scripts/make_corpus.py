#!/usr/bin/env python3
"""Generate the bundled synthetic triage corpus.

Builds 30 labeled samples (bugs across several error families including
duplicate groups, environment issues, and logs with no matchable error),
plus the mock rule table tuned for them. Everything is verified against
the real extractor and pipeline before writing, so labels can never
drift from the code: the script asserts recall 1.0, precision 1.0 and
root accuracy 1.0 under the tuned mock, then writes

    tests/data/corpus/labels.json
    tests/data/corpus/logs/<sample_id>.log
    tests/data/mock_rules.json

Run from the repository root: python scripts/make_corpus.py
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

REPO = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(REPO / "src"))

from bugblitz.evaluation import EvaluationSample, build_digests, evaluate_samples
from bugblitz.ingestion import load_pattern_registry
from bugblitz.llm import MockBackend, MockRule, Submodule, default_profiles

DATA_DIR = REPO / "tests" / "data"
CORPUS_DIR = DATA_DIR / "corpus"

SESSION_HEADER = "============================= test session starts =============================="
SUMMARY_LINE = "=========================== short test summary info ============================"


def pytest_log(noise: str, failed_test: str, frames: list[str], error_line: str) -> str:
    lines = [
        SESSION_HEADER,
        "platform linux -- Python 3.10.12, pytest-8.0.0, pluggy-1.4.0",
        noise,
        "collected 24 items",
        "",
        "=================================== FAILURES ===================================",
        f"FAILED {failed_test}",
        "Traceback (most recent call last):",
    ]
    lines.extend("  " + frame for frame in frames)
    lines.append(error_line)
    lines.append(SUMMARY_LINE)
    lines.append("=========================== 1 failed, 23 passed in 41.07s =========================")
    return "\n".join(lines) + "\n"


def runner_log(noise: str, body: list[str]) -> str:
    lines = [
        "[runner] provisioning test node",
        noise,
        "[runner] starting workload",
    ]
    lines.extend(body)
    lines.append("[runner] run finished with non-zero status")
    return "\n".join(lines) + "\n"


TYPEERROR_LINE = (
    "TypeError: Input 'y' of 'Add' Op has type bfloat16 that does not match "
    "type float32 of argument 'x'"
)
TYPEERROR_FRAMES = [
    'File "/ws/proj/tests/test_ops.py", line 88, in test_add_bf16',
    "  result = ops.add(x, y)",
    'File "/ws/proj/framework/op_def_library.py", line 123, in _ExtractInputsAndAttrs',
    "  raise TypeError(",
]
ASSERT_LINE = "AssertionError: recall mismatch: expected 18 identified, counter returned 17"
ASSERT_FRAMES = [
    'File "/ws/proj/tests/test_metrics.py", line 41, in test_recall_counts',
    "  assert identified == expected",
]
IMPORT_LINE = "ImportError: No module named 'torch_ext'"
IMPORT_FRAMES = [
    'File "/ws/proj/tests/test_plugin.py", line 7, in test_load_extension',
    "  import torch_ext",
]
KEYERROR_LINE = "KeyError: 'batch_size'"
KEYERROR_FRAMES = [
    'File "/ws/proj/tests/test_config.py", line 19, in test_defaults',
    '  size = cfg["batch_size"]',
]
VALUEERROR_LINE = "ValueError: shapes (32,16) and (8,4) not aligned for matmul"
VALUEERROR_FRAMES = [
    'File "/ws/proj/tests/test_linalg.py", line 52, in test_matmul_shapes',
    "  out = linalg.matmul(a, b)",
]

PI_DEVICE_LINE = (
    "what():  Native API failed. Native API returns: -1 "
    "(PI_ERROR_DEVICE_NOT_FOUND) -1 (PI_ERROR_DEVICE_NOT_FOUND)"
)
DNNL_LINES = [
    "terminate called after throwing an instance of 'dnnl::error'",
    "  what():  could not create a primitive descriptor for a matmul primitive",
]
SEGFAULT_LINE = "Segmentation fault (core dumped)"
CUDA_LINE = "RuntimeError: CUDA error: device-side assert triggered"
ATTR_LINE = "AttributeError: 'NoneType' object has no attribute 'shape'"
INDEX_LINE = "IndexError: list index out of range"
ZERODIV_LINE = "ZeroDivisionError: division by zero"

NOSPACE_LINE = "OSError: [Errno 28] No space left on device"
QUOTA_LINE = "OSError: [Errno 122] Disk quota exceeded"
NETUNREACH_LINE = "ConnectionError: [Errno 101] Network is unreachable"
CONNTIMEOUT_LINE = "TimeoutError: [Errno 110] Connection timed out"
DNSFAIL_LINE = "socket.gaierror: [Errno -3] Temporary failure in name resolution"

NOERROR_BODY = [
    "worker gw1 crashed while running tests/test_io.py::test_stream",
    "replacing crashed worker gw1",
    "interrupted: one worker crashed without writing a report",
]


def bug(sample_id, log, summ, desc, root_idx, group=None):
    return {
        "sample_id": sample_id,
        "log": log,
        "label": {
            "summ": summ,
            "root_err_idx": root_idx,
            "desc": desc,
            "is_bug": True,
            **({"duplicate_group": group} if group else {}),
        },
    }


def env(sample_id, log, summ, desc):
    return {
        "sample_id": sample_id,
        "log": log,
        "label": {"summ": summ, "root_err_idx": [1], "desc": desc, "is_bug": False},
    }


def build_samples() -> list[dict]:
    samples = []
    for tag, node in (("01", "xeon-sp4"), ("02", "xeon-sp5"), ("03", "arc-a770")):
        samples.append(
            bug(
                f"typeerror-{tag}",
                pytest_log(
                    f"rootdir: /ws/proj, node: {node}",
                    "tests/test_ops.py::test_add_bf16",
                    TYPEERROR_FRAMES,
                    TYPEERROR_LINE,
                ),
                "Test case failed with TypeError",
                TYPEERROR_LINE,
                [3],
                group="g-typeerror",
            )
        )
    for tag, node in (("01", "gpu-node-3"), ("02", "gpu-node-7")):
        samples.append(
            bug(
                f"pidevice-{tag}",
                runner_log(f"[runner] node {node}, driver 31.0.101", [PI_DEVICE_LINE]),
                "Test case failed with PI_ERROR_DEVICE_NOT_FOUND",
                PI_DEVICE_LINE,
                [1],
                group="g-pidevice",
            )
        )
    for tag, node in (("01", "spr-bench-1"), ("02", "spr-bench-2")):
        samples.append(
            bug(
                f"dnnl-{tag}",
                runner_log(f"[runner] node {node}, onednn smoke suite", DNNL_LINES),
                "Test case failed with dnnl::error",
                DNNL_LINES[0],
                [1, 2],
                group="g-dnnl",
            )
        )
    for tag, node in (("01", "container c81f"), ("02", "container 4ad0")):
        samples.append(
            bug(
                f"segfault-{tag}",
                runner_log(f"[runner] {node}, inference smoke test", [SEGFAULT_LINE]),
                "Test crashed with Segmentation fault",
                SEGFAULT_LINE,
                [1],
                group="g-segfault",
            )
        )
    for tag, node in (("01", "shard 2/8"), ("02", "shard 6/8")):
        samples.append(
            bug(
                f"assert-{tag}",
                pytest_log(
                    f"rootdir: /ws/proj, {node}",
                    "tests/test_metrics.py::test_recall_counts",
                    ASSERT_FRAMES,
                    ASSERT_LINE,
                ),
                "Test case failed with AssertionError",
                ASSERT_LINE,
                [3],
                group="g-assert",
            )
        )
    singles = [
        ("import-01", "tests/test_plugin.py::test_load_extension", IMPORT_FRAMES, IMPORT_LINE,
         "Test case failed with ImportError"),
        ("keyerror-01", "tests/test_config.py::test_defaults", KEYERROR_FRAMES, KEYERROR_LINE,
         "Test case failed with KeyError"),
        ("valueerror-01", "tests/test_linalg.py::test_matmul_shapes", VALUEERROR_FRAMES,
         VALUEERROR_LINE, "Test case failed with ValueError"),
    ]
    for sample_id, failed_test, frames, line, summ in singles:
        samples.append(
            bug(
                sample_id,
                pytest_log("rootdir: /ws/proj", failed_test, frames, line),
                summ,
                line,
                [3],
            )
        )
    runner_singles = [
        ("cuda-01", CUDA_LINE, "Test case failed with RuntimeError"),
        ("attr-01", ATTR_LINE, "Test case failed with AttributeError"),
        ("index-01", INDEX_LINE, "Test case failed with IndexError"),
        ("zerodiv-01", ZERODIV_LINE, "Test case failed with ZeroDivisionError"),
    ]
    for sample_id, line, summ in runner_singles:
        samples.append(
            bug(
                sample_id,
                runner_log(f"[runner] batch eval, case {sample_id}", [line]),
                summ,
                line,
                [1],
            )
        )

    env_samples = [
        ("nospace-01", NOSPACE_LINE, "Disk out of space on test runner"),
        ("nospace-02", NOSPACE_LINE, "Disk out of space on test runner"),
        ("quota-01", QUOTA_LINE, "Disk quota exceeded on shared scratch volume"),
        ("netunreach-01", NETUNREACH_LINE, "Test network is unreachable from runner"),
        ("netunreach-02", NETUNREACH_LINE, "Test network is unreachable from runner"),
        ("conntimeout-01", CONNTIMEOUT_LINE, "Connection to artifact server timed out"),
        ("conntimeout-02", CONNTIMEOUT_LINE, "Connection to artifact server timed out"),
        ("dnsfail-01", DNSFAIL_LINE, "Name resolution failed on test runner"),
    ]
    for sample_id, line, summ in env_samples:
        samples.append(
            env(sample_id, runner_log(f"[runner] case {sample_id}", [line]), summ, line)
        )

    for tag in ("01", "02", "03", "04"):
        samples.append(
            {
                "sample_id": f"noerror-{tag}",
                "log": runner_log(f"[runner] case noerror-{tag}", NOERROR_BODY),
                "label": {
                    "summ": "Worker crashed without error output",
                    "root_err_idx": [],
                    "desc": NOERROR_BODY[-1],
                    "is_bug": False,
                },
            }
        )
    return samples


TUNED_RULES = [
    # diagnosis: environment signatures answer False, hardware bug signatures True
    {"submodule": "bug_diagnosis", "keyword": "PI_ERROR_DEVICE_NOT_FOUND", "verdict": True},
    {"submodule": "bug_diagnosis", "keyword": "dnnl::error", "verdict": True},
    {"submodule": "bug_diagnosis", "keyword": "No space left on device", "verdict": False},
    {"submodule": "bug_diagnosis", "keyword": "Disk quota exceeded", "verdict": False},
    {"submodule": "bug_diagnosis", "keyword": "Network is unreachable", "verdict": False},
    {"submodule": "bug_diagnosis", "keyword": "Connection timed out", "verdict": False},
    {"submodule": "bug_diagnosis", "keyword": "Temporary failure in name resolution", "verdict": False},
    # root analysis: pytest-shaped digests put the exception third
    {"submodule": "root_error_analysis", "keyword": "TypeError:", "index": 3},
    {"submodule": "root_error_analysis", "keyword": "AssertionError:", "index": 3},
    {"submodule": "root_error_analysis", "keyword": "ImportError:", "index": 3},
    {"submodule": "root_error_analysis", "keyword": "KeyError:", "index": 3},
    {"submodule": "root_error_analysis", "keyword": "ValueError:", "index": 3},
    {"submodule": "root_error_analysis", "keyword": "dnnl::error", "index": 1},
    # summarization: one concise summary per error family
    {"submodule": "bug_summarization", "keyword": "TypeError:", "summary": "Test case failed with TypeError in Add op"},
    {"submodule": "bug_summarization", "keyword": "PI_ERROR_DEVICE_NOT_FOUND", "summary": "Native API failed with PI_ERROR_DEVICE_NOT_FOUND"},
    {"submodule": "bug_summarization", "keyword": "dnnl::error", "summary": "Test failed with dnnl::error primitive failure"},
    {"submodule": "bug_summarization", "keyword": "Segmentation fault", "summary": "Segmentation fault during inference smoke test"},
    {"submodule": "bug_summarization", "keyword": "AssertionError:", "summary": "Test case failed with AssertionError in recall counting"},
    {"submodule": "bug_summarization", "keyword": "ImportError:", "summary": "ImportError missing module torch_ext"},
    {"submodule": "bug_summarization", "keyword": "KeyError:", "summary": "KeyError batch_size missing from config"},
    {"submodule": "bug_summarization", "keyword": "ValueError:", "summary": "ValueError shape mismatch in matmul"},
    {"submodule": "bug_summarization", "keyword": "CUDA error", "summary": "RuntimeError CUDA device-side assert triggered"},
    {"submodule": "bug_summarization", "keyword": "AttributeError:", "summary": "AttributeError NoneType object has no attribute shape"},
    {"submodule": "bug_summarization", "keyword": "IndexError:", "summary": "IndexError list index out of range"},
    {"submodule": "bug_summarization", "keyword": "ZeroDivisionError:", "summary": "ZeroDivisionError in throughput computation"},
]


def verify(samples: list[dict]) -> None:
    patterns = load_pattern_registry((DATA_DIR / "patterns.toml").read_bytes())
    eval_samples = [
        EvaluationSample(
            sample_id=s["sample_id"],
            raw_log=s["log"],
            summ=s["label"]["summ"],
            root_err_idx=tuple(s["label"]["root_err_idx"]),
            desc=s["label"]["desc"],
            is_bug=s["label"]["is_bug"],
            duplicate_group=s["label"].get("duplicate_group"),
        )
        for s in samples
    ]
    digests = build_digests(eval_samples, patterns)
    for s in eval_samples:
        digest = digests[s.sample_id]
        for idx in s.root_err_idx:
            assert idx <= len(digest.records), (
                f"{s.sample_id}: label index {idx} beyond digest of {len(digest.records)}"
            )
        if s.root_err_idx:
            target = digest.records[s.root_err_idx[0] - 1].matched_line
            assert s.desc in target or target in s.desc, (
                f"{s.sample_id}: desc does not match root record: {target!r}"
            )
        if not s.is_bug and "noerror" in s.sample_id:
            assert len(digest.records) == 0, f"{s.sample_id}: expected an empty digest"

    rules = [
        MockRule(Submodule(r["submodule"]), r["keyword"],
                 r.get("verdict", r.get("index", r.get("summary"))))
        for r in TUNED_RULES
    ]
    backend = MockBackend(rules)
    _outcomes, report = evaluate_samples(
        eval_samples, patterns, backend, default_profiles(), max_workers=1
    )
    assert report.recall == 1.0, f"recall {report.recall}"
    assert report.precision == 1.0, f"precision {report.precision}"
    assert report.root_accuracy == 1.0, f"root accuracy {report.root_accuracy}"
    expected_tickets = 12
    assert report.tickets_posted == expected_tickets, (
        f"expected {expected_tickets} tickets, got {report.tickets_posted}"
    )
    print(
        f"verified: {len(eval_samples)} samples, recall={report.recall}, "
        f"precision={report.precision}, root_accuracy={report.root_accuracy}, "
        f"tickets={report.tickets_posted}"
    )


def main() -> None:
    samples = build_samples()
    assert len(samples) == 30, f"expected 30 samples, built {len(samples)}"
    verify(samples)

    logs_dir = CORPUS_DIR / "logs"
    logs_dir.mkdir(parents=True, exist_ok=True)
    labels = {}
    for s in sorted(samples, key=lambda s: s["sample_id"]):
        (logs_dir / f"{s['sample_id']}.log").write_text(s["log"], encoding="utf-8")
        labels[s["sample_id"]] = s["label"]
    (CORPUS_DIR / "labels.json").write_text(
        json.dumps(labels, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    (DATA_DIR / "mock_rules.json").write_text(
        json.dumps(TUNED_RULES, indent=2) + "\n", encoding="utf-8"
    )
    print(f"wrote {len(samples)} samples to {CORPUS_DIR}")


if __name__ == "__main__":
    main()
