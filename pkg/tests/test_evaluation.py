from __future__ import annotations

import json
import logging

import pytest
from hypothesis import given, settings, strategies as st

from bugblitz.action import ActionKind
from bugblitz.errors import ConfigError
from bugblitz.evaluation import (
    EvaluationSample,
    build_digests,
    compute_precision,
    compute_recall,
    evaluate_outcomes,
    export_finetune_dataset,
    key_error_token,
    load_dataset,
    mismatched_label_tokens,
    score_root_accuracy,
    summary_matches,
)
from bugblitz.ingestion import ErrorRecord
from bugblitz.pipeline import BugSummary, DiagnosisVerdict, RootCauseFinding, TriageOutcome

from fakes import make_registry


def sample(
    sample_id,
    is_bug=True,
    summ="Test case failed with TypeError",
    desc="TypeError: Input 'y' of 'Add' Op mismatched",
    root_idx=(1,),
    group=None,
    raw_log="TypeError: Input 'y' of 'Add' Op mismatched\n",
) -> EvaluationSample:
    return EvaluationSample(
        sample_id=sample_id,
        raw_log=raw_log,
        summ=summ,
        root_err_idx=tuple(root_idx),
        desc=desc,
        is_bug=is_bug,
        duplicate_group=group,
    )


def outcome(
    failure_id,
    predicted=None,
    action=ActionKind.NONE,
    summary_text=None,
    chosen_index=None,
    digest_size=1,
) -> TriageOutcome:
    out = TriageOutcome(failure_id=failure_id, digest_size=digest_size, action=action)
    if predicted is not None:
        out.verdict = DiagnosisVerdict(failure_id, predicted, "reasoning", "raw")
    if summary_text is not None:
        out.summary = BugSummary.create(failure_id, summary_text, "generated description")
    if chosen_index is not None:
        record = ErrorRecord(chosen_index, "line", "line", "p", chosen_index)
        out.root_cause = RootCauseFinding(failure_id, chosen_index, record, "", False)
    return out


class TestLoadDataset:
    def test_bundled_corpus_loads(self, corpus_samples):
        assert len(corpus_samples) == 30
        bugs = [s for s in corpus_samples if s.is_bug]
        assert len(bugs) == 18
        groups = {s.duplicate_group for s in corpus_samples if s.duplicate_group}
        assert groups == {"g-typeerror", "g-pidevice", "g-dnnl", "g-segfault", "g-assert"}

    def test_three_field_label_shape_loads_with_defaults(self, tmp_path):
        (tmp_path / "logs").mkdir()
        (tmp_path / "logs" / "PROJ-1-0234.log").write_text(
            "TypeError: Input 'y' of 'Add' Op has type bfloat16\n"
        )
        labels = {
            "PROJ-1-0234": {
                "summ": "Test case failed with TypeError",
                "root_err_idx": [1],
                "desc": "TypeError: Input 'y' of 'Add' Op has type bfloat16",
            }
        }
        (tmp_path / "labels.json").write_text(json.dumps(labels))
        samples = load_dataset(tmp_path)
        assert len(samples) == 1
        assert samples[0].is_bug is True
        assert samples[0].duplicate_group is None
        assert samples[0].root_err_idx == (1,)

    def test_empty_dataset(self, tmp_path):
        (tmp_path / "labels.json").write_text("{}")
        (tmp_path / "logs").mkdir()
        assert load_dataset(tmp_path) == []

    def test_label_without_log_errors_naming_sample(self, tmp_path):
        (tmp_path / "logs").mkdir()
        (tmp_path / "labels.json").write_text(
            json.dumps({"GHOST-1": {"summ": "s", "root_err_idx": [1], "desc": "d"}})
        )
        with pytest.raises(ConfigError, match="GHOST-1"):
            load_dataset(tmp_path)

    def test_malformed_labels_reports_location(self, tmp_path):
        (tmp_path / "labels.json").write_text('{\n  "x": {oops}\n}')
        with pytest.raises(ConfigError, match="line 2"):
            load_dataset(tmp_path)

    def test_extra_log_files_warned_not_fatal(self, tmp_path, caplog):
        (tmp_path / "logs").mkdir()
        (tmp_path / "logs" / "stray.log").write_text("noise")
        (tmp_path / "labels.json").write_text("{}")
        with caplog.at_level(logging.WARNING):
            assert load_dataset(tmp_path) == []
        assert any("stray.log" in message for message in caplog.messages)

    def test_bug_without_root_index_rejected(self, tmp_path):
        (tmp_path / "logs").mkdir()
        (tmp_path / "logs" / "b1.log").write_text("x")
        (tmp_path / "labels.json").write_text(
            json.dumps({"b1": {"summ": "s", "root_err_idx": [], "desc": "d", "is_bug": True}})
        )
        with pytest.raises(ConfigError, match="non-empty"):
            load_dataset(tmp_path)


class TestRecall:
    def test_all_identified(self):
        samples = [sample(f"s{i}") for i in range(10)]
        outcomes = [outcome(f"s{i}", predicted=True) for i in range(10)]
        assert compute_recall(outcomes, samples) == 1.0

    def test_seven_of_ten(self):
        samples = [sample(f"s{i}") for i in range(10)]
        outcomes = [outcome(f"s{i}", predicted=(i < 7)) for i in range(10)]
        assert compute_recall(outcomes, samples) == 0.7

    def test_no_bugs_is_null(self):
        samples = [sample("s0", is_bug=False, root_idx=())]
        assert compute_recall([outcome("s0", predicted=False)], samples) is None

    def test_missing_verdict_counts_as_missed(self):
        samples = [sample("s0"), sample("s1")]
        outcomes = [outcome("s0", predicted=True), outcome("s1", predicted=None)]
        assert compute_recall(outcomes, samples) == 0.5


class TestPrecision:
    def test_nine_clean_of_thirteen(self):
        samples, outcomes = [], []
        for i in range(13):
            clean = i < 9
            samples.append(sample(f"s{i}", summ="Fails with TypeError"))
            outcomes.append(
                outcome(
                    f"s{i}",
                    predicted=True,
                    action=ActionKind.TICKET_FILED,
                    summary_text="TypeError in Add op" if clean else "something vague",
                )
            )
        assert compute_precision(outcomes, samples) == pytest.approx(9 / 13, abs=1e-12)

    def test_all_clean(self):
        samples = [sample("s0")]
        outcomes = [
            outcome("s0", predicted=True, action=ActionKind.TICKET_FILED,
                    summary_text="TypeError in Add op")
        ]
        assert compute_precision(outcomes, samples) == 1.0

    def test_ticket_for_non_bug_sample_is_unclean(self):
        samples = [sample("s0", is_bug=False, root_idx=())]
        outcomes = [
            outcome("s0", predicted=True, action=ActionKind.TICKET_FILED,
                    summary_text="TypeError in Add op")
        ]
        assert compute_precision(outcomes, samples) == 0.0

    def test_missed_duplicate_is_unclean(self):
        samples = [sample("s0", group="g"), sample("s1", group="g")]
        outcomes = [
            outcome("s0", predicted=True, action=ActionKind.TICKET_FILED,
                    summary_text="TypeError in Add op"),
            outcome("s1", predicted=True, action=ActionKind.TICKET_FILED,
                    summary_text="TypeError in Add op"),
        ]
        # both posted for one group: first eligible, second needed a human merge
        assert compute_precision(outcomes, samples) == 0.5

    def test_nothing_posted_is_null(self):
        assert compute_precision([outcome("s0", predicted=False)], [sample("s0")]) is None


class TestRootAccuracy:
    def test_membership_scoring(self):
        samples = [
            sample("s0", root_idx=(1,)),
            sample("s1", root_idx=(1, 2)),
            sample("s2", root_idx=(1,)),
        ]
        outcomes = [
            outcome("s0", chosen_index=1),
            outcome("s1", chosen_index=2),
            outcome("s2", chosen_index=3),
        ]
        assert score_root_accuracy(outcomes, samples) == pytest.approx(2 / 3)

    def test_empty_digest_and_empty_label_excluded(self):
        samples = [sample("s0", root_idx=(1,)), sample("s1", is_bug=False, root_idx=())]
        outcomes = [outcome("s0", chosen_index=1, digest_size=0), outcome("s1")]
        assert score_root_accuracy(outcomes, samples) is None


class TestSummaryMatching:
    @pytest.mark.parametrize(
        "label,expected_token",
        [
            ("Test case failed with TypeError", "TypeError"),
            ("Test case failed with dnnl::error", "dnnl::error"),
            ("Native API failed with PI_ERROR_DEVICE_NOT_FOUND", "PI_ERROR_DEVICE_NOT_FOUND"),
            ("Test crashed with Segmentation fault", "Segmentation"),
        ],
    )
    def test_key_error_token(self, label, expected_token):
        assert key_error_token(label) == expected_token

    def test_containment_is_case_and_whitespace_insensitive(self):
        assert summary_matches("typeerror  in add op", "Fails with TypeError")
        assert not summary_matches("some vague words", "Fails with TypeError")


_sample_strategy = st.lists(
    st.tuples(
        st.booleans(),                      # is_bug
        st.sampled_from([None, "g1", "g2"]),  # duplicate_group
        st.sampled_from([None, True, False]),  # predicted verdict
        st.booleans(),                      # posted a ticket
        st.booleans(),                      # generated summary matches label
    ),
    min_size=0,
    max_size=50,
)


@settings(max_examples=100, deadline=None)
@given(_sample_strategy)
def test_metrics_match_naive_counting_oracle(rows):
    samples, outcomes = [], []
    for i, (is_bug, group, predicted, posted, matches) in enumerate(rows):
        sid = f"s{i:02d}"
        samples.append(
            sample(sid, is_bug=is_bug, root_idx=(1,) if is_bug else (), group=group,
                   summ="Fails with TypeError")
        )
        outcomes.append(
            outcome(
                sid,
                predicted=predicted,
                action=ActionKind.TICKET_FILED if posted else ActionKind.NOTIFIED,
                summary_text=("has TypeError inside" if matches else "vague words")
                if posted
                else None,
            )
        )

    # independent naive counting
    bugs = [s for s in samples if s.is_bug]
    by_id = {o.failure_id: o for o in outcomes}
    identified = 0
    for s in bugs:
        o = by_id[s.sample_id]
        if o.verdict is not None and o.verdict.is_bug:
            identified += 1
    expected_recall = identified / len(bugs) if bugs else None

    posted_outcomes = [o for o in outcomes if o.action is ActionKind.TICKET_FILED]
    by_sample = {s.sample_id: s for s in samples}
    clean = 0
    for o in posted_outcomes:
        s = by_sample[o.failure_id]
        if not s.is_bug:
            continue
        if o.summary is None or not summary_matches(o.summary.summary, s.summ):
            continue
        if s.duplicate_group is not None:
            earlier = [
                p
                for p in posted_outcomes
                if by_sample[p.failure_id].duplicate_group == s.duplicate_group
                and p.failure_id < o.failure_id
            ]
            if earlier:
                continue
        clean += 1
    expected_precision = clean / len(posted_outcomes) if posted_outcomes else None

    assert compute_recall(outcomes, samples) == expected_recall
    assert compute_precision(outcomes, samples) == expected_precision


class TestMonotonicity:
    def test_flipping_missed_bug_never_decreases_recall(self):
        samples = [sample(f"s{i}") for i in range(6)]
        outcomes = [outcome(f"s{i}", predicted=(i % 2 == 0)) for i in range(6)]
        before = compute_recall(outcomes, samples)
        outcomes[1].verdict = DiagnosisVerdict("s1", True, "flipped", "raw")
        after = compute_recall(outcomes, samples)
        assert after >= before

    def test_adding_unclean_ticket_never_increases_precision(self):
        samples = [sample("s0"), sample("s1", is_bug=False, root_idx=())]
        outcomes = [
            outcome("s0", predicted=True, action=ActionKind.TICKET_FILED,
                    summary_text="TypeError in Add op"),
            outcome("s1", predicted=False),
        ]
        before = compute_precision(outcomes, samples)
        outcomes[1].action = ActionKind.TICKET_FILED
        outcomes[1].summary = BugSummary.create("s1", "anything", "d")
        after = compute_precision(outcomes, samples)
        assert after <= before


REGISTRY = make_registry(("typeerr", "TypeError", 10), ("keyerr", "KeyError", 10))


def export_corpus():
    clean_log = "setup line\nTypeError: Input 'y' of 'Add' Op mismatched\nteardown\n"
    return [
        sample("clean-1", raw_log=clean_log),
        sample(
            "env-1",
            is_bug=False,
            root_idx=(),
            summ="Disk out of space on runner",
            desc="TypeError: Input 'y' of 'Add' Op mismatched",
            raw_log=clean_log,
        ),
    ]


class TestExport:
    def test_clean_bug_sample_yields_three_task_records(self, tmp_path):
        samples = export_corpus()[:1]
        digests = build_digests(samples, REGISTRY)
        out = tmp_path / "finetune.jsonl"
        report = export_finetune_dataset(samples, digests, out)
        records = [json.loads(line) for line in out.read_text().splitlines()]
        assert report.records_written == 3
        assert sorted(r["task"] for r in records) == ["diagnosis", "root_analysis", "summarization"]
        diagnosis = next(r for r in records if r["task"] == "diagnosis")
        assert diagnosis["completion"] == "Final answer: True"
        root = next(r for r in records if r["task"] == "root_analysis")
        assert root["completion"] == "1"

    def test_env_sample_yields_diagnosis_record_only(self, tmp_path):
        samples = export_corpus()[1:]
        digests = build_digests(samples, REGISTRY)
        report = export_finetune_dataset(samples, digests, tmp_path / "out.jsonl")
        assert report.records_written == 1
        record = json.loads((tmp_path / "out.jsonl").read_text())
        assert record["task"] == "diagnosis"
        assert record["completion"] == "Final answer: False"

    def test_label_log_mismatch_dropped_and_counted(self, tmp_path):
        bad = sample(
            "mismatch-1",
            summ="PROJ-9 pipeline failed with TypeError",
            raw_log="setup\nTypeError: something else\nteardown\n",
            desc="TypeError: something else",
        )
        assert "PROJ-9" in mismatched_label_tokens(bad)
        digests = build_digests([bad], REGISTRY)
        report = export_finetune_dataset([bad], digests, tmp_path / "out.jsonl")
        assert report.records_written == 0
        assert report.dropped["label_log_mismatch"] == 1

    def test_exact_duplicates_collapsed_and_counted(self, tmp_path):
        base = export_corpus()[0]
        twin = EvaluationSample(
            sample_id="clean-2",
            raw_log=base.raw_log,
            summ=base.summ,
            root_err_idx=base.root_err_idx,
            desc=base.desc,
            is_bug=base.is_bug,
            duplicate_group=base.duplicate_group,
        )
        digests = build_digests([base, twin], REGISTRY)
        report = export_finetune_dataset([base, twin], digests, tmp_path / "out.jsonl")
        assert report.samples_exported == 1
        assert report.dropped["exact_duplicate"] == 1
        assert report.records_written == 3

    def test_empty_digest_dropped_under_its_own_rule(self, tmp_path):
        ghost = sample(
            "ghost-1", raw_log="nothing matches here\n", desc="nothing matches here",
            summ="vague failure",
        )
        digests = build_digests([ghost], REGISTRY)
        report = export_finetune_dataset([ghost], digests, tmp_path / "out.jsonl")
        assert report.records_written == 0
        assert report.dropped["empty_digest"] == 1

    def test_out_of_range_root_index_dropped(self, tmp_path):
        oor = sample("oor-1", root_idx=(5,))
        digests = build_digests([oor], REGISTRY)
        report = export_finetune_dataset([oor], digests, tmp_path / "out.jsonl")
        assert report.dropped["root_index_out_of_range"] == 1

    def test_export_is_byte_deterministic(self, tmp_path):
        samples = export_corpus()
        digests = build_digests(samples, REGISTRY)
        export_finetune_dataset(samples, digests, tmp_path / "a.jsonl")
        export_finetune_dataset(samples, digests, tmp_path / "b.jsonl")
        assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()

    def test_nonprintable_noise_stripped_and_counted(self, tmp_path):
        noisy = sample(
            "noisy-1",
            raw_log="setup\x07\nTypeError: Input 'y' of 'Add' Op mismatched\x00\nteardown\n",
        )
        digests = build_digests([noisy], REGISTRY)
        report = export_finetune_dataset([noisy], digests, tmp_path / "out.jsonl")
        assert report.cleaned_nonprintable > 0
        for line in (tmp_path / "out.jsonl").read_text().splitlines():
            record = json.loads(line)
            assert "\x00" not in record["prompt"] and "\x07" not in record["prompt"]

    def test_cleansing_soundness_on_bundled_corpus(self, tmp_path, corpus_samples, patterns):
        digests = build_digests(corpus_samples, patterns)
        out = tmp_path / "corpus.jsonl"
        export_finetune_dataset(corpus_samples, digests, out)
        by_id = {s.sample_id: s for s in corpus_samples}
        from bugblitz.evaluation import _code_tokens

        for line in out.read_text().splitlines():
            record = json.loads(line)
            if record["task"] != "summarization":
                continue
            log_lower = by_id[record["sample_id"]].raw_log.lower()
            for token in _code_tokens(record["completion"]):
                assert token.lower() in log_lower, (record["sample_id"], token)


class TestCorpusIntegrity:
    def test_labels_stay_consistent_with_the_extractor(self, corpus_samples, patterns):
        digests = build_digests(corpus_samples, patterns)
        for sample_entry in corpus_samples:
            digest = digests[sample_entry.sample_id]
            for idx in sample_entry.root_err_idx:
                assert 1 <= idx <= len(digest.records), sample_entry.sample_id
            if sample_entry.root_err_idx:
                root_line = digest.records[sample_entry.root_err_idx[0] - 1].matched_line
                assert (
                    sample_entry.desc in root_line or root_line in sample_entry.desc
                ), sample_entry.sample_id
            if sample_entry.sample_id.startswith("noerror"):
                assert len(digest.records) == 0


class TestEvaluateOutcomes:
    def test_corpus_report_with_tuned_mock(self, corpus_samples, patterns, tuned_backend, profiles):
        from bugblitz.evaluation import evaluate_samples

        _outcomes, report = evaluate_samples(
            corpus_samples, patterns, tuned_backend, profiles, max_workers=1
        )
        assert report.recall == 1.0
        assert report.precision == 1.0
        assert report.root_accuracy == 1.0
        assert report.bugs_total == 18
        assert report.tickets_posted == 12
        assert len(report.per_sample) == 30

    def test_report_serializes(self):
        report = evaluate_outcomes([], [])
        doc = report.to_dict()
        assert doc["recall"] is None and doc["precision"] is None
