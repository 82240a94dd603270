"""Edit-distance and WER scoring against a brute-force alignment oracle."""

import json

import numpy as np
import pytest

from brain2text import ErrorCounts, corpus_wer, edit_distance, evaluate, phoneme_error_rate
from brain2text.evaluation import EvaluationError, sentence_counts


def oracle_edits(ref, hyp):
    """Minimum edit count by exhaustive recursion over all alignments."""

    def go(i, j):
        if i == len(ref):
            return len(hyp) - j
        if j == len(hyp):
            return len(ref) - i
        best = go(i + 1, j + 1) + (ref[i] != hyp[j])
        best = min(best, go(i + 1, j) + 1)
        best = min(best, go(i, j + 1) + 1)
        return best

    return go(0, 0)


def test_matches_exhaustive_oracle_on_random_pairs():
    rng = np.random.default_rng(42)
    alphabet = ["a", "b", "c", "d"]
    for _ in range(300):
        ref = [alphabet[i] for i in rng.integers(0, 4, size=rng.integers(0, 7))]
        hyp = [alphabet[i] for i in rng.integers(0, 4, size=rng.integers(0, 7))]
        counts = edit_distance(ref, hyp)
        assert counts.edits == oracle_edits(ref, hyp)
        assert counts.ref_len == len(ref)


def test_error_attribution_on_known_cases():
    c = edit_distance(["a", "b", "c"], ["a", "x", "c"])
    assert (c.substitutions, c.deletions, c.insertions) == (1, 0, 0)
    c = edit_distance(["a", "b", "c"], ["a", "c"])
    assert (c.substitutions, c.deletions, c.insertions) == (0, 1, 0)
    c = edit_distance(["a", "c"], ["a", "b", "c"])
    assert (c.substitutions, c.deletions, c.insertions) == (0, 0, 1)
    c = edit_distance([], ["a", "b"])
    assert (c.substitutions, c.deletions, c.insertions) == (0, 0, 2)
    c = edit_distance(["a", "b"], [])
    assert (c.substitutions, c.deletions, c.insertions) == (0, 2, 0)


def test_rate_semantics():
    assert ErrorCounts(1, 1, 0, 4).rate == 0.5
    assert ErrorCounts(0, 0, 0, 0).rate == 0.0
    assert ErrorCounts(0, 0, 3, 0).rate == float("inf")
    assert ErrorCounts(0, 0, 0, 5).rate == 0.0


def test_wer_can_exceed_one():
    c = edit_distance(["a"], ["x", "y", "z"])
    assert c.rate > 1.0


def test_corpus_wer_pools_counts_not_rates():
    pairs = [(["a"] * 9, ["a"] * 9), (["b"], ["x"])]
    # pooled: 1 edit over 10 reference tokens, not mean(0, 1)
    assert corpus_wer(pairs) == pytest.approx(0.1)


def test_sentence_counts_normalizes_both_sides():
    c = sentence_counts("I CAN'T go.", "i cannot go")
    assert c.edits == 0


def test_phoneme_error_rate_on_ids():
    assert phoneme_error_rate([1, 2, 3], [1, 2, 3]) == 0.0
    assert phoneme_error_rate([1, 2, 3], [1, 3]) == pytest.approx(1 / 3)


def test_evaluate_groups_by_condition(micro_dataset):
    report = evaluate(lambda t: t.transcription, micro_dataset)
    assert report.wer["all"] == 0.0
    assert set(report.wer) == {"all", "vocal", "silent"}
    assert report.n_trials["all"] == len(micro_dataset.trials)


def test_evaluate_survives_a_crashing_trial(micro_dataset):
    bad_id = micro_dataset.trials[0].trial_id

    def decode(trial):
        if trial.trial_id == bad_id:
            raise RuntimeError("boom")
        return trial.transcription

    with pytest.warns(UserWarning, match="decoding failed"):
        report = evaluate(decode, micro_dataset)
    failed = [r for r in report.results if r.failed]
    assert len(failed) == 1
    assert failed[0].trial_id == bad_id
    assert failed[0].hypothesis == ""
    assert report.wer["all"] > 0.0


def test_evaluate_rejects_empty_selection(micro_dataset):
    with pytest.raises(EvaluationError, match="no trials"):
        evaluate(lambda t: "", micro_dataset, trials=[])


def test_report_save_round_trip(tmp_path, micro_dataset):
    report = evaluate(lambda t: t.transcription, micro_dataset)
    report.save(tmp_path)
    payload = json.loads((tmp_path / "eval_report.json").read_text())
    assert payload["wer"]["all"] == 0.0
    lines = (tmp_path / "per_trial.jsonl").read_text().splitlines()
    assert len(lines) == len(micro_dataset.trials)
    first = json.loads(lines[0])
    assert {"trial_id", "reference", "hypothesis", "ref_len"} <= set(first)


def test_summary_is_human_readable(micro_dataset):
    report = evaluate(lambda t: t.transcription, micro_dataset)
    text = report.summary()
    assert "WER" in text and "all" in text and "0.0%" in text
