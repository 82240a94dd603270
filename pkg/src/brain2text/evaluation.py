"""Word error rate over normalized transcriptions.

Counts come from a standard Levenshtein alignment with unit costs; corpus WER
pools edit operations over all trials and divides by total reference length,
so long references weigh more than short ones. Rates above 1.0 are reported
as-is rather than clipped.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .dataset import DatasetManifest, Trial
from .textproc import normalize_for_eval


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class ErrorCounts:
    substitutions: int
    deletions: int
    insertions: int
    ref_len: int

    @property
    def edits(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    def __add__(self, other: "ErrorCounts") -> "ErrorCounts":
        return ErrorCounts(
            self.substitutions + other.substitutions,
            self.deletions + other.deletions,
            self.insertions + other.insertions,
            self.ref_len + other.ref_len,
        )

    @property
    def rate(self) -> float:
        if self.ref_len == 0:
            return 0.0 if self.edits == 0 else float("inf")
        return self.edits / self.ref_len


def edit_distance(ref: Sequence, hyp: Sequence) -> ErrorCounts:
    """Token-level Levenshtein alignment with S/D/I attribution.

    Backtrace prefers diagonal over up over left on cost ties, which fixes a
    single canonical attribution for every pair.
    """
    n, m = len(ref), len(hyp)
    dist = np.zeros((n + 1, m + 1), dtype=np.int64)
    dist[:, 0] = np.arange(n + 1)
    dist[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            sub = dist[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1])
            dele = dist[i - 1, j] + 1
            ins = dist[i, j - 1] + 1
            dist[i, j] = min(sub, dele, ins)
    subs = dels = inss = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and dist[i, j] == dist[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            if ref[i - 1] != hyp[j - 1]:
                subs += 1
            i, j = i - 1, j - 1
        elif i > 0 and dist[i, j] == dist[i - 1, j] + 1:
            dels += 1
            i -= 1
        else:
            inss += 1
            j -= 1
    return ErrorCounts(subs, dels, inss, n)


def corpus_wer(pairs: Sequence[tuple[Sequence, Sequence]]) -> float:
    total = ErrorCounts(0, 0, 0, 0)
    for ref, hyp in pairs:
        total = total + edit_distance(ref, hyp)
    return total.rate


def sentence_counts(ref_text: str, hyp_text: str) -> ErrorCounts:
    return edit_distance(normalize_for_eval(ref_text), normalize_for_eval(hyp_text))


def phoneme_error_rate(ref_ids: Sequence[int], hyp_ids: Sequence[int]) -> float:
    return edit_distance(list(ref_ids), list(hyp_ids)).rate


@dataclass
class TrialResult:
    trial_id: str
    condition: str
    reference: str
    hypothesis: str
    counts: ErrorCounts
    failed: bool = False

    def to_record(self) -> dict:
        return {
            "trial_id": self.trial_id,
            "condition": self.condition,
            "reference": self.reference,
            "hypothesis": self.hypothesis,
            "substitutions": self.counts.substitutions,
            "deletions": self.counts.deletions,
            "insertions": self.counts.insertions,
            "ref_len": self.counts.ref_len,
            "failed": self.failed,
        }


@dataclass
class EvalReport:
    wer: dict[str, float]          # "all" plus one entry per condition present
    counts: dict[str, dict]        # pooled S/D/I/ref_len per group
    n_trials: dict[str, int]
    results: list[TrialResult]

    def to_json(self) -> str:
        return json.dumps(
            {"wer": self.wer, "counts": self.counts, "n_trials": self.n_trials},
            sort_keys=True,
            indent=2,
        )

    def save(self, out_dir: str | Path) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "eval_report.json").write_text(self.to_json() + "\n", encoding="utf-8")
        with (out_dir / "per_trial.jsonl").open("w", encoding="utf-8") as fh:
            for r in self.results:
                fh.write(json.dumps(r.to_record(), sort_keys=True) + "\n")

    def summary(self) -> str:
        lines = ["condition        n    WER"]
        for group in sorted(self.wer):
            lines.append(
                f"{group:<12} {self.n_trials[group]:>5}    {100.0 * self.wer[group]:.1f}%"
            )
        return "\n".join(lines)


def evaluate(
    decode_fn: Callable[[Trial], str],
    manifest: DatasetManifest,
    trials: Sequence[Trial] | None = None,
) -> EvalReport:
    """Decode each trial and pool error counts overall and per condition."""
    chosen = list(trials) if trials is not None else list(manifest.trials)
    if not chosen:
        raise EvaluationError("no trials to evaluate")
    results: list[TrialResult] = []
    for trial in chosen:
        failed = False
        try:
            hyp = decode_fn(trial)
        except Exception as e:  # noqa: BLE001 - a bad trial must not sink the report
            warnings.warn(f"decoding failed for trial {trial.trial_id}: {e}", stacklevel=2)
            hyp = ""
            failed = True
        results.append(
            TrialResult(
                trial_id=trial.trial_id,
                condition=trial.condition,
                reference=trial.transcription,
                hypothesis=hyp,
                counts=sentence_counts(trial.transcription, hyp),
                failed=failed,
            )
        )
    groups: dict[str, list[TrialResult]] = {"all": results}
    for r in results:
        groups.setdefault(r.condition, []).append(r)
    wer: dict[str, float] = {}
    counts: dict[str, dict] = {}
    n_trials: dict[str, int] = {}
    for name, rs in groups.items():
        pooled = ErrorCounts(0, 0, 0, 0)
        for r in rs:
            pooled = pooled + r.counts
        wer[name] = pooled.rate
        counts[name] = {
            "substitutions": pooled.substitutions,
            "deletions": pooled.deletions,
            "insertions": pooled.insertions,
            "ref_len": pooled.ref_len,
        }
        n_trials[name] = len(rs)
    return EvalReport(wer=wer, counts=counts, n_trials=n_trials, results=results)
