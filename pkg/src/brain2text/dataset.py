"""On-disk trial format: JSON-lines manifest plus one raw float32 file per trial.

A dataset directory holds ``manifest.jsonl`` (an optional leading metadata
line, then one trial record per line) and ``<trial_id>.f32`` signal files
(row-major little-endian float32, 4*T*F bytes). The format is deliberately
dependency-free and bit-exact under round trips.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .textproc import normalize_for_eval

SPLITS = ("train", "test")
CONDITIONS = ("vocal", "silent")

DEFAULT_CHANNELS = 256
DEFAULT_BIN_MS = 20.0


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Trial:
    trial_id: str
    session_id: str
    block_id: str
    split: str
    condition: str
    transcription: str
    signal_path: str
    T: int
    F: int

    def validate(self) -> None:
        if self.split not in SPLITS:
            raise DatasetError(f"trial {self.trial_id}: bad split {self.split!r}")
        if self.condition not in CONDITIONS:
            raise DatasetError(f"trial {self.trial_id}: bad condition {self.condition!r}")
        if self.T < 1:
            raise DatasetError(f"trial {self.trial_id}: T must be >= 1")
        if self.F < 1:
            raise DatasetError(f"trial {self.trial_id}: F must be >= 1")
        if not self.transcription:
            raise DatasetError(f"trial {self.trial_id}: empty transcription")


@dataclass
class DatasetManifest:
    trials: list[Trial]
    channel_count: int
    sample_bin_ms: float
    root: Path = field(default_factory=Path)

    def __len__(self) -> int:
        return len(self.trials)

    def sessions(self) -> list[str]:
        seen: dict[str, None] = {}
        for t in self.trials:
            seen.setdefault(t.session_id, None)
        return list(seen)

    def blocks(self) -> list[str]:
        seen: dict[str, None] = {}
        for t in self.trials:
            seen.setdefault(t.block_id, None)
        return list(seen)

    def signal_file(self, trial: Trial) -> Path:
        return self.root / trial.signal_path


def _check_manifest(manifest: DatasetManifest) -> None:
    if not manifest.trials:
        raise DatasetError("empty manifest")
    seen: set[str] = set()
    train_sessions: set[str] = set()
    sessions: set[str] = set()
    for trial in manifest.trials:
        trial.validate()
        if trial.trial_id in seen:
            raise DatasetError(f"duplicate trial_id: {trial.trial_id}")
        seen.add(trial.trial_id)
        if trial.F != manifest.channel_count:
            raise DatasetError(
                f"trial {trial.trial_id}: F={trial.F} != channel_count={manifest.channel_count}"
            )
        sessions.add(trial.session_id)
        if trial.split == "train":
            train_sessions.add(trial.session_id)
    missing = sessions - train_sessions
    if missing:
        raise DatasetError(
            "sessions without any train trial (day layers untrainable): "
            + ", ".join(sorted(missing))
        )
    for trial in manifest.trials:
        path = manifest.signal_file(trial)
        if not path.exists():
            raise DatasetError(f"missing signal file for trial {trial.trial_id}: {path}")
        expected = 4 * trial.T * trial.F
        actual = path.stat().st_size
        if actual != expected:
            raise DatasetError(
                f"size mismatch: trial {trial.trial_id} "
                f"(expected {expected} bytes, found {actual})"
            )


def load_manifest(path: str | Path) -> DatasetManifest:
    """Parse and fully validate a manifest; signal matrices stay on disk."""
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"manifest not found: {path}")
    channel_count: int | None = None
    sample_bin_ms = DEFAULT_BIN_MS
    trials: list[Trial] = []
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as e:
            raise DatasetError(f"{path}:{lineno}: invalid JSON ({e})") from None
        if "manifest_meta" in record:
            meta = record["manifest_meta"]
            channel_count = int(meta.get("channel_count", 0)) or None
            sample_bin_ms = float(meta.get("sample_bin_ms", DEFAULT_BIN_MS))
            continue
        try:
            trial = Trial(
                trial_id=str(record["trial_id"]),
                session_id=str(record["session_id"]),
                block_id=str(record["block_id"]),
                split=str(record["split"]),
                condition=str(record["condition"]),
                transcription=str(record["transcription"]),
                signal_path=str(record["signal_path"]),
                T=int(record["T"]),
                F=int(record["F"]),
            )
        except KeyError as e:
            raise DatasetError(f"{path}:{lineno}: missing field {e}") from None
        trials.append(trial)
    if not trials:
        raise DatasetError("empty manifest")
    if channel_count is None:
        channel_count = trials[0].F
    manifest = DatasetManifest(
        trials=trials,
        channel_count=channel_count,
        sample_bin_ms=sample_bin_ms,
        root=path.parent,
    )
    _check_manifest(manifest)
    return manifest


def load_trial_signal(manifest: DatasetManifest, trial: Trial) -> np.ndarray:
    """Row-major (T, F) float32 matrix; rejects non-finite values."""
    path = manifest.signal_file(trial)
    data = np.fromfile(path, dtype="<f4")
    if data.size != trial.T * trial.F:
        raise DatasetError(
            f"size mismatch: trial {trial.trial_id} "
            f"(expected {trial.T * trial.F} values, found {data.size})"
        )
    signal = data.reshape(trial.T, trial.F)
    if not np.all(np.isfinite(signal)):
        bad = np.argwhere(~np.isfinite(signal))
        coords = ", ".join(f"({t},{c})" for t, c in bad[:8])
        more = "" if len(bad) <= 8 else f" and {len(bad) - 8} more"
        raise DatasetError(
            f"non-finite value at {coords}{more} in trial {trial.trial_id}"
        )
    return signal


def write_dataset(
    out_dir: str | Path,
    trials: list[Trial],
    signals: list[np.ndarray],
    channel_count: int,
    sample_bin_ms: float = DEFAULT_BIN_MS,
) -> Path:
    """Write manifest + signal files; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [
        json.dumps(
            {"manifest_meta": {"channel_count": channel_count, "sample_bin_ms": sample_bin_ms}},
            sort_keys=True,
        )
    ]
    for trial, signal in zip(trials, signals):
        if signal.shape != (trial.T, trial.F):
            raise DatasetError(
                f"trial {trial.trial_id}: signal shape {signal.shape} != ({trial.T}, {trial.F})"
            )
        (out_dir / trial.signal_path).parent.mkdir(parents=True, exist_ok=True)
        (out_dir / trial.signal_path).write_bytes(np.ascontiguousarray(signal, dtype="<f4").tobytes())
        lines.append(json.dumps(asdict(trial), sort_keys=True))
    manifest_path = out_dir / "manifest.jsonl"
    manifest_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest_path


def subset(
    manifest: DatasetManifest,
    split: str | None = None,
    condition: str | None = None,
) -> DatasetManifest:
    """Order-preserving filtered view; trial records and signals are shared."""
    if split is not None and split not in SPLITS:
        raise DatasetError(f"bad split filter: {split!r}")
    if condition is not None and condition not in CONDITIONS:
        raise DatasetError(f"bad condition filter: {condition!r}")
    picked = [
        t
        for t in manifest.trials
        if (split is None or t.split == split) and (condition is None or t.condition == condition)
    ]
    if not picked:
        warnings.warn(
            f"subset(split={split!r}, condition={condition!r}) is empty", stacklevel=2
        )
    return DatasetManifest(
        trials=picked,
        channel_count=manifest.channel_count,
        sample_bin_ms=manifest.sample_bin_ms,
        root=manifest.root,
    )


@dataclass
class ValidationReport:
    counts: dict[str, int]              # "<split>/<condition>" -> number of trials
    unique_words: dict[str, int]        # "<split>/<condition|all>" -> unique normalized words
    overlap: dict[str, float]           # condition or "all" -> |test ∩ train| / |test|
    total_trials: int

    def to_json(self) -> str:
        return json.dumps(
            {
                "counts": self.counts,
                "unique_words": self.unique_words,
                "overlap": self.overlap,
                "total_trials": self.total_trials,
            },
            sort_keys=True,
            indent=2,
        )


def _word_types(trials: list[Trial]) -> set[str]:
    words: set[str] = set()
    for t in trials:
        words.update(normalize_for_eval(t.transcription))
    return words


def validate_dataset(manifest: DatasetManifest) -> ValidationReport:
    """Per split x condition counts, unique-word counts, and test-word overlap."""
    counts: dict[str, int] = {}
    unique_words: dict[str, int] = {}
    overlap: dict[str, float] = {}
    for cond in CONDITIONS + ("all",):
        cond_trials = [t for t in manifest.trials if cond == "all" or t.condition == cond]
        for split in SPLITS:
            split_trials = [t for t in cond_trials if t.split == split]
            if cond != "all":
                counts[f"{split}/{cond}"] = len(split_trials)
            unique_words[f"{split}/{cond}"] = len(_word_types(split_trials))
        train_words = _word_types([t for t in cond_trials if t.split == "train"])
        test_words = _word_types([t for t in cond_trials if t.split == "test"])
        overlap[cond] = len(test_words & train_words) / len(test_words) if test_words else 0.0
    return ValidationReport(
        counts=counts,
        unique_words=unique_words,
        overlap=overlap,
        total_trials=len(manifest.trials),
    )
