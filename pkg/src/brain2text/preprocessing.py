"""Signal conditioning: per-block z-scoring, noise augmentation, smoothing.

Statistics are computed once per recording block over the training split and
reused verbatim at eval time, so a single trial is processed identically in
both paths except for the training-only noise injection.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import DatasetManifest, Trial, load_trial_signal
from .seeding import AUG, rng_for

NORM_EPS = 1e-8


class PreprocessingError(ValueError):
    pass


@dataclass(frozen=True)
class AugmentationConfig:
    white_noise_std: float = 1.0
    offset_noise_std: float = 0.2
    smooth_std: float = 2.0

    def validate(self) -> None:
        for name in ("white_noise_std", "offset_noise_std", "smooth_std"):
            if getattr(self, name) < 0:
                raise PreprocessingError(f"{name} must be >= 0")


@dataclass
class BlockStats:
    """Per-channel mean/std for each block, estimated on train trials only."""

    mean: dict[str, np.ndarray]
    std: dict[str, np.ndarray]

    def to_json(self) -> str:
        payload = {
            block: {"mean": self.mean[block].tolist(), "std": self.std[block].tolist()}
            for block in self.mean
        }
        return json.dumps(payload, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "BlockStats":
        payload = json.loads(text)
        mean = {b: np.asarray(v["mean"], dtype=np.float64) for b, v in payload.items()}
        std = {b: np.asarray(v["std"], dtype=np.float64) for b, v in payload.items()}
        return cls(mean=mean, std=std)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "BlockStats":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def compute_block_stats(manifest: DatasetManifest) -> BlockStats:
    """Pool train-split time bins per block; population std (ddof=0)."""
    sums: dict[str, np.ndarray] = {}
    sq_sums: dict[str, np.ndarray] = {}
    counts: dict[str, int] = {}
    blocks_seen: set[str] = set(t.block_id for t in manifest.trials)
    for trial in manifest.trials:
        if trial.split != "train":
            continue
        x = load_trial_signal(manifest, trial).astype(np.float64)
        b = trial.block_id
        if b not in sums:
            sums[b] = np.zeros(trial.F)
            sq_sums[b] = np.zeros(trial.F)
            counts[b] = 0
        sums[b] += x.sum(axis=0)
        sq_sums[b] += (x * x).sum(axis=0)
        counts[b] += x.shape[0]
    missing = blocks_seen - set(sums)
    if missing:
        raise PreprocessingError(
            "blocks without train trials, no statistics available: "
            + ", ".join(sorted(missing))
        )
    mean = {b: sums[b] / counts[b] for b in sums}
    var = {b: np.maximum(sq_sums[b] / counts[b] - mean[b] ** 2, 0.0) for b in sums}
    std = {b: np.sqrt(var[b]) for b in sums}
    return BlockStats(mean=mean, std=std)


def normalize(signal: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    """(x - mean) / (std + eps), broadcasting per channel."""
    return (np.asarray(signal, dtype=np.float64) - mean) / (std + NORM_EPS)


def add_white_noise(
    signal: np.ndarray,
    rng: np.random.Generator,
    white_noise_std: float,
    offset_noise_std: float,
) -> np.ndarray:
    """IID Gaussian per entry, plus one per-channel offset shared over time.

    Draw order is fixed (entries first, then offsets) so a given generator
    state always yields the same augmented trial.
    """
    x = np.asarray(signal, dtype=np.float64)
    out = x + rng.normal(0.0, white_noise_std, size=x.shape)
    out = out + rng.normal(0.0, offset_noise_std, size=(1, x.shape[1]))
    return out


def gaussian_kernel(std: float) -> np.ndarray:
    radius = int(np.ceil(3.0 * std))
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (offsets / std) ** 2)
    return k / k.sum()


def gaussian_smooth(signal: np.ndarray, std: float = 2.0) -> np.ndarray:
    """Per-channel temporal convolution, edges renormalized to unit weight.

    Renormalization divides by the same kernel convolved with a ones vector,
    which removes the fade-to-zero bias of plain zero padding.
    """
    if std == 0.0:
        return np.asarray(signal, dtype=np.float64).copy()
    x = np.asarray(signal, dtype=np.float64)
    k = gaussian_kernel(std)
    T = x.shape[0]
    coverage = np.convolve(np.ones(T), k, mode="same")
    out = np.empty_like(x)
    for c in range(x.shape[1]):
        out[:, c] = np.convolve(x[:, c], k, mode="same") / coverage
    return out


def training_view(
    manifest: DatasetManifest,
    trial: Trial,
    stats: BlockStats,
    aug: AugmentationConfig,
    seed: int,
    epoch: int,
    trial_index: int,
) -> np.ndarray:
    """normalize -> noise -> smooth; noise drawn from (seed, epoch, trial_index)."""
    aug.validate()
    if trial.block_id not in stats.mean:
        raise PreprocessingError(f"no statistics for block {trial.block_id}")
    x = load_trial_signal(manifest, trial)
    x = normalize(x, stats.mean[trial.block_id], stats.std[trial.block_id])
    rng = rng_for(seed, AUG, epoch, trial_index)
    x = add_white_noise(x, rng, aug.white_noise_std, aug.offset_noise_std)
    return gaussian_smooth(x, aug.smooth_std)


def eval_view(
    manifest: DatasetManifest,
    trial: Trial,
    stats: BlockStats,
    aug: AugmentationConfig,
) -> np.ndarray:
    """normalize -> smooth; deterministic, no noise."""
    aug.validate()
    if trial.block_id not in stats.mean:
        raise PreprocessingError(f"no statistics for block {trial.block_id}")
    x = load_trial_signal(manifest, trial)
    x = normalize(x, stats.mean[trial.block_id], stats.std[trial.block_id])
    return gaussian_smooth(x, aug.smooth_std)
