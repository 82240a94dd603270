"""Block statistics, noise augmentation, and smoothing oracles."""

import numpy as np
import pytest

from brain2text import BlockStats, compute_block_stats, gaussian_smooth
from brain2text.preprocessing import (
    NORM_EPS,
    AugmentationConfig,
    PreprocessingError,
    add_white_noise,
    eval_view,
    gaussian_kernel,
    normalize,
    training_view,
)


def test_block_stats_match_pooled_train_bins(micro_dataset):
    from brain2text import load_trial_signal

    stats = compute_block_stats(micro_dataset)
    blocks = {t.block_id for t in micro_dataset.trials}
    assert set(stats.mean) == blocks
    block = sorted(blocks)[0]
    rows = [
        load_trial_signal(micro_dataset, t).astype(np.float64)
        for t in micro_dataset.trials
        if t.split == "train" and t.block_id == block
    ]
    pooled = np.concatenate(rows, axis=0)
    assert np.allclose(stats.mean[block], pooled.mean(axis=0))
    assert np.allclose(stats.std[block], pooled.std(axis=0))


def test_normalize_zeroes_mean_and_unit_scales(rng):
    x = rng.normal(3.0, 2.0, size=(500, 4))
    z = normalize(x, x.mean(axis=0), x.std(axis=0))
    assert np.allclose(z.mean(axis=0), 0.0, atol=1e-12)
    assert np.allclose(z.std(axis=0), 1.0, atol=1e-6)


def test_normalize_is_safe_for_constant_channels():
    x = np.full((10, 2), 7.0)
    z = normalize(x, x.mean(axis=0), x.std(axis=0))
    assert np.all(np.isfinite(z))
    assert np.allclose(z, 0.0)


def test_white_noise_statistics_monte_carlo(rng):
    x = np.zeros((200, 8))
    draws = np.stack([add_white_noise(x, np.random.default_rng(i), 0.5, 0.2) for i in range(400)])
    # entry variance = white^2 + offset^2
    assert abs(draws.var() - (0.25 + 0.04)) < 0.01
    # the offset is shared across time: per-draw channel means have var offset^2 + white^2/T
    chan_means = draws.mean(axis=1)
    assert abs(chan_means.var() - (0.04 + 0.25 / 200)) < 0.01


def test_noise_is_deterministic_per_generator_state():
    x = np.ones((6, 3))
    a = add_white_noise(x, np.random.default_rng(9), 1.0, 0.2)
    b = add_white_noise(x, np.random.default_rng(9), 1.0, 0.2)
    assert np.array_equal(a, b)


def test_gaussian_kernel_is_normalized_and_symmetric():
    k = gaussian_kernel(2.0)
    assert abs(k.sum() - 1.0) < 1e-12
    assert np.allclose(k, k[::-1])
    assert len(k) == 2 * int(np.ceil(6.0)) + 1


def test_smoothing_preserves_constant_signals():
    x = np.full((40, 3), 5.0)
    y = gaussian_smooth(x, 2.0)
    assert np.allclose(y, 5.0, atol=1e-12)


def test_smoothing_matches_direct_convolution(rng):
    x = rng.normal(size=(50, 2))
    y = gaussian_smooth(x, 1.5)
    k = gaussian_kernel(1.5)
    cov = np.convolve(np.ones(50), k, mode="same")
    want = np.convolve(x[:, 0], k, mode="same") / cov
    assert np.allclose(y[:, 0], want)


def test_smoothing_with_zero_std_is_identity(rng):
    x = rng.normal(size=(20, 2))
    assert np.array_equal(gaussian_smooth(x, 0.0), x)


def test_training_view_noise_stream_is_reproducible(micro_dataset):
    stats = compute_block_stats(micro_dataset)
    aug = AugmentationConfig(0.3, 0.1, 2.0)
    t = micro_dataset.trials[0]
    a = training_view(micro_dataset, t, stats, aug, seed=5, epoch=2, trial_index=7)
    b = training_view(micro_dataset, t, stats, aug, seed=5, epoch=2, trial_index=7)
    c = training_view(micro_dataset, t, stats, aug, seed=5, epoch=3, trial_index=7)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_eval_view_is_noise_free_and_deterministic(micro_dataset):
    stats = compute_block_stats(micro_dataset)
    aug = AugmentationConfig(10.0, 10.0, 2.0)
    t = micro_dataset.trials[0]
    a = eval_view(micro_dataset, t, stats, aug)
    b = eval_view(micro_dataset, t, stats, aug)
    assert np.array_equal(a, b)
    quiet = eval_view(micro_dataset, t, stats, AugmentationConfig(0.0, 0.0, 2.0))
    assert np.array_equal(a, quiet)


def test_block_stats_round_trip(tmp_path, micro_dataset):
    stats = compute_block_stats(micro_dataset)
    p = tmp_path / "stats.json"
    stats.save(p)
    back = BlockStats.load(p)
    for b in stats.mean:
        assert np.array_equal(stats.mean[b], back.mean[b])
        assert np.array_equal(stats.std[b], back.std[b])


def test_unknown_block_is_rejected(micro_dataset):
    from dataclasses import replace

    stats = compute_block_stats(micro_dataset)
    aug = AugmentationConfig()
    stranger = replace(micro_dataset.trials[0], block_id="nope")
    with pytest.raises(PreprocessingError, match="no statistics for block"):
        eval_view(micro_dataset, stranger, stats, aug)


def test_negative_noise_config_is_rejected():
    with pytest.raises(PreprocessingError, match="white_noise_std"):
        AugmentationConfig(-0.1, 0.0, 1.0).validate()
