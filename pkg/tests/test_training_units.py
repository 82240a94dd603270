"""Optimizer, schedule, and gradient-clipping semantics."""

import math

import numpy as np
import pytest

from brain2text import AdamW, Schedule
from brain2text.training import TrainingError, clip_grads_


def test_single_adamw_step_matches_closed_form():
    p = {"w": np.array([1.0, -2.0])}
    g = {"w": np.array([0.5, 0.25])}
    opt = AdamW(p, beta1=0.9, beta2=0.999, eps=1e-8)
    lr, wd = 0.1, 0.01
    # decoupled decay first, then a bias-corrected moment update; at t=1 the
    # corrected first and second moments both equal the raw gradient
    want = p["w"] * (1 - lr * wd) - lr * (g["w"] / (np.abs(g["w"]) + 1e-8))
    opt.step(g, lr, wd)
    assert np.allclose(p["w"], want, atol=1e-12)


def test_two_adamw_steps_match_hand_rolled_reference():
    rng = np.random.default_rng(0)
    p = {"w": rng.normal(size=(3, 2))}
    ref = p["w"].copy()
    opt = AdamW(p)
    m = np.zeros_like(ref)
    v = np.zeros_like(ref)
    for t in (1, 2):
        g = rng.normal(size=(3, 2))
        opt.step({"w": g.copy()}, 0.05, 0.1)
        ref *= 1 - 0.05 * 0.1
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        mhat = m / (1 - 0.9**t)
        vhat = v / (1 - 0.999**t)
        ref -= 0.05 * mhat / (np.sqrt(vhat) + 1e-8)
    assert np.allclose(p["w"], ref, atol=1e-12)


def test_adamw_updates_arrays_in_place():
    arr = np.ones(3)
    opt = AdamW({"w": arr})
    opt.step({"w": np.ones(3)}, 0.1, 0.0)
    assert arr[0] != 1.0  # the caller's array itself moved


def test_adamw_per_name_learning_rates():
    p = {"a": np.ones(1), "b": np.ones(1)}
    opt = AdamW(p)
    opt.step({"a": np.ones(1), "b": np.ones(1)}, {"a": 0.1, "b": 0.0}, 0.0)
    assert p["a"][0] != 1.0
    assert p["b"][0] == 1.0


def test_adamw_rejects_non_finite_gradients():
    opt = AdamW({"w": np.ones(2)})
    with pytest.raises(TrainingError, match="non-finite gradient in parameter w"):
        opt.step({"w": np.array([1.0, np.nan])}, 0.1, 0.0)


def test_adamw_state_round_trip():
    p = {"w": np.ones(2)}
    opt = AdamW(p)
    opt.step({"w": np.full(2, 0.3)}, 0.1, 0.0)
    state = {k: v.copy() for k, v in opt.state_arrays().items()}
    fresh = AdamW({"w": p["w"].copy()})
    fresh.load_state_arrays(state, step_count=opt.step_count)
    g = {"w": np.full(2, -0.2)}
    opt.step(g, 0.05, 0.0)
    fresh.step({"w": g["w"].copy()}, 0.05, 0.0)
    assert np.array_equal(opt.params["w"], fresh.params["w"])


def test_schedule_endpoints_and_peak():
    s = Schedule(peak_lr=2.0, total_steps=100, warmup_steps=10)
    assert s.lr_at(0) == 0.0
    assert s.lr_at(10) == 2.0
    assert s.lr_at(100) == 0.0
    assert s.lr_at(5) == pytest.approx(1.0)
    assert s.lr_at(55) == pytest.approx(1.0)


def test_schedule_rejects_warmup_not_shorter_than_total():
    with pytest.raises(TrainingError, match="warmup_steps"):
        Schedule(peak_lr=1.0, total_steps=10, warmup_steps=10)


def test_schedule_rejects_out_of_range_steps():
    s = Schedule(peak_lr=1.0, total_steps=10, warmup_steps=2)
    with pytest.raises(TrainingError, match="outside schedule"):
        s.lr_at(11)
    with pytest.raises(TrainingError, match="outside schedule"):
        s.lr_at(-1)


def test_clip_rescales_global_norm():
    grads = {"a": np.array([3.0]), "b": np.array([4.0])}
    norm = clip_grads_(grads, 1.0)
    assert norm == pytest.approx(5.0)
    clipped = math.hypot(grads["a"][0], grads["b"][0])
    assert clipped == pytest.approx(1.0)


def test_clip_leaves_small_gradients_alone():
    grads = {"a": np.array([0.3])}
    clip_grads_(grads, 1.0)
    assert grads["a"][0] == pytest.approx(0.3)


def test_clip_zero_max_norm_disables_clipping():
    grads = {"a": np.array([30.0])}
    clip_grads_(grads, 0.0)
    assert grads["a"][0] == pytest.approx(30.0)
