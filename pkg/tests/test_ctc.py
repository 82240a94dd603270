"""CTC loss against exhaustive path enumeration, plus analytic examples."""

import itertools
import math

import numpy as np
import pytest

from brain2text import ctc_greedy_decode, ctc_loss, ctc_loss_grad
from brain2text.feature_extractor import CtcError, ctc_loss_batch


def collapse(path, blank=0):
    out = []
    prev = None
    for p in path:
        if p != blank and p != prev:
            out.append(p)
        prev = p
    return out


def enumeration_loss(logits, target):
    """-log of the total probability of all collapsing paths, by enumeration."""
    T, A = logits.shape
    log_probs = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    total = 0.0
    for path in itertools.product(range(A), repeat=T):
        if collapse(path) == list(target):
            total += math.exp(sum(log_probs[t, path[t]] for t in range(T)))
    if total == 0.0:
        return None
    return -math.log(total)


def test_single_step_uniform_logits():
    # one frame, alphabet {blank, a}, uniform: only the path "a" matches
    logits = np.zeros((1, 2))
    assert ctc_loss(logits, [1]) == pytest.approx(math.log(2.0), abs=1e-12)


def test_two_step_uniform_logits():
    # paths {aa, a., .a} of the 4 possible: loss = -ln(3/4)
    logits = np.zeros((2, 2))
    assert ctc_loss(logits, [1]) == pytest.approx(-math.log(3.0 / 4.0), abs=1e-12)


def test_repeat_needs_separating_blank():
    logits = np.zeros((2, 2))
    with pytest.raises(CtcError, match="no valid alignment"):
        ctc_loss(logits, [1, 1])
    # three frames suffice: path "a.a"
    assert np.isfinite(ctc_loss(np.zeros((3, 2)), [1, 1]))


def test_empty_target_probability_is_all_blank_path():
    logits = np.log(np.array([[0.7, 0.3], [0.6, 0.4]]))
    assert ctc_loss(logits, []) == pytest.approx(-math.log(0.7 * 0.6), abs=1e-10)


def test_matches_enumeration_on_random_cases(rng):
    checked = 0
    for _ in range(60):
        T = int(rng.integers(1, 7))
        A = int(rng.integers(2, 5))  # alphabet size incl. blank, labels 1..A-1
        U = int(rng.integers(0, 4))
        target = [int(x) for x in rng.integers(1, A, size=U)]
        logits = rng.normal(0.0, 2.0, size=(T, A))
        want = enumeration_loss(logits, target)
        if want is None:
            with pytest.raises(CtcError, match="no valid alignment"):
                ctc_loss(logits, target)
        else:
            assert ctc_loss(logits, target) == pytest.approx(want, abs=1e-6)
            checked += 1
    assert checked >= 20


def test_gradient_matches_finite_differences(rng):
    logits = rng.normal(0.0, 1.0, size=(6, 4))
    target = [1, 2, 2]
    loss, grad = ctc_loss_grad(logits, target)
    assert loss == pytest.approx(ctc_loss(logits, target), abs=1e-12)
    h = 1e-6
    for t in range(6):
        for a in range(4):
            up = logits.copy()
            up[t, a] += h
            dn = logits.copy()
            dn[t, a] -= h
            fd = (ctc_loss(up, target) - ctc_loss(dn, target)) / (2 * h)
            assert grad[t, a] == pytest.approx(fd, abs=2e-6)


def test_batch_mean_matches_individual_losses(rng):
    lengths = [7, 4, 6]
    T_max = max(lengths)
    logits = rng.normal(size=(3, T_max, 4))
    targets = [[1, 2], [3], [2, 2]]
    losses = [ctc_loss(logits[i, : lengths[i]], targets[i]) for i in range(3)]
    batch_loss, grad = ctc_loss_batch(logits, np.asarray(lengths), targets)
    assert batch_loss == pytest.approx(np.mean(losses), abs=1e-10)
    assert grad.shape == logits.shape
    # padded frames carry zero gradient; live frames carry grad / batch size
    assert np.array_equal(grad[1, 4:], np.zeros((T_max - 4, 4)))
    _, g0 = ctc_loss_grad(logits[0, :7], targets[0])
    assert np.allclose(grad[0, :7], g0 / 3.0)


def test_greedy_decode_collapse_rules():
    def logits_for(path, A=3):
        out = np.full((len(path), A), -10.0)
        for t, a in enumerate(path):
            out[t, a] = 10.0
        return out

    assert ctc_greedy_decode(logits_for([0, 1, 1, 0, 2])) == [1, 2]
    assert ctc_greedy_decode(logits_for([0, 0, 0])) == []
    assert ctc_greedy_decode(logits_for([1, 0, 1])) == [1, 1]


def test_greedy_decode_breaks_ties_toward_lowest_id():
    logits = np.zeros((1, 3))  # all equal: argmax must pick id 0 (blank)
    assert ctc_greedy_decode(logits) == []


def test_loss_is_nonnegative_and_finite(rng):
    for _ in range(20):
        logits = rng.normal(0.0, 3.0, size=(8, 5))
        target = [1, 2, 3]
        val = ctc_loss(logits, target)
        assert np.isfinite(val)
        assert val >= 0.0 or val == pytest.approx(0.0, abs=1e-12)
