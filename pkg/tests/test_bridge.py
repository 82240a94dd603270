"""Affine bridge between extractor features and decoder embeddings."""

import numpy as np
import pytest

from brain2text.bridge import Bridge, BridgeError


def test_projection_is_affine(rng):
    bridge = Bridge(feature_dim=6, embed_dim=4, rng=rng)
    z = rng.normal(size=(5, 6))
    E, _ = bridge.project(z)
    expected = z @ bridge.params["M"] + bridge.params["M0"]
    assert np.allclose(E, expected, atol=0.0)
    assert E.shape == (5, 4)


def test_projection_accepts_batched_input(rng):
    bridge = Bridge(feature_dim=6, embed_dim=4, rng=rng)
    z = rng.normal(size=(3, 5, 6))
    E, _ = bridge.project(z)
    assert E.shape == (3, 5, 4)
    single, _ = bridge.project(z[1])
    assert np.allclose(E[1], single, atol=0.0)


def test_offset_starts_at_zero_and_map_is_bounded(rng):
    bridge = Bridge(feature_dim=16, embed_dim=4, rng=rng)
    assert np.all(bridge.params["M0"] == 0.0)
    assert np.max(np.abs(bridge.params["M"])) <= 1.0 / 4.0


def test_feature_dim_mismatch_is_rejected(rng):
    bridge = Bridge(feature_dim=6, embed_dim=4, rng=rng)
    with pytest.raises(BridgeError, match="feature dim mismatch"):
        bridge.project(rng.normal(size=(5, 7)))


def test_backward_matches_hand_rolled_gradients(rng):
    bridge = Bridge(feature_dim=3, embed_dim=2, rng=rng)
    z = rng.normal(size=(4, 3))
    _, cache = bridge.project(z)
    dE = rng.normal(size=(4, 2))
    bridge.zero_grad()
    dZ = bridge.backward(cache, dE)
    assert np.allclose(bridge.grads["M"], z.T @ dE, atol=1e-12)
    assert np.allclose(bridge.grads["M0"], dE.sum(axis=0), atol=1e-12)
    assert np.allclose(dZ, dE @ bridge.params["M"].T, atol=1e-12)


def test_backward_accumulates_across_calls(rng):
    bridge = Bridge(feature_dim=3, embed_dim=2, rng=rng)
    z = rng.normal(size=(4, 3))
    dE = rng.normal(size=(4, 2))
    bridge.zero_grad()
    _, cache = bridge.project(z)
    bridge.backward(cache, dE)
    once = bridge.grads["M"].copy()
    bridge.backward(cache, dE)
    assert np.allclose(bridge.grads["M"], 2.0 * once, atol=1e-12)
