"""Linear map from extractor features into the decoder's embedding space.

E = Z M + M0. Each projected row then behaves exactly like a token embedding
in the decoder's prefix, which is the whole trick: the two halves of the
system only ever meet through this map.
"""

from __future__ import annotations

import numpy as np

from .nn import Module, uniform_init


class BridgeError(ValueError):
    pass


class Bridge(Module):
    def __init__(self, feature_dim: int, embed_dim: int, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.feature_dim = feature_dim
        self.embed_dim = embed_dim
        bound = 1.0 / np.sqrt(feature_dim)
        self.add_param("M", uniform_init(rng, (feature_dim, embed_dim), bound, dtype))
        self.add_param("M0", np.zeros(embed_dim, dtype=dtype))

    def project(self, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """E[i] = Z[i] @ M + M0; accepts (T_b, F_b) or (B, T_b, F_b)."""
        z = np.asarray(z)
        if z.shape[-1] != self.feature_dim:
            raise BridgeError(
                f"feature dim mismatch: got {z.shape[-1]}, expected {self.feature_dim}"
            )
        return z @ self.params["M"] + self.params["M0"], z

    def backward(self, cache: np.ndarray, dE: np.ndarray) -> np.ndarray:
        z = cache
        z2d = z.reshape(-1, self.feature_dim)
        dE2d = dE.reshape(-1, self.embed_dim)
        self.grads["M"] += z2d.T @ dE2d
        self.grads["M0"] += dE2d.sum(axis=0)
        return (dE2d @ self.params["M"].T).reshape(z.shape)
