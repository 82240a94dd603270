"""Recurrent feature extractor: frame stacking, day layers, GRU stack, CTC.

The extractor maps a preprocessed (T, F) signal to features Z of shape
(T_b, F_b). Temporal reduction happens once, up front, by stacking k frames
with stride s. Per-session input layers absorb day-to-day drift and start at
identity so an untrained model is session-independent. All backward passes
are explicit; CTC runs in float64 regardless of parameter dtype.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .nn import Linear, Module, log_softmax, sigmoid, softmax, uniform_init

LOG_ZERO = -1e30


class FeatureExtractorError(ValueError):
    pass


class CtcError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureExtractorConfig:
    num_layers: int = 2
    hidden: int = 64
    bidirectional: bool = False
    stack_k: int = 4
    stack_s: int = 4

    def validate(self) -> None:
        if self.num_layers < 1:
            raise FeatureExtractorError("num_layers must be >= 1")
        if self.hidden < 1:
            raise FeatureExtractorError("hidden must be >= 1")
        if not (1 <= self.stack_s <= self.stack_k):
            raise FeatureExtractorError("need 1 <= stack_s <= stack_k")

    @property
    def num_directions(self) -> int:
        return 2 if self.bidirectional else 1

    @property
    def feature_dim(self) -> int:
        return self.hidden * self.num_directions


def stacked_length(T: int, k: int, s: int) -> int:
    if T < k:
        raise FeatureExtractorError(f"sequence too short: T={T} < k={k}")
    return (T - k) // s + 1


def stack_frames(signal: np.ndarray, k: int, s: int) -> np.ndarray:
    """Row i concatenates frames [i*s, i*s+k); the tail past the last full
    window is dropped."""
    x = np.asarray(signal)
    T, F = x.shape
    T_b = stacked_length(T, k, s)
    out = np.empty((T_b, k * F), dtype=x.dtype)
    for i in range(T_b):
        out[i] = x[i * s : i * s + k].reshape(-1)
    return out


def stack_frames_grad(d_stacked: np.ndarray, T: int, F: int, k: int, s: int) -> np.ndarray:
    """Scatter-add of the stacking gather; dropped tail frames get zero."""
    T_b = d_stacked.shape[0]
    dx = np.zeros((T, F), dtype=d_stacked.dtype)
    for i in range(T_b):
        dx[i * s : i * s + k] += d_stacked[i].reshape(k, F)
    return dx


def pad_batch(seqs: Sequence[np.ndarray], dtype=None) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad (T_i, D) arrays to (B, T_max, D) plus a length vector."""
    lengths = np.array([s.shape[0] for s in seqs], dtype=np.int64)
    D = seqs[0].shape[1]
    dtype = dtype or seqs[0].dtype
    out = np.zeros((len(seqs), int(lengths.max()), D), dtype=dtype)
    for i, s in enumerate(seqs):
        out[i, : s.shape[0]] = s
    return out, lengths


def length_mask(lengths: np.ndarray, T: int) -> np.ndarray:
    return (np.arange(T)[None, :] < lengths[:, None]).astype(np.float64)


def reverse_padded(x: np.ndarray, lengths: np.ndarray) -> np.ndarray:
    """Reverse each sample's valid region in place along time; padding stays
    put. The map is a self-inverse permutation, so it is its own gradient."""
    B, T, _ = x.shape
    idx = np.tile(np.arange(T), (B, 1))
    for i, L in enumerate(lengths):
        idx[i, :L] = np.arange(L - 1, -1, -1)
    return np.take_along_axis(x, idx[:, :, None], axis=1)


class GruDirection(Module):
    """Single-direction GRU scan with packed [update | reset | candidate]
    gates and mask-gated state carry for right-padded batches."""

    def __init__(self, input_dim: int, hidden: int, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.input_dim = input_dim
        self.hidden = hidden
        bound = 1.0 / np.sqrt(hidden)
        self.add_param("W", uniform_init(rng, (input_dim, 3 * hidden), bound, dtype))
        self.add_param("U", uniform_init(rng, (hidden, 3 * hidden), bound, dtype))
        self.add_param("b", uniform_init(rng, (3 * hidden,), bound, dtype))

    def forward(self, x: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, dict]:
        B, T, _ = x.shape
        H = self.hidden
        W, U, b = self.params["W"], self.params["U"], self.params["b"]
        xW = x @ W + b
        h = np.zeros((B, H), dtype=x.dtype)
        h_seq = np.empty((B, T, H), dtype=x.dtype)
        zs = np.empty((B, T, H), dtype=x.dtype)
        rs = np.empty((B, T, H), dtype=x.dtype)
        ns = np.empty((B, T, H), dtype=x.dtype)
        hUn = np.empty((B, T, H), dtype=x.dtype)
        h_prevs = np.empty((B, T, H), dtype=x.dtype)
        for t in range(T):
            hU = h @ U
            z = sigmoid(xW[:, t, :H] + hU[:, :H])
            r = sigmoid(xW[:, t, H : 2 * H] + hU[:, H : 2 * H])
            n = np.tanh(xW[:, t, 2 * H :] + r * hU[:, 2 * H :])
            h_new = (1.0 - z) * n + z * h
            m = mask[:, t, None].astype(x.dtype)
            h_prevs[:, t] = h
            h = m * h_new + (1.0 - m) * h
            zs[:, t], rs[:, t], ns[:, t], hUn[:, t] = z, r, n, hU[:, 2 * H :]
            h_seq[:, t] = h
        cache = {"x": x, "mask": mask, "z": zs, "r": rs, "n": ns, "hUn": hUn, "h_prev": h_prevs}
        return h_seq, cache

    def backward(self, dh_seq: np.ndarray, cache: dict) -> np.ndarray:
        x, mask = cache["x"], cache["mask"]
        zs, rs, ns, hUn, h_prevs = (
            cache["z"], cache["r"], cache["n"], cache["hUn"], cache["h_prev"],
        )
        B, T, _ = x.shape
        H = self.hidden
        W, U = self.params["W"], self.params["U"]
        da_x = np.zeros((B, T, 3 * H), dtype=x.dtype)
        da_h = np.zeros((B, T, 3 * H), dtype=x.dtype)
        carry = np.zeros((B, H), dtype=x.dtype)
        for t in range(T - 1, -1, -1):
            dh_total = dh_seq[:, t] + carry
            m = mask[:, t, None].astype(x.dtype)
            dh_new = dh_total * m
            z, r, n, hU_n, h_prev = zs[:, t], rs[:, t], ns[:, t], hUn[:, t], h_prevs[:, t]
            dz = dh_new * (h_prev - n)
            dn = dh_new * (1.0 - z)
            dh_prev = dh_new * z + dh_total * (1.0 - m)
            da_n = dn * (1.0 - n * n)
            dr = da_n * hU_n
            dhU_n = da_n * r
            da_z = dz * z * (1.0 - z)
            da_r = dr * r * (1.0 - r)
            da_x[:, t, :H], da_x[:, t, H : 2 * H], da_x[:, t, 2 * H :] = da_z, da_r, da_n
            da_h[:, t, :H], da_h[:, t, H : 2 * H], da_h[:, t, 2 * H :] = da_z, da_r, dhU_n
            carry = dh_prev + da_h[:, t] @ U.T
        D = self.input_dim
        self.grads["W"] += x.reshape(-1, D).T @ da_x.reshape(-1, 3 * H)
        self.grads["U"] += h_prevs.reshape(-1, H).T @ da_h.reshape(-1, 3 * H)
        self.grads["b"] += da_x.sum(axis=(0, 1))
        return da_x @ W.T


class GruLayer(Module):
    def __init__(self, input_dim: int, hidden: int, bidirectional: bool,
                 rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.bidirectional = bidirectional
        self.add_module("fwd", GruDirection(input_dim, hidden, rng, dtype))
        if bidirectional:
            self.add_module("bwd", GruDirection(input_dim, hidden, rng, dtype))

    def forward(self, x: np.ndarray, lengths: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, dict]:
        h_f, cache_f = self._children["fwd"].forward(x, mask)
        if not self.bidirectional:
            return h_f, {"f": cache_f}
        x_rev = reverse_padded(x, lengths)
        h_b_rev, cache_b = self._children["bwd"].forward(x_rev, mask)
        h_b = reverse_padded(h_b_rev, lengths)
        return np.concatenate([h_f, h_b], axis=2), {"f": cache_f, "b": cache_b, "lengths": lengths}

    def backward(self, dh: np.ndarray, cache: dict) -> np.ndarray:
        if not self.bidirectional:
            return self._children["fwd"].backward(dh, cache["f"])
        H = dh.shape[2] // 2
        lengths = cache["lengths"]
        dx = self._children["fwd"].backward(dh[:, :, :H], cache["f"])
        dh_b_rev = reverse_padded(np.ascontiguousarray(dh[:, :, H:]), lengths)
        dx_rev = self._children["bwd"].backward(dh_b_rev, cache["b"])
        return dx + reverse_padded(dx_rev, lengths)


class GruStack(Module):
    def __init__(self, config: FeatureExtractorConfig, input_dim: int,
                 rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        config.validate()
        self.config = config
        d = input_dim
        for i in range(config.num_layers):
            self.add_module(f"l{i}", GruLayer(d, config.hidden, config.bidirectional, rng, dtype))
            d = config.feature_dim

    def forward(self, x: np.ndarray, lengths: np.ndarray) -> tuple[np.ndarray, dict]:
        mask = length_mask(lengths, x.shape[1])
        caches = []
        h = x
        for i in range(self.config.num_layers):
            h, c = self._children[f"l{i}"].forward(h, lengths, mask)
            caches.append(c)
        return h, {"layers": caches}

    def backward(self, dh: np.ndarray, cache: dict) -> np.ndarray:
        for i in range(self.config.num_layers - 1, -1, -1):
            dh = self._children[f"l{i}"].backward(dh, cache["layers"][i])
        return dh


class DayInputs(Module):
    """One affine map per recording session, identity at initialization.

    Unknown sessions raise unless `fallback` is set, in which case the mean of
    all session parameters is applied (inference-only heuristic; the fallback
    path produces no gradients).
    """

    def __init__(self, dim: int, sessions: Sequence[str], dtype=np.float64, fallback: bool = False):
        super().__init__()
        self.dim = dim
        self.fallback = fallback
        self.sessions = list(dict.fromkeys(sessions))
        if not self.sessions:
            raise FeatureExtractorError("DayInputs needs at least one session")
        for s in self.sessions:
            self.add_param(f"W.{s}", np.eye(dim, dtype=dtype))
            self.add_param(f"b.{s}", np.zeros(dim, dtype=dtype))

    def _maps_for(self, session_id: str) -> tuple[np.ndarray, np.ndarray]:
        if session_id in self.sessions:
            return self.params[f"W.{session_id}"], self.params[f"b.{session_id}"]
        if not self.fallback:
            raise FeatureExtractorError(f"unknown session: {session_id}")
        W = np.mean([self.params[f"W.{s}"] for s in self.sessions], axis=0)
        b = np.mean([self.params[f"b.{s}"] for s in self.sessions], axis=0)
        return W, b

    def forward(self, x: np.ndarray, session_ids: Sequence[str]) -> tuple[np.ndarray, dict]:
        if len(session_ids) != x.shape[0]:
            raise FeatureExtractorError("one session_id per batch item required")
        y = np.empty_like(x)
        for i, sid in enumerate(session_ids):
            W, b = self._maps_for(sid)
            y[i] = x[i] @ W + b
        return y, {"x": x, "session_ids": list(session_ids)}

    def backward(self, dy: np.ndarray, cache: dict) -> np.ndarray:
        x = cache["x"]
        dx = np.empty_like(dy)
        for i, sid in enumerate(cache["session_ids"]):
            if sid not in self.sessions:
                dx[i] = dy[i] @ self._maps_for(sid)[0].T
                continue
            self.grads[f"W.{sid}"] += x[i].T @ dy[i]
            self.grads[f"b.{sid}"] += dy[i].sum(axis=0)
            dx[i] = dy[i] @ self.params[f"W.{sid}"].T
        return dx


class FeatureExtractor(Module):
    """stack_frames -> day layer -> GRU stack (-> CTC head during pretraining)."""

    def __init__(self, config: FeatureExtractorConfig, channels: int, sessions: Sequence[str],
                 alphabet_size: int, rng: np.random.Generator, dtype=np.float64,
                 session_fallback: bool = False):
        super().__init__()
        config.validate()
        self.config = config
        self.channels = channels
        self.alphabet_size = alphabet_size
        self.input_dim = channels * config.stack_k
        self.add_module("day", DayInputs(self.input_dim, sessions, dtype, fallback=session_fallback))
        self.add_module("gru", GruStack(config, self.input_dim, rng, dtype))
        self.add_module("ctc_head", Linear(config.feature_dim, alphabet_size + 1, rng, dtype))
        self.dtype = dtype

    def forward_batch(self, signals: Sequence[np.ndarray], session_ids: Sequence[str]
                      ) -> tuple[np.ndarray, np.ndarray, dict]:
        """Returns (Z (B, T_b_max, F_b), lengths, cache)."""
        k, s = self.config.stack_k, self.config.stack_s
        stacked = [stack_frames(np.asarray(sig, dtype=self.dtype), k, s) for sig in signals]
        x, lengths = pad_batch(stacked, dtype=self.dtype)
        y, day_cache = self._children["day"].forward(x, session_ids)
        z, gru_cache = self._children["gru"].forward(y, lengths)
        return z, lengths, {"day": day_cache, "gru": gru_cache}

    def backward_batch(self, dz: np.ndarray, cache: dict) -> np.ndarray:
        dy = self._children["gru"].backward(dz, cache["gru"])
        return self._children["day"].backward(dy, cache["day"])

    def forward(self, signal: np.ndarray, session_id: str) -> np.ndarray:
        """Single-trial feature sequence Z of shape (T_b, F_b)."""
        z, lengths, _ = self.forward_batch([signal], [session_id])
        return z[0, : lengths[0]]

    def head_logits(self, z: np.ndarray) -> tuple[np.ndarray, tuple]:
        B, T, F_b = z.shape
        y, cache = self._children["ctc_head"].forward(z.reshape(-1, F_b))
        return y.reshape(B, T, -1), cache

    def head_backward(self, dlogits: np.ndarray, cache: tuple) -> np.ndarray:
        B, T, A1 = dlogits.shape
        dz = self._children["ctc_head"].backward(cache, dlogits.reshape(-1, A1))
        return dz.reshape(B, T, -1)


def _interleave_blanks(target: Sequence[int]) -> np.ndarray:
    ext = np.zeros(2 * len(target) + 1, dtype=np.int64)
    ext[1::2] = np.asarray(target, dtype=np.int64)
    return ext


def ctc_required_length(target: Sequence[int]) -> int:
    repeats = sum(1 for i in range(1, len(target)) if target[i] == target[i - 1])
    return len(target) + repeats


def _check_ctc_inputs(logits: np.ndarray, target: Sequence[int]) -> None:
    T, A1 = logits.shape
    tgt = np.asarray(target, dtype=np.int64)
    if tgt.size and (tgt.min() < 1 or tgt.max() >= A1):
        raise CtcError(f"target ids must lie in [1, {A1 - 1}]")
    need = ctc_required_length(target)
    if T < need:
        raise CtcError(
            f"no valid alignment: need T >= {need} for this target, got T = {T}"
        )


def _ctc_alpha_beta(lp: np.ndarray, ext: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
    T = lp.shape[0]
    S = ext.shape[0]
    allow_skip = np.zeros(S, dtype=bool)
    allow_skip[2:] = (ext[2:] != 0) & (ext[2:] != ext[:-2])
    alpha = np.full((T, S), LOG_ZERO)
    alpha[0, 0] = lp[0, ext[0]]
    if S > 1:
        alpha[0, 1] = lp[0, ext[1]]
    for t in range(1, T):
        prev = alpha[t - 1]
        stay = prev
        step = np.concatenate([[LOG_ZERO], prev])[:S]
        skip = np.concatenate([[LOG_ZERO, LOG_ZERO], prev])[:S]
        skip = np.where(allow_skip, skip, LOG_ZERO)
        m = np.maximum(np.maximum(stay, step), skip)
        alpha[t] = lp[t, ext] + m + np.log(
            np.exp(stay - m) + np.exp(step - m) + np.exp(skip - m)
        )
    tail = alpha[T - 1, S - 1]
    if S > 1:
        hi = max(tail, alpha[T - 1, S - 2])
        tail = hi + np.log(np.exp(tail - hi) + np.exp(alpha[T - 1, S - 2] - hi))
    beta = np.full((T, S), LOG_ZERO)
    beta[T - 1, S - 1] = lp[T - 1, ext[S - 1]]
    if S > 1:
        beta[T - 1, S - 2] = lp[T - 1, ext[S - 2]]
    allow_skip_fwd = np.zeros(S, dtype=bool)
    allow_skip_fwd[:-2] = (ext[:-2] != 0) & (ext[:-2] != ext[2:])
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1]
        stay = nxt
        step = np.concatenate([nxt[1:], [LOG_ZERO, LOG_ZERO]])[:S]
        skip = np.concatenate([nxt[2:], [LOG_ZERO, LOG_ZERO]])[:S]
        skip = np.where(allow_skip_fwd, skip, LOG_ZERO)
        m = np.maximum(np.maximum(stay, step), skip)
        beta[t] = lp[t, ext] + m + np.log(
            np.exp(stay - m) + np.exp(step - m) + np.exp(skip - m)
        )
    return alpha, beta, float(tail)


def ctc_loss(logits: np.ndarray, target: Sequence[int]) -> float:
    """-log P(target | logits) summed over all blank-interleaved alignments."""
    return ctc_loss_grad(logits, target)[0]


def ctc_loss_grad(logits: np.ndarray, target: Sequence[int]) -> tuple[float, np.ndarray]:
    """Loss plus d(loss)/d(logits), via the forward-backward occupancy rule:
    grad = softmax(logits) - per-symbol posterior occupancy."""
    logits64 = np.asarray(logits, dtype=np.float64)
    _check_ctc_inputs(logits64, target)
    T, A1 = logits64.shape
    ext = _interleave_blanks(target)
    lp = log_softmax(logits64, axis=1)
    alpha, beta, log_p = _ctc_alpha_beta(lp, ext)
    if not np.isfinite(log_p) or log_p <= LOG_ZERO / 2:
        raise CtcError("no valid alignment: zero total path probability")
    occ_log = alpha + beta - lp[:, ext] - log_p
    occupancy = np.zeros((T, A1))
    np.add.at(occupancy.T, ext, np.exp(occ_log).T)
    grad = softmax(logits64, axis=1) - occupancy
    return float(-log_p), grad


def ctc_loss_batch(
    logits: np.ndarray, lengths: np.ndarray, targets: Sequence[Sequence[int]]
) -> tuple[float, np.ndarray]:
    """Mean per-trial loss over the batch; padded frames get zero gradient."""
    B = logits.shape[0]
    if len(targets) != B or len(lengths) != B:
        raise CtcError("one target and one length per batch item required")
    grad = np.zeros_like(logits, dtype=np.float64)
    total = 0.0
    for i in range(B):
        L = int(lengths[i])
        loss_i, grad_i = ctc_loss_grad(logits[i, :L], targets[i])
        total += loss_i
        grad[i, :L] = grad_i / B
    return total / B, grad


def ctc_greedy_decode(logits: np.ndarray) -> list[int]:
    """Best-path decoding: per-frame argmax, collapse repeats, drop blanks.
    np.argmax breaks ties toward the lowest id."""
    path = np.argmax(np.asarray(logits), axis=1)
    out: list[int] = []
    prev = -1
    for p in path:
        if p != prev and p != 0:
            out.append(int(p))
        prev = p
    return out
