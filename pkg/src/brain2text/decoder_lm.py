"""Causal transformer decoder conditioned on a projected signal prefix.

The input sequence is [E rows..., embed(bos), embed(targets)...] with learned
positional embeddings over the whole thing, pre-norm residual blocks, exact
GELU, and an untied output head. The negative log-likelihood averages over
target positions only; prefix rows never enter the loss. Padded rows sit at
the tail of each sequence, where the causal mask makes them unreachable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import load_arrays, save_arrays
from .nn import Embedding, LayerNorm, Linear, Module, gelu, gelu_grad, log_softmax, softmax

ATTN_MASK_VALUE = -1e30


class DecoderError(ValueError):
    pass


@dataclass(frozen=True)
class DecoderConfig:
    vocab_size: int
    embed_dim: int = 64
    num_layers: int = 2
    num_heads: int = 4
    ff_dim: int = 256
    max_context: int = 256
    bos_id: int = 0
    eos_id: int = 1
    pad_id: int = 2

    def validate(self) -> None:
        if self.embed_dim % self.num_heads != 0:
            raise DecoderError("embed_dim must be divisible by num_heads")
        specials = (self.bos_id, self.eos_id, self.pad_id)
        if len(set(specials)) != 3:
            raise DecoderError("bos/eos/pad ids must be distinct")
        if max(specials) >= self.vocab_size or min(specials) < 0:
            raise DecoderError("special ids must lie in [0, vocab_size)")
        if self.num_layers < 1 or self.ff_dim < 1 or self.max_context < 2:
            raise DecoderError("bad decoder dimensions")

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "embed_dim": self.embed_dim,
            "num_layers": self.num_layers,
            "num_heads": self.num_heads,
            "ff_dim": self.ff_dim,
            "max_context": self.max_context,
            "bos_id": self.bos_id,
            "eos_id": self.eos_id,
            "pad_id": self.pad_id,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DecoderConfig":
        cfg = cls(**{k: int(v) for k, v in d.items()})
        cfg.validate()
        return cfg


@dataclass(frozen=True)
class GenerationConfig:
    mode: str = "greedy"
    beam_size: int = 5
    max_new_tokens: int = 32
    length_penalty: float = 0.0

    def validate(self) -> None:
        if self.mode not in ("greedy", "beam"):
            raise DecoderError(f"unknown generation mode: {self.mode!r}")
        if self.beam_size < 1:
            raise DecoderError("beam_size must be >= 1")
        if self.max_new_tokens < 1:
            raise DecoderError("max_new_tokens must be >= 1")


@dataclass
class GenerationResult:
    ids: list[int]
    logprob: float
    truncated: bool
    score: float = field(default=0.0)

    def to_record(self, trial_id: str, hypothesis: str) -> dict:
        return {
            "trial_id": trial_id,
            "hypothesis": hypothesis,
            "logprob": self.logprob,
            "truncated": self.truncated,
        }


class CausalSelfAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        for name in ("q", "k", "v", "o"):
            self.add_module(name, Linear(dim, dim, rng, dtype, init="normal"))

    def _split(self, x: np.ndarray) -> np.ndarray:
        B, S, _ = x.shape
        return x.reshape(B, S, self.heads, self.head_dim).transpose(0, 2, 1, 3)

    def _merge(self, x: np.ndarray) -> np.ndarray:
        B, h, S, dh = x.shape
        return x.transpose(0, 2, 1, 3).reshape(B, S, h * dh)

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, tuple]:
        B, S, D = x.shape
        q, cq = self._children["q"].forward(x)
        k, ck = self._children["k"].forward(x)
        v, cv = self._children["v"].forward(x)
        qh, kh, vh = self._split(q), self._split(k), self._split(v)
        scale = 1.0 / np.sqrt(self.head_dim)
        scores = (qh @ kh.transpose(0, 1, 3, 2)) * scale
        mask = np.triu(np.full((S, S), ATTN_MASK_VALUE, dtype=scores.dtype), k=1)
        probs = softmax(scores + mask, axis=-1)
        ctx = probs @ vh
        y, co = self._children["o"].forward(self._merge(ctx))
        return y, (cq, ck, cv, co, qh, kh, vh, probs)

    def backward(self, cache: tuple, dy: np.ndarray) -> np.ndarray:
        cq, ck, cv, co, qh, kh, vh, probs = cache
        scale = 1.0 / np.sqrt(self.head_dim)
        dctx = self._split(self._children["o"].backward(co, dy))
        dprobs = dctx @ vh.transpose(0, 1, 3, 2)
        dvh = probs.transpose(0, 1, 3, 2) @ dctx
        dscores = probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True))
        dqh = (dscores @ kh) * scale
        dkh = (dscores.transpose(0, 1, 3, 2) @ qh) * scale
        dx = self._children["q"].backward(cq, self._merge(dqh))
        dx = dx + self._children["k"].backward(ck, self._merge(dkh))
        dx = dx + self._children["v"].backward(cv, self._merge(dvh))
        return dx


class Mlp(Module):
    def __init__(self, dim: int, ff_dim: int, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.add_module("fc1", Linear(dim, ff_dim, rng, dtype, init="normal"))
        self.add_module("fc2", Linear(ff_dim, dim, rng, dtype, init="normal"))

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, tuple]:
        a, c1 = self._children["fc1"].forward(x)
        y, c2 = self._children["fc2"].forward(gelu(a))
        return y, (c1, a, c2)

    def backward(self, cache: tuple, dy: np.ndarray) -> np.ndarray:
        c1, a, c2 = cache
        dg = self._children["fc2"].backward(c2, dy)
        return self._children["fc1"].backward(c1, dg * gelu_grad(a))


class Block(Module):
    def __init__(self, dim: int, heads: int, ff_dim: int, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.add_module("ln1", LayerNorm(dim, dtype))
        self.add_module("attn", CausalSelfAttention(dim, heads, rng, dtype))
        self.add_module("ln2", LayerNorm(dim, dtype))
        self.add_module("mlp", Mlp(dim, ff_dim, rng, dtype))

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, tuple]:
        n1, cl1 = self._children["ln1"].forward(x)
        a, ca = self._children["attn"].forward(n1)
        x1 = x + a
        n2, cl2 = self._children["ln2"].forward(x1)
        m, cm = self._children["mlp"].forward(n2)
        return x1 + m, (cl1, ca, cl2, cm)

    def backward(self, cache: tuple, dy: np.ndarray) -> np.ndarray:
        cl1, ca, cl2, cm = cache
        dn2 = self._children["mlp"].backward(cm, dy)
        dx1 = dy + self._children["ln2"].backward(cl2, dn2)
        dn1 = self._children["attn"].backward(ca, dx1)
        return dx1 + self._children["ln1"].backward(cl1, dn1)


class DecoderLM(Module):
    def __init__(self, config: DecoderConfig, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        config.validate()
        self.config = config
        self.dtype = dtype
        self.add_module("tok", Embedding(config.vocab_size, config.embed_dim, rng, dtype))
        self.add_module("pos", Embedding(config.max_context, config.embed_dim, rng, dtype))
        for i in range(config.num_layers):
            self.add_module(
                f"blocks.l{i}",
                Block(config.embed_dim, config.num_heads, config.ff_dim, rng, dtype),
            )
        self.add_module("ln_f", LayerNorm(config.embed_dim, dtype))
        self.add_module("lm_head", Linear(config.embed_dim, config.vocab_size, rng, dtype,
                                          bias=False, init="normal"))

    # ---- core row transformer ----

    def _run(self, h0: np.ndarray) -> tuple[np.ndarray, dict]:
        B, S, D = h0.shape
        if S > self.config.max_context:
            raise DecoderError(f"context overflow: {S} rows > max_context {self.config.max_context}")
        h = h0 + self.params_of("pos")["table"][:S][None, :, :]
        caches = []
        for i in range(self.config.num_layers):
            h, c = self._children[f"blocks.l{i}"].forward(h)
            caches.append(c)
        hf, clf = self._children["ln_f"].forward(h)
        logits, ch = self._children["lm_head"].forward(hf)
        return logits, {"blocks": caches, "ln_f": clf, "head": ch, "S": S}

    def _run_backward(self, cache: dict, dlogits: np.ndarray) -> np.ndarray:
        dhf = self._children["lm_head"].backward(cache["head"], dlogits)
        dh = self._children["ln_f"].backward(cache["ln_f"], dhf)
        for i in range(self.config.num_layers - 1, -1, -1):
            dh = self._children[f"blocks.l{i}"].backward(cache["blocks"][i], dh)
        S = cache["S"]
        self.grads_of("pos")["table"][:S] += dh.sum(axis=0)
        return dh

    def params_of(self, child: str) -> dict:
        return self._children[child].params

    def grads_of(self, child: str) -> dict:
        return self._children[child].grads

    # ---- public ops ----

    def embed_tokens(self, ids: Sequence[int]) -> np.ndarray:
        y, _ = self._children["tok"].forward(np.asarray(list(ids), dtype=np.int64))
        return y

    def _assemble(self, E_pad: np.ndarray, prefix_lengths: Sequence[int],
                  token_rows: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
        """Pack [E_i, tokens_i, pad...] per sample; ids matrix has -1 at E rows."""
        B = E_pad.shape[0]
        D = self.config.embed_dim
        table = self.params_of("tok")["table"]
        seq_lens = [int(prefix_lengths[i]) + len(token_rows[i]) for i in range(B)]
        S = max(seq_lens)
        h0 = np.zeros((B, S, D), dtype=self.dtype)
        ids_mat = np.full((B, S), -1, dtype=np.int64)
        for i in range(B):
            P = int(prefix_lengths[i])
            toks = np.asarray(list(token_rows[i]), dtype=np.int64)
            if toks.size and (toks.min() < 0 or toks.max() >= self.config.vocab_size):
                raise DecoderError(f"token id out of range [0, {self.config.vocab_size})")
            h0[i, :P] = E_pad[i, :P]
            h0[i, P : P + toks.size] = table[toks]
            ids_mat[i, P : P + toks.size] = toks
            if seq_lens[i] < S:
                h0[i, seq_lens[i] :] = table[self.config.pad_id]
                ids_mat[i, seq_lens[i] :] = self.config.pad_id
        return h0, ids_mat

    def forward_with_prefix(self, E: np.ndarray, token_ids: Sequence[int]) -> np.ndarray:
        """Logits for positions bos onward, conditioned on prefix rows E."""
        E = np.asarray(E, dtype=self.dtype)
        if E.ndim != 2 or E.shape[1] != self.config.embed_dim:
            raise DecoderError(f"prefix must be (T_b, {self.config.embed_dim})")
        P = E.shape[0]
        rows = [self.config.bos_id, *token_ids]
        h0, _ = self._assemble(E[None], [P], [rows])
        logits, _ = self._run(h0)
        return logits[0, P:]

    def nll_batch(self, E_pad: np.ndarray, prefix_lengths: Sequence[int],
                  targets: Sequence[Sequence[int]]) -> tuple[float, dict]:
        """Mean over batch of per-trial mean NLL over target positions."""
        B = E_pad.shape[0]
        if len(prefix_lengths) != B or len(targets) != B:
            raise DecoderError("one prefix length and one target per batch item required")
        for t in targets:
            if len(t) == 0:
                raise DecoderError("empty target")
        token_rows = [[self.config.bos_id, *t] for t in targets]
        h0, ids_mat = self._assemble(E_pad, prefix_lengths, token_rows)
        logits, run_cache = self._run(h0)
        lp = log_softmax(np.asarray(logits, dtype=np.float64), axis=-1)
        probs = np.exp(lp)
        dlogits = np.zeros_like(logits, dtype=np.float64)
        total = 0.0
        for i in range(B):
            P = int(prefix_lengths[i])
            tgt = list(targets[i])
            L = len(tgt)
            w = 1.0 / (B * L)
            rows = np.arange(P, P + L)
            total += -lp[i, rows, tgt].sum() / L
            dlogits[i, rows] += probs[i, rows] * w
            dlogits[i, rows, tgt] -= w
        cache = {
            "run": run_cache,
            "dlogits": dlogits.astype(self.dtype),
            "ids_mat": ids_mat,
            "prefix_lengths": [int(p) for p in prefix_lengths],
            "E_shape": E_pad.shape,
        }
        return total / B, cache

    def nll_batch_backward(self, cache: dict) -> np.ndarray:
        """Returns d(loss)/dE in the padded prefix layout; accumulates
        parameter gradients (token table rows included) along the way."""
        dh0 = self._run_backward(cache["run"], cache["dlogits"])
        ids_mat = cache["ids_mat"]
        valid = ids_mat >= 0
        np.add.at(self.grads_of("tok")["table"], ids_mat[valid], dh0[valid])
        dE = np.zeros(cache["E_shape"], dtype=self.dtype)
        for i, P in enumerate(cache["prefix_lengths"]):
            dE[i, :P] = dh0[i, :P]
        return dE

    def nll(self, E: np.ndarray, target_ids: Sequence[int]) -> float:
        E = np.asarray(E, dtype=self.dtype)
        loss, _ = self.nll_batch(E[None], [E.shape[0]], [list(target_ids)])
        return loss

    # ---- generation ----

    def _last_logprobs(self, E: np.ndarray, hyps: Sequence[Sequence[int]]) -> np.ndarray:
        """Next-token log-probs for a batch of equal-length hypotheses."""
        K = len(hyps)
        P = E.shape[0]
        E_pad = np.repeat(E[None], K, axis=0).astype(self.dtype)
        rows = [[self.config.bos_id, *h] for h in hyps]
        h0, _ = self._assemble(E_pad, [P] * K, rows)
        logits, _ = self._run(h0)
        last = logits[:, P + len(hyps[0]), :]
        return log_softmax(np.asarray(last, dtype=np.float64), axis=-1)

    def generate(self, E: np.ndarray, gen: GenerationConfig) -> GenerationResult:
        gen.validate()
        E = np.asarray(E, dtype=self.dtype)
        room = self.config.max_context - (E.shape[0] + 1)
        max_new = min(gen.max_new_tokens, max(room, 0))
        if gen.mode == "greedy":
            return self._generate_greedy(E, max_new)
        return self._generate_beam(E, gen, max_new)

    def _generate_greedy(self, E: np.ndarray, max_new: int) -> GenerationResult:
        ids: list[int] = []
        total = 0.0
        for _ in range(max_new):
            lp = self._last_logprobs(E, [ids])[0]
            tok = int(np.argmax(lp))
            total += float(lp[tok])
            if tok == self.config.eos_id:
                return GenerationResult(ids=ids, logprob=total, truncated=False, score=total)
            ids.append(tok)
        return GenerationResult(ids=ids, logprob=total, truncated=True, score=total)

    def _generate_beam(self, E: np.ndarray, gen: GenerationConfig, max_new: int) -> GenerationResult:
        """Beam search over cumulative log-prob. Hypotheses finalize at eos;
        final ranking is logprob / ((5 + len)/6)^alpha with len counting
        generated tokens before eos. Ties go to the earlier candidate in
        (hypothesis rank, token id) order via stable sorting."""
        active: list[tuple[list[int], float]] = [([], 0.0)]
        finalized: list[tuple[list[int], float]] = []
        for _ in range(max_new):
            if not active or len(finalized) >= gen.beam_size:
                break
            lps = self._last_logprobs(E, [h for h, _ in active])
            V = lps.shape[1]
            cand_lp = np.concatenate([lps[i] + active[i][1] for i in range(len(active))])
            order = np.argsort(-cand_lp, kind="stable")[: gen.beam_size]
            new_active: list[tuple[list[int], float]] = []
            for flat in order:
                hyp_idx, tok = divmod(int(flat), V)
                ids = active[hyp_idx][0]
                lp_total = float(cand_lp[flat])
                if tok == self.config.eos_id:
                    finalized.append((ids, lp_total))
                else:
                    new_active.append((ids + [tok], lp_total))
            active = new_active
        truncated = not finalized
        pool = finalized if finalized else active
        if not pool:
            return GenerationResult(ids=[], logprob=float("-inf"), truncated=True, score=float("-inf"))
        alpha = gen.length_penalty
        best_ids, best_lp, best_score = None, 0.0, -np.inf
        for ids, lp_total in pool:
            score = lp_total / (((5.0 + len(ids)) / 6.0) ** alpha) if alpha != 0.0 else lp_total
            if score > best_score:
                best_ids, best_lp, best_score = ids, lp_total, score
        return GenerationResult(ids=list(best_ids), logprob=best_lp, truncated=truncated,
                                score=float(best_score))

    # ---- low-rank adaptation ----

    def adapted_linears(self, targets: Sequence[str] = ("q", "v")) -> list[tuple[str, Linear]]:
        out = []
        for i in range(self.config.num_layers):
            attn = self._children[f"blocks.l{i}"]._children["attn"]
            for t in targets:
                if t not in attn._children:
                    raise DecoderError(f"no attention map named {t!r}")
                out.append((f"blocks.l{i}.attn.{t}", attn._children[t]))
        return out

    def attach_lora(self, rank: int, rng: np.random.Generator,
                    targets: Sequence[str] = ("q", "v")) -> list[str]:
        names = []
        for name, lin in self.adapted_linears(targets):
            lin.attach_adapter(rank, rng)
            names.extend([f"{name}.lora_A", f"{name}.lora_B"])
        return names

    def merge_lora(self, targets: Sequence[str] = ("q", "v")) -> None:
        for _, lin in self.adapted_linears(targets):
            if lin.has_adapter:
                lin.merge_adapter()

    # ---- persistence ----

    def save(self, out_dir: str | Path) -> Path:
        return save_arrays(
            out_dir,
            self.named_parameters(),
            extras={"model.json": json.dumps(self.config.to_dict(), sort_keys=True, indent=2)},
            meta={"kind": "decoder_lm", "model": self.config.to_dict()},
        )

    @classmethod
    def import_pretrained(cls, weights_dir: str | Path) -> "DecoderLM":
        """Rebuild a decoder from a saved directory, bit-exact, listing every
        name/shape mismatch at once instead of failing on the first."""
        arrays, manifest = load_arrays(weights_dir)
        model_meta = manifest.get("meta", {}).get("model")
        if model_meta is None:
            raise DecoderError(f"{weights_dir}: manifest holds no decoder config")
        config = DecoderConfig.from_dict(model_meta)
        dtype = arrays[next(iter(arrays))].dtype if arrays else np.float64
        decoder = cls(config, np.random.default_rng(0), dtype=dtype)
        expected = decoder.named_parameters()
        problems = []
        for name in sorted(set(expected) - set(arrays)):
            problems.append(f"missing: {name}")
        for name in sorted(set(arrays) - set(expected)):
            problems.append(f"unexpected: {name}")
        for name in sorted(set(arrays) & set(expected)):
            if tuple(arrays[name].shape) != tuple(expected[name].shape):
                problems.append(
                    f"shape mismatch: {name} stored {tuple(arrays[name].shape)}, "
                    f"expected {tuple(expected[name].shape)}"
                )
        if problems:
            raise DecoderError(
                f"cannot import decoder from {weights_dir}:\n  " + "\n  ".join(problems)
            )
        decoder.load_state(arrays)
        return decoder
