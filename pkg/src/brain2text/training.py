"""Three-stage optimization with bit-exact checkpoints.

Stage 1 pretrains the feature extractor with CTC. Stage 2 trains extractor
and bridge against a frozen decoder. Stage 3 freezes the extractor and trains
decoder (optionally through low-rank adapters) plus bridge, the bridge at its
own faster rate. Freezing is enforced bitwise: parameter hashes are taken
before and after each stage and compared.

Every random draw derives from (seed, purpose, epoch, index) streams, so a
run interrupted at any epoch boundary and resumed from its checkpoint
reproduces the uninterrupted run exactly.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .bridge import Bridge
from .checkpoint import group_hashes, load_arrays, save_arrays
from .dataset import DatasetManifest, Trial
from .decoder_lm import DecoderLM
from .evaluation import ErrorCounts, edit_distance, sentence_counts
from .feature_extractor import (
    FeatureExtractor,
    ctc_greedy_decode,
    ctc_loss_batch,
    ctc_required_length,
    stacked_length,
)
from .preprocessing import AugmentationConfig, BlockStats, eval_view, training_view
from .seeding import INIT, SHUFFLE, WARMUP, rng_for

STAGES = ("pretrain_fe", "align", "finetune")

STAGE_DEFAULTS = {
    "pretrain_fe": dict(epochs=400, batch_size=64, lr_main=0.02, weight_decay=1e-5,
                        grad_clip=0.0, lora_rank=0),
    "align": dict(epochs=100, batch_size=8, lr_main=1e-3, weight_decay=0.0,
                  grad_clip=1.0, lora_rank=0),
    "finetune": dict(epochs=200, batch_size=8, lr_main=5e-5, lr_bridge=1e-3,
                     weight_decay=0.0, grad_clip=1.0, lora_rank=8),
}


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class StageConfig:
    stage: str
    epochs: int
    batch_size: int
    lr_main: float
    lr_bridge: float = 0.0       # 0 -> same as lr_main
    weight_decay: float = 0.0
    warmup_steps: int = 400
    seed: int = 0
    lora_rank: int = 0
    grad_clip: float = 0.0

    def validate(self) -> None:
        if self.stage not in STAGES:
            raise TrainingError(f"unknown stage: {self.stage!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise TrainingError("epochs must be >= 0 and batch_size >= 1")
        if self.lr_main < 0 or self.lr_bridge < 0 or self.weight_decay < 0:
            raise TrainingError("rates must be nonnegative")
        if self.lora_rank < 0 or self.grad_clip < 0 or self.warmup_steps < 0:
            raise TrainingError("lora_rank, grad_clip, warmup_steps must be >= 0")

    @property
    def bridge_lr(self) -> float:
        return self.lr_bridge if self.lr_bridge > 0 else self.lr_main

    @classmethod
    def defaults(cls, stage: str, **overrides) -> "StageConfig":
        if stage not in STAGE_DEFAULTS:
            raise TrainingError(f"unknown stage: {stage!r}")
        kwargs = dict(STAGE_DEFAULTS[stage])
        kwargs.update(overrides)
        cfg = cls(stage=stage, **kwargs)
        cfg.validate()
        return cfg


@dataclass(frozen=True)
class Schedule:
    """Linear 0 -> peak over warmup_steps, then linear peak -> 0 at total."""

    peak_lr: float
    total_steps: int
    warmup_steps: int = 400

    def __post_init__(self) -> None:
        if self.total_steps > 0 and self.warmup_steps >= self.total_steps:
            raise TrainingError(
                f"warmup_steps ({self.warmup_steps}) must be < total_steps ({self.total_steps})"
            )

    def lr_at(self, step: int) -> float:
        if step < 0 or step > self.total_steps:
            raise TrainingError(f"step {step} outside schedule [0, {self.total_steps}]")
        if self.warmup_steps > 0 and step <= self.warmup_steps:
            return self.peak_lr * step / self.warmup_steps
        return self.peak_lr * (self.total_steps - step) / (self.total_steps - self.warmup_steps)


class AdamW:
    """Decoupled weight decay: p <- p - lr*wd*p, then the moment update."""

    def __init__(self, params: dict[str, np.ndarray],
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {n: np.zeros_like(p, dtype=np.float64) for n, p in params.items()}
        self.v = {n: np.zeros_like(p, dtype=np.float64) for n, p in params.items()}
        self.step_count = 0

    def step(self, grads: dict[str, np.ndarray],
             lr: float | dict[str, float], weight_decay: float) -> None:
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for name, p in self.params.items():
            g = np.asarray(grads[name], dtype=np.float64)
            if not np.all(np.isfinite(g)):
                raise TrainingError(f"non-finite gradient in parameter {name}")
            lr_n = lr[name] if isinstance(lr, dict) else lr
            if weight_decay != 0.0:
                p *= 1.0 - lr_n * weight_decay
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p -= (lr_n * update).astype(p.dtype)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for n in self.params:
            out[f"opt.m.{n}"] = self.m[n]
            out[f"opt.v.{n}"] = self.v[n]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], step_count: int) -> None:
        for n in self.params:
            for prefix, store in (("opt.m.", self.m), ("opt.v.", self.v)):
                key = prefix + n
                if key not in arrays:
                    raise TrainingError(f"optimizer state missing group {key}")
                if arrays[key].shape != store[n].shape:
                    raise TrainingError(f"optimizer state shape mismatch for {key}")
                store[n] = arrays[key].astype(np.float64)
        self.step_count = step_count


def clip_grads_(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Global-norm clipping in place; returns the pre-clip norm."""
    total = 0.0
    for g in grads.values():
        total += float(np.sum(np.asarray(g, dtype=np.float64) ** 2))
    norm = math.sqrt(total)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


def _epoch_batches(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    order = rng_for(seed, SHUFFLE, epoch).permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


# ---- checkpoint composition ----

def save_training_checkpoint(
    out_dir: str | Path,
    params: dict[str, np.ndarray],
    opt: AdamW | None,
    state: dict,
    extras: dict[str, str] | None = None,
) -> Path:
    arrays = dict(params)
    if opt is not None:
        arrays.update(opt.state_arrays())
    all_extras = dict(extras or {})
    all_extras["state.json"] = json.dumps(state, sort_keys=True, indent=2) + "\n"
    metrics = state.get("metrics", [])
    all_extras["metrics.jsonl"] = "".join(json.dumps(m, sort_keys=True) + "\n" for m in metrics)
    return save_arrays(out_dir, arrays, extras=all_extras,
                       meta={"kind": "training_checkpoint", "stage": state.get("stage")})


def load_training_checkpoint(ckpt_dir: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    arrays, _ = load_arrays(ckpt_dir)
    state = json.loads((Path(ckpt_dir) / "state.json").read_text(encoding="utf-8"))
    return arrays, state


def split_namespace(arrays: dict[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    cut = len(prefix)
    return {n[cut:]: a for n, a in arrays.items() if n.startswith(prefix)}


# ---- shared stage plumbing ----

def _metric_float(x: float) -> float:
    return float(np.float64(x))


def _resume_state(out_dir: Path, stage: str, resume: bool) -> tuple[dict[str, np.ndarray], dict] | None:
    if not resume:
        return None
    if not (out_dir / "manifest.json").exists():
        return None
    arrays, state = load_training_checkpoint(out_dir)
    if state.get("stage") != stage:
        raise TrainingError(
            f"checkpoint at {out_dir} is for stage {state.get('stage')!r}, not {stage!r}"
        )
    return arrays, state


def _pooled_per(pairs: Sequence[tuple[list[int], list[int]]]) -> float:
    total = ErrorCounts(0, 0, 0, 0)
    for ref, hyp in pairs:
        total = total + edit_distance(ref, hyp)
    return total.rate


def run_pretrain_fe(
    manifest: DatasetManifest,
    stats: BlockStats,
    aug: AugmentationConfig,
    fe: FeatureExtractor,
    target_fn: Callable[[Trial], list[int]],
    cfg: StageConfig,
    out_dir: str | Path,
    resume: bool = False,
    extras: dict[str, str] | None = None,
) -> Path:
    """CTC pretraining of day layers + GRU + classification head."""
    cfg.validate()
    out_dir = Path(out_dir)
    train_all = [t for t in manifest.trials if t.split == "train"]
    eval_trials = [t for t in manifest.trials if t.split == "test"]
    k, s = fe.config.stack_k, fe.config.stack_s
    train: list[Trial] = []
    targets: dict[str, list[int]] = {}
    for t in train_all:
        tgt = target_fn(t)
        if stacked_length(t.T, k, s) < ctc_required_length(tgt):
            warnings.warn(
                f"trial {t.trial_id} skipped: no valid alignment "
                f"(T_b={stacked_length(t.T, k, s)} < {ctc_required_length(tgt)})",
                stacklevel=2,
            )
            continue
        targets[t.trial_id] = tgt
        train.append(t)
    if not train:
        raise TrainingError("no trainable trials after alignment feasibility filter")
    eval_targets = {t.trial_id: target_fn(t) for t in eval_trials}

    steps_per_epoch = math.ceil(len(train) / cfg.batch_size)
    sched = Schedule(cfg.lr_main, cfg.epochs * steps_per_epoch, cfg.warmup_steps)
    opt = AdamW(fe.named_parameters())
    start_epoch, step = 0, 0
    metrics: list[dict] = []

    resumed = _resume_state(out_dir, "pretrain_fe", resume)
    if resumed is not None:
        arrays, state = resumed
        fe.load_state(split_namespace(arrays, "fe."))
        opt.load_state_arrays(arrays, state["opt_step"])
        start_epoch, step = state["next_epoch"], state["step"]
        metrics = state["metrics"]

    def snapshot(next_epoch: int) -> Path:
        params = {f"fe.{n}": p for n, p in fe.named_parameters().items()}
        state = {
            "stage": "pretrain_fe",
            "config": asdict(cfg),
            "next_epoch": next_epoch,
            "step": step,
            "opt_step": opt.step_count,
            "metrics": metrics,
            "complete": next_epoch >= cfg.epochs,
        }
        return save_training_checkpoint(out_dir, params, opt, state, extras)

    for epoch in range(start_epoch, cfg.epochs):
        loss_sum, n_batches = 0.0, 0
        for chunk in _epoch_batches(len(train), cfg.batch_size, cfg.seed, epoch):
            batch = [train[i] for i in chunk]
            views = [
                training_view(manifest, tr, stats, aug, cfg.seed, epoch, int(ti))
                for ti, tr in zip(chunk, batch)
            ]
            Z, lengths, cache = fe.forward_batch(views, [t.session_id for t in batch])
            logits, hcache = fe.head_logits(Z)
            loss, dlogits = ctc_loss_batch(logits, lengths, [targets[t.trial_id] for t in batch])
            fe.zero_grad()
            dZ = fe.head_backward(dlogits.astype(fe.dtype), hcache)
            fe.backward_batch(dZ, cache)
            grads = fe.named_grads()
            if cfg.grad_clip > 0:
                clip_grads_(grads, cfg.grad_clip)
            step += 1
            opt.step(grads, sched.lr_at(step), cfg.weight_decay)
            loss_sum += loss
            n_batches += 1
        pairs = []
        for t in eval_trials:
            x = eval_view(manifest, t, stats, aug)
            z = fe.forward(x, t.session_id)
            logits, _ = fe.head_logits(z[None])
            pairs.append((eval_targets[t.trial_id], ctc_greedy_decode(logits[0])))
        metrics.append({
            "epoch": epoch,
            "loss": _metric_float(loss_sum / max(n_batches, 1)),
            "per": _metric_float(_pooled_per(pairs)) if pairs else None,
        })
        snapshot(epoch + 1)
    if start_epoch >= cfg.epochs:
        snapshot(start_epoch)
    return out_dir


def _e2e_epoch(
    manifest: DatasetManifest,
    stats: BlockStats,
    aug: AugmentationConfig,
    fe: FeatureExtractor,
    bridge: Bridge,
    decoder: DecoderLM,
    train: list[Trial],
    targets: dict[str, list[int]],
    cfg: StageConfig,
    epoch: int,
    step: int,
    sched: Schedule,
    opt: AdamW,
    grad_sources: Callable[[], dict[str, np.ndarray]],
    lr_map: Callable[[float], float | dict[str, float]],
    backprop_fe: bool,
) -> tuple[float, int]:
    loss_sum, n_batches = 0.0, 0
    for chunk in _epoch_batches(len(train), cfg.batch_size, cfg.seed, epoch):
        batch = [train[i] for i in chunk]
        views = [
            training_view(manifest, tr, stats, aug, cfg.seed, epoch, int(ti))
            for ti, tr in zip(chunk, batch)
        ]
        Z, lengths, fcache = fe.forward_batch(views, [t.session_id for t in batch])
        E_pad, bcache = bridge.project(Z)
        loss, dcache = decoder.nll_batch(
            E_pad, [int(x) for x in lengths], [targets[t.trial_id] for t in batch]
        )
        fe.zero_grad()
        bridge.zero_grad()
        decoder.zero_grad()
        dE = decoder.nll_batch_backward(dcache)
        dZ = bridge.backward(bcache, dE)
        if backprop_fe:
            fe.backward_batch(dZ, fcache)
        grads = grad_sources()
        if cfg.grad_clip > 0:
            clip_grads_(grads, cfg.grad_clip)
        step += 1
        opt.step(grads, lr_map(sched.lr_at(step)), cfg.weight_decay)
        loss_sum += loss
        n_batches += 1
    return loss_sum / max(n_batches, 1), step


def _wer_on(trials: Sequence[Trial], hyp_fn: Callable[[Trial], str]) -> float:
    total = ErrorCounts(0, 0, 0, 0)
    for t in trials:
        total = total + sentence_counts(t.transcription, hyp_fn(t))
    return total.rate


def run_lm_warmup(
    decoder: DecoderLM,
    bpe,
    manifest: DatasetManifest,
    epochs: int,
    batch_size: int = 32,
    lr: float = 1e-3,
    n_sentences: int = 2000,
    seed: int = 0,
    prefix_range: tuple[int, int] | None = None,
    lexicon=None,
    inventory=None,
    copy_frac: float = 0.8,
    copy_repeat: tuple[int, int] = (1, 3),
    copy_noise: float = 0.5,
    codebook_std: float = 0.05,
    mix_prob: float = 0.5,
    mix_max: float = 0.4,
    sub_prob: float = 0.12,
    scale_range: tuple[float, float] = (0.5, 4.0),
) -> float:
    """Prefix-reading pretraining of the decoder before it is frozen.

    The corpus is word salad: vocabulary and sentence lengths come from the
    train-split transcriptions, the word order is random. The decoder learns
    the token composition of every word and the sentence shape without ever
    seeing a real training sentence, so no memorization can leak into the
    frozen model. Returns the final mean loss.

    When ``prefix_range``, ``lexicon``, and ``inventory`` are given, a
    ``copy_frac`` share of sentences carry a readable prefix: the sentence
    rendered as phonemes, each phoneme a fixed random codebook vector
    repeated a random number of times from ``copy_repeat`` and corrupted
    four ways: blended toward another code (``mix_prob``/``mix_max``),
    replaced outright (``sub_prob``), perturbed with Gaussian noise
    (``copy_noise`` times the codebook scale), and rescaled per sentence by
    a log-uniform factor from ``scale_range``. This mimics the feature
    prefixes alignment will insert (phoneme-rate rows, stretched over time,
    only approximately on the codebook), so the decoder learns the
    pronunciation-to-spelling mapping, the attention alignment, when to
    stop, and how to correct unreliable rows, all from unlimited salad.
    The corruption also makes code direction the only reliable signal, so
    alignment cannot lower its loss except by pulling the extractor and
    bridge onto the codebook. The remaining sentences get an all-zero or
    empty prefix, which keeps a plain language prior at every positional
    offset the text can land on.
    """
    from .textproc import grapheme_to_phoneme

    train = [t for t in manifest.trials if t.split == "train"]
    words = sorted({w for t in train for w in t.transcription.split()})
    lengths = [len(t.transcription.split()) for t in train if t.transcription.split()]
    if not words or not lengths:
        raise TrainingError("no training text to warm the decoder up on")
    rng = rng_for(seed, WARMUP, 0)
    eos = decoder.config.eos_id
    max_ctx = decoder.config.max_context
    embed_dim = decoder.config.embed_dim
    phoneme_mode = prefix_range is not None and lexicon is not None and inventory is not None
    codebook = None
    if phoneme_mode:
        codebook = rng_for(seed, WARMUP, 9).normal(
            0.0, codebook_std, size=(len(inventory.symbols) + 1, embed_dim))
    targets = []
    row_plans = []
    for _ in range(n_sentences):
        n = lengths[int(rng.integers(len(lengths)))]
        sent = " ".join(words[int(rng.integers(len(words)))] for _ in range(n))
        tokens = bpe.encode(sent)
        targets.append(tokens + [eos])
        if prefix_range is None:
            row_plans.append(None)
            continue
        lo, hi = prefix_range
        cap = min(hi, max_ctx - len(tokens) - 2)
        u = rng.random()
        if phoneme_mode and u < copy_frac:
            phones = np.asarray(
                [inventory.id_of(p) for p in grapheme_to_phoneme(sent, lexicon)],
                dtype=np.int64)
            reps = rng.integers(copy_repeat[0], copy_repeat[1] + 1, size=len(phones))
            while int(reps.sum()) > cap:
                reps[int(np.argmax(reps))] -= 1
            row_plans.append(np.repeat(phones, reps))
        elif u < copy_frac + 0.5 * (1.0 - copy_frac):
            row_plans.append(int(rng.integers(lo, min(hi, cap) + 1)))
        else:
            row_plans.append(0)

    params = decoder.named_parameters()
    dtype = next(iter(params.values())).dtype
    if codebook is not None:
        codebook = codebook.astype(dtype)
    opt = AdamW(params)
    total = epochs * math.ceil(n_sentences / batch_size)
    sched = Schedule(lr, total, min(400, max(1, total // 10)))
    step, last = 0, 0.0
    for epoch in range(epochs):
        order = rng_for(seed, WARMUP, 1, epoch).permutation(n_sentences)
        noise_rng = rng_for(seed, WARMUP, 2, epoch)
        loss_sum, n_batches = 0.0, 0
        for i in range(0, n_sentences, batch_size):
            idx = [int(j) for j in order[i:i + batch_size]]
            batch = [targets[j] for j in idx]
            plens = []
            for j in idx:
                plan = row_plans[j]
                if plan is None:
                    plens.append(0)
                elif isinstance(plan, int):
                    plens.append(plan)
                else:
                    plens.append(len(plan))
            E = np.zeros((len(batch), max(plens, default=0), embed_dim), dtype=dtype)
            sigma = copy_noise * codebook_std
            n_codes = codebook.shape[0] if codebook is not None else 0
            for b, j in enumerate(idx):
                plan = row_plans[j]
                if isinstance(plan, np.ndarray) and len(plan):
                    L = len(plan)
                    rows = codebook[plan].copy()
                    blend = noise_rng.random(L) < mix_prob
                    w = noise_rng.uniform(0.0, mix_max, size=(L, 1))
                    other = codebook[noise_rng.integers(1, n_codes, size=L)]
                    rows = np.where(blend[:, None], (1.0 - w) * rows + w * other, rows)
                    swap = noise_rng.random(L) < sub_prob
                    if swap.any():
                        rows[swap] = codebook[noise_rng.integers(1, n_codes, size=int(swap.sum()))]
                    rows += noise_rng.normal(0.0, sigma, rows.shape)
                    lo_s, hi_s = scale_range
                    rows *= np.exp(noise_rng.uniform(np.log(lo_s), np.log(hi_s)))
                    E[b, :L] = rows
            loss, cache = decoder.nll_batch(E, plens, batch)
            decoder.zero_grad()
            decoder.nll_batch_backward(cache)
            grads = decoder.named_grads()
            clip_grads_(grads, 1.0)
            step += 1
            opt.step(grads, sched.lr_at(step), 0.0)
            loss_sum += loss
            n_batches += 1
        last = loss_sum / n_batches
    return last


def run_alignment_stage(
    manifest: DatasetManifest,
    stats: BlockStats,
    aug: AugmentationConfig,
    fe: FeatureExtractor,
    bridge: Bridge,
    decoder: DecoderLM,
    target_fn: Callable[[Trial], list[int]],
    cfg: StageConfig,
    out_dir: str | Path,
    hyp_fn: Callable[[Trial], str] | None = None,
    resume: bool = False,
    extras: dict[str, str] | None = None,
) -> Path:
    """Trains extractor (minus CTC head) at lr_main and bridge at bridge_lr;
    the decoder is frozen and verified bitwise unchanged at the end. With
    lr_main = 0 the extractor is frozen too and only the bridge trains."""
    cfg.validate()
    out_dir = Path(out_dir)
    train = [t for t in manifest.trials if t.split == "train"]
    eval_trials = [t for t in manifest.trials if t.split == "test"]
    targets = {t.trial_id: target_fn(t) for t in train}
    train_fe = cfg.lr_main > 0

    def fe_trainable() -> dict[str, np.ndarray]:
        if not train_fe:
            return {}
        return {f"fe.{n}": p for n, p in fe.named_parameters().items()
                if not n.startswith("ctc_head.")}

    trainable = fe_trainable()
    trainable.update({f"bridge.{n}": p for n, p in bridge.named_parameters().items()})
    opt = AdamW(trainable)
    steps_per_epoch = math.ceil(len(train) / cfg.batch_size)
    sched = Schedule(1.0, cfg.epochs * steps_per_epoch, cfg.warmup_steps)
    start_epoch, step = 0, 0
    metrics: list[dict] = []

    resumed = _resume_state(out_dir, "align", resume)
    if resumed is not None:
        arrays, state = resumed
        fe.load_state(split_namespace(arrays, "fe."))
        bridge.load_state(split_namespace(arrays, "bridge."))
        decoder.load_state(split_namespace(arrays, "decoder."))
        opt.load_state_arrays(arrays, state["opt_step"])
        start_epoch, step = state["next_epoch"], state["step"]
        metrics = state["metrics"]

    decoder_before = group_hashes(decoder.named_parameters())
    fe_before = group_hashes(fe.named_parameters()) if not train_fe else None

    def grad_sources() -> dict[str, np.ndarray]:
        grads: dict[str, np.ndarray] = {}
        if train_fe:
            grads.update({f"fe.{n}": g for n, g in fe.named_grads().items()
                          if not n.startswith("ctc_head.")})
        grads.update({f"bridge.{n}": g for n, g in bridge.named_grads().items()})
        return grads

    def lr_map(base: float) -> dict[str, float]:
        # the schedule runs at unit peak; scale per parameter family
        return {n: base * (cfg.bridge_lr if n.startswith("bridge.") else cfg.lr_main)
                for n in trainable}

    def snapshot(next_epoch: int) -> Path:
        params = {f"fe.{n}": p for n, p in fe.named_parameters().items()}
        params.update({f"bridge.{n}": p for n, p in bridge.named_parameters().items()})
        params.update({f"decoder.{n}": p for n, p in decoder.named_parameters().items()})
        state = {
            "stage": "align",
            "config": asdict(cfg),
            "next_epoch": next_epoch,
            "step": step,
            "opt_step": opt.step_count,
            "metrics": metrics,
            "complete": next_epoch >= cfg.epochs,
        }
        return save_training_checkpoint(out_dir, params, opt, state, extras)

    for epoch in range(start_epoch, cfg.epochs):
        mean_loss, step = _e2e_epoch(
            manifest, stats, aug, fe, bridge, decoder, train, targets, cfg,
            epoch, step, sched, opt, grad_sources, lr_map, backprop_fe=train_fe,
        )
        record = {"epoch": epoch, "loss": _metric_float(mean_loss)}
        if hyp_fn is not None and eval_trials:
            record["wer"] = _metric_float(_wer_on(eval_trials, hyp_fn))
        metrics.append(record)
        snapshot(epoch + 1)
    if start_epoch >= cfg.epochs:
        snapshot(start_epoch)

    decoder_after = group_hashes(decoder.named_parameters())
    if decoder_before != decoder_after:
        changed = [n for n in decoder_before if decoder_before[n] != decoder_after.get(n)]
        raise TrainingError(f"freeze contract violated: decoder groups changed: {changed}")
    if fe_before is not None:
        fe_after = group_hashes(fe.named_parameters())
        if fe_before != fe_after:
            changed = [n for n in fe_before if fe_before[n] != fe_after.get(n)]
            raise TrainingError(f"freeze contract violated: extractor groups changed: {changed}")
    return out_dir


def run_finetune_stage(
    manifest: DatasetManifest,
    stats: BlockStats,
    aug: AugmentationConfig,
    fe: FeatureExtractor,
    bridge: Bridge,
    decoder: DecoderLM,
    target_fn: Callable[[Trial], list[int]],
    cfg: StageConfig,
    out_dir: str | Path,
    hyp_fn: Callable[[Trial], str] | None = None,
    resume: bool = False,
    extras: dict[str, str] | None = None,
) -> Path:
    """Trains decoder (full or LoRA-only) at lr_main and bridge at bridge_lr;
    the extractor is frozen and verified bitwise unchanged at the end."""
    cfg.validate()
    out_dir = Path(out_dir)
    train = [t for t in manifest.trials if t.split == "train"]
    eval_trials = [t for t in manifest.trials if t.split == "test"]
    targets = {t.trial_id: target_fn(t) for t in train}

    lora_names: list[str] = []
    if cfg.lora_rank > 0:
        lora_names = decoder.attach_lora(cfg.lora_rank, rng_for(cfg.seed, INIT, 7))

    def decoder_trainable() -> dict[str, np.ndarray]:
        all_params = decoder.named_parameters()
        if cfg.lora_rank > 0:
            return {n: all_params[n] for n in lora_names}
        return all_params

    trainable = {f"decoder.{n}": p for n, p in decoder_trainable().items()}
    trainable.update({f"bridge.{n}": p for n, p in bridge.named_parameters().items()})
    opt = AdamW(trainable)
    steps_per_epoch = math.ceil(len(train) / cfg.batch_size)
    sched = Schedule(1.0, cfg.epochs * steps_per_epoch, cfg.warmup_steps)
    start_epoch, step = 0, 0
    metrics: list[dict] = []

    resumed = _resume_state(out_dir, "finetune", resume)
    if resumed is not None:
        arrays, state = resumed
        fe.load_state(split_namespace(arrays, "fe."))
        bridge.load_state(split_namespace(arrays, "bridge."))
        decoder.load_state(split_namespace(arrays, "decoder."))
        opt.load_state_arrays(arrays, state["opt_step"])
        start_epoch, step = state["next_epoch"], state["step"]
        metrics = state["metrics"]

    fe_before = group_hashes(fe.named_parameters())

    def grad_sources() -> dict[str, np.ndarray]:
        dgrads = decoder.named_grads()
        grads = {f"decoder.{n}": dgrads[n] for n in
                 ([*lora_names] if cfg.lora_rank > 0 else dgrads)}
        grads.update({f"bridge.{n}": g for n, g in bridge.named_grads().items()})
        return grads

    def lr_map(base: float) -> dict[str, float]:
        # the schedule runs at unit peak; scale per parameter family
        out = {}
        for n in trainable:
            out[n] = base * (cfg.bridge_lr if n.startswith("bridge.") else cfg.lr_main)
        return out

    def snapshot(next_epoch: int) -> Path:
        params = {f"fe.{n}": p for n, p in fe.named_parameters().items()}
        params.update({f"bridge.{n}": p for n, p in bridge.named_parameters().items()})
        params.update({f"decoder.{n}": p for n, p in decoder.named_parameters().items()})
        state = {
            "stage": "finetune",
            "config": asdict(cfg),
            "next_epoch": next_epoch,
            "step": step,
            "opt_step": opt.step_count,
            "metrics": metrics,
            "complete": next_epoch >= cfg.epochs,
        }
        return save_training_checkpoint(out_dir, params, opt, state, extras)

    for epoch in range(start_epoch, cfg.epochs):
        mean_loss, step = _e2e_epoch(
            manifest, stats, aug, fe, bridge, decoder, train, targets, cfg,
            epoch, step, sched, opt, grad_sources, lr_map, backprop_fe=False,
        )
        record = {"epoch": epoch, "loss": _metric_float(mean_loss)}
        if hyp_fn is not None and eval_trials:
            record["wer"] = _metric_float(_wer_on(eval_trials, hyp_fn))
        metrics.append(record)
        snapshot(epoch + 1)
    if start_epoch >= cfg.epochs:
        snapshot(start_epoch)

    fe_after = group_hashes(fe.named_parameters())
    if fe_before != fe_after:
        changed = [n for n in fe_before if fe_before[n] != fe_after.get(n)]
        raise TrainingError(f"freeze contract violated: extractor groups changed: {changed}")
    return out_dir


# ---- finite-difference verification ----

def grad_check(
    params: dict[str, np.ndarray],
    compute: Callable[[], tuple[float, dict[str, np.ndarray]]],
    h: float = 1e-5,
    max_coords: int = 50,
    seed: int = 0,
) -> float:
    """Central finite differences vs analytic gradients on a coordinate
    subsample (up to max_coords per group). Returns the max relative error,
    with |a - n| measured against max(|a|, |n|, 1e-5)."""
    rng = rng_for(seed, 99)
    _, analytic = compute()
    analytic = {n: np.array(g, dtype=np.float64, copy=True) for n, g in analytic.items()}
    worst = 0.0
    for name, p in params.items():
        flat = p.reshape(-1)
        n_coords = min(max_coords, flat.size)
        coords = rng.choice(flat.size, size=n_coords, replace=False)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            lp, _ = compute()
            flat[c] = orig - h
            lm, _ = compute()
            flat[c] = orig
            numeric = (lp - lm) / (2.0 * h)
            a = float(analytic[name].reshape(-1)[c])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-5)
            worst = max(worst, rel)
    return worst
