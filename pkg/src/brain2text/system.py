"""Assembly of the full decoding stack.

A trained system is an extractor, a bridge, a decoder, the text models that
define their label spaces, and the preprocessing statistics they were trained
under. This module gives that bundle a serializable description (SystemSpec),
deterministic constructors, and a checkpoint round trip, so `decode`/`eval`
can rebuild bit-identical models from a checkpoint directory alone.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .bridge import Bridge
from .checkpoint import read_extra
from .dataset import DatasetManifest, Trial
from .decoder_lm import DecoderConfig, DecoderLM, GenerationConfig, GenerationResult
from .evaluation import EvalReport, evaluate
from .feature_extractor import FeatureExtractor, FeatureExtractorConfig
from .preprocessing import AugmentationConfig, BlockStats, eval_view
from .seeding import INIT, rng_for
from .textproc import (
    BpeModel,
    Lexicon,
    PhonemeInventory,
    build_ctc_target,
    default_inventory,
    normalize_for_eval,
    train_bpe,
)
from .training import load_training_checkpoint, split_namespace

__all__ = [
    "AssemblyError",
    "PRECISIONS",
    "SystemSpec",
    "Pipeline",
    "dtype_for",
    "decoder_config_for",
    "build_models",
    "make_ctc_target_fn",
    "make_decoder_target_fn",
    "train_decoder_bpe",
    "train_ctc_bpe",
    "system_extras",
    "load_system",
    "SPEC_EXTRA",
    "STATS_EXTRA",
    "AUG_EXTRA",
    "BPE_EXTRA",
    "CTC_BPE_EXTRA",
    "CONFIG_EXTRA",
]


class AssemblyError(ValueError):
    pass


PRECISIONS = {"f32": np.float32, "f64": np.float64}

# extras carried inside every stage checkpoint
SPEC_EXTRA = "system.json"
STATS_EXTRA = "block_stats.json"
AUG_EXTRA = "augmentation.json"
BPE_EXTRA = "decoder_bpe.json"
CTC_BPE_EXTRA = "ctc_bpe.json"
CONFIG_EXTRA = "config.toml"


def dtype_for(precision: str):
    if precision not in PRECISIONS:
        raise AssemblyError(f"unknown precision: {precision!r} (expected one of {sorted(PRECISIONS)})")
    return PRECISIONS[precision]


@dataclass
class SystemSpec:
    """Everything needed to rebuild the models with matching shapes.

    `decoder` is None for checkpoints written before the decoder exists
    (CTC pretraining); the later stages fill it in.
    """

    channels: int
    sessions: list[str]
    alphabet_size: int
    ctc_mode: str
    precision: str
    seed: int
    extractor: FeatureExtractorConfig
    decoder: DecoderConfig | None = None
    session_fallback: bool = False

    def validate(self) -> None:
        if self.channels < 1:
            raise AssemblyError("channels must be >= 1")
        if not self.sessions:
            raise AssemblyError("at least one session is required")
        if self.alphabet_size < 1:
            raise AssemblyError("alphabet_size must be >= 1")
        if self.ctc_mode not in ("phoneme", "bpe"):
            raise AssemblyError(f"unknown CTC target mode: {self.ctc_mode!r}")
        dtype_for(self.precision)
        self.extractor.validate()
        if self.decoder is not None:
            self.decoder.validate()

    def to_json(self) -> str:
        payload = {
            "channels": self.channels,
            "sessions": list(self.sessions),
            "alphabet_size": self.alphabet_size,
            "ctc_mode": self.ctc_mode,
            "precision": self.precision,
            "seed": self.seed,
            "extractor": asdict(self.extractor),
            "decoder": None if self.decoder is None else self.decoder.to_dict(),
            "session_fallback": self.session_fallback,
        }
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "SystemSpec":
        d = json.loads(text)
        spec = cls(
            channels=int(d["channels"]),
            sessions=[str(s) for s in d["sessions"]],
            alphabet_size=int(d["alphabet_size"]),
            ctc_mode=str(d["ctc_mode"]),
            precision=str(d["precision"]),
            seed=int(d["seed"]),
            extractor=FeatureExtractorConfig(**d["extractor"]),
            decoder=None if d["decoder"] is None else DecoderConfig.from_dict(d["decoder"]),
            session_fallback=bool(d.get("session_fallback", False)),
        )
        spec.validate()
        return spec


def decoder_config_for(
    n_units: int,
    embed_dim: int = 64,
    num_layers: int = 2,
    num_heads: int = 4,
    ff_dim: int = 256,
    max_context: int = 256,
) -> DecoderConfig:
    """Text units occupy ids [0, n_units); bos/eos/pad are appended after."""
    return DecoderConfig(
        vocab_size=n_units + 3,
        embed_dim=embed_dim,
        num_layers=num_layers,
        num_heads=num_heads,
        ff_dim=ff_dim,
        max_context=max_context,
        bos_id=n_units,
        eos_id=n_units + 1,
        pad_id=n_units + 2,
    )


def build_models(spec: SystemSpec) -> tuple[FeatureExtractor, Bridge | None, DecoderLM | None]:
    """Deterministic constructors: one child seed stream per component."""
    spec.validate()
    dtype = dtype_for(spec.precision)
    fe = FeatureExtractor(
        spec.extractor, spec.channels, spec.sessions, spec.alphabet_size,
        rng_for(spec.seed, INIT, 1), dtype, session_fallback=spec.session_fallback,
    )
    if spec.decoder is None:
        return fe, None, None
    bridge = Bridge(spec.extractor.feature_dim, spec.decoder.embed_dim,
                    rng_for(spec.seed, INIT, 2), dtype)
    decoder = DecoderLM(spec.decoder, rng_for(spec.seed, INIT, 3), dtype)
    return fe, bridge, decoder


# ---------------------------------------------------------------------------
# Target builders
# ---------------------------------------------------------------------------

def make_ctc_target_fn(
    mode: str,
    inventory: PhonemeInventory | None = None,
    lexicon: Lexicon | None = None,
    bpe: BpeModel | None = None,
) -> tuple[Callable[[Trial], list[int]], int]:
    """Returns (target_fn, alphabet size without the blank)."""
    if mode == "phoneme":
        inv = inventory if inventory is not None else default_inventory()
        lex = lexicon if lexicon is not None else Lexicon.bundled()

        def fn(trial: Trial) -> list[int]:
            return build_ctc_target(trial, "phoneme", inventory=inv, lexicon=lex)

        return fn, inv.size
    if mode == "bpe":
        if bpe is None:
            raise AssemblyError("bpe CTC mode needs a trained BPE model")

        def fn(trial: Trial) -> list[int]:
            return build_ctc_target(trial, "bpe", bpe=bpe)

        return fn, bpe.vocab_size
    raise AssemblyError(f"unknown CTC target mode: {mode!r}")


def make_decoder_target_fn(bpe: BpeModel, eos_id: int) -> Callable[[Trial], list[int]]:
    """Decoder targets are BPE ids of the raw transcription plus the end marker."""

    def fn(trial: Trial) -> list[int]:
        return bpe.encode(trial.transcription) + [eos_id]

    return fn


def train_decoder_bpe(manifest: DatasetManifest, vocab_size: int) -> BpeModel:
    corpus = [t.transcription for t in manifest.trials if t.split == "train"]
    if not corpus:
        raise AssemblyError("no training transcriptions to fit a BPE model on")
    return train_bpe(corpus, vocab_size)


def train_ctc_bpe(manifest: DatasetManifest, vocab_size: int) -> BpeModel:
    corpus = [
        " ".join(normalize_for_eval(t.transcription))
        for t in manifest.trials if t.split == "train"
    ]
    corpus = [c for c in corpus if c]
    if not corpus:
        raise AssemblyError("no training transcriptions to fit a BPE model on")
    return train_bpe(corpus, vocab_size)


# ---------------------------------------------------------------------------
# The assembled system
# ---------------------------------------------------------------------------

@dataclass
class Pipeline:
    """Signal in, sentence out."""

    spec: SystemSpec
    stats: BlockStats
    aug: AugmentationConfig
    fe: FeatureExtractor
    bridge: Bridge
    decoder: DecoderLM
    bpe: BpeModel
    gen: GenerationConfig = field(default_factory=GenerationConfig)
    ctc_bpe: BpeModel | None = None
    manifest: DatasetManifest | None = None

    def decode_view(self, x: np.ndarray, session_id: str) -> tuple[str, GenerationResult]:
        """Decode an already-preprocessed signal view (T, channels)."""
        z = self.fe.forward(x, session_id)
        E, _ = self.bridge.project(z)
        result = self.decoder.generate(E, self.gen)
        n_units = self.bpe.vocab_size
        text = self.bpe.decode([t for t in result.ids if 0 <= t < n_units])
        return text, result

    def decode_trial(self, trial: Trial) -> tuple[str, GenerationResult]:
        if self.manifest is None:
            raise AssemblyError("pipeline has no dataset attached")
        x = eval_view(self.manifest, trial, self.stats, self.aug)
        return self.decode_view(x, trial.session_id)

    def hypothesis(self, trial: Trial) -> str:
        return self.decode_trial(trial)[0]

    def evaluate(self, trials: Sequence[Trial] | None = None) -> EvalReport:
        if self.manifest is None:
            raise AssemblyError("pipeline has no dataset attached")
        return evaluate(self.hypothesis, self.manifest, trials)

    def decoder_target_fn(self) -> Callable[[Trial], list[int]]:
        return make_decoder_target_fn(self.bpe, self.decoder.config.eos_id)


def system_extras(
    spec: SystemSpec,
    stats: BlockStats,
    aug: AugmentationConfig,
    bpe: BpeModel | None = None,
    ctc_bpe: BpeModel | None = None,
    config_text: str | None = None,
) -> dict[str, str]:
    """The sidecar files every stage checkpoint carries."""
    extras = {
        SPEC_EXTRA: spec.to_json(),
        STATS_EXTRA: stats.to_json(),
        AUG_EXTRA: json.dumps(asdict(aug), sort_keys=True),
    }
    if bpe is not None:
        extras[BPE_EXTRA] = bpe.to_json()
    if ctc_bpe is not None:
        extras[CTC_BPE_EXTRA] = ctc_bpe.to_json()
    if config_text is not None:
        extras[CONFIG_EXTRA] = config_text
    return extras


def _extra_text(ckpt_dir: Path, name: str) -> str:
    return read_extra(ckpt_dir, name).decode("utf-8")


def load_system(
    ckpt_dir: str | Path,
    manifest: DatasetManifest | None = None,
    gen: GenerationConfig | None = None,
) -> Pipeline:
    """Rebuild the full pipeline from an align or finetune checkpoint.

    Adapter weights saved unmerged are re-attached before loading, so the
    restored decoder is bitwise identical to the one that was saved.
    """
    ckpt_dir = Path(ckpt_dir)
    arrays, state = load_training_checkpoint(ckpt_dir)
    spec = SystemSpec.from_json(_extra_text(ckpt_dir, SPEC_EXTRA))
    if spec.decoder is None:
        raise AssemblyError(
            f"checkpoint at {ckpt_dir} has no decoder (stage {state.get('stage')!r}); "
            "decode needs an align or finetune checkpoint"
        )
    stats = BlockStats.from_json(_extra_text(ckpt_dir, STATS_EXTRA))
    aug = AugmentationConfig(**json.loads(_extra_text(ckpt_dir, AUG_EXTRA)))
    bpe = BpeModel.from_json(_extra_text(ckpt_dir, BPE_EXTRA))
    ctc_bpe = None
    if (ckpt_dir / CTC_BPE_EXTRA).exists():
        ctc_bpe = BpeModel.from_json(_extra_text(ckpt_dir, CTC_BPE_EXTRA))

    fe, bridge, decoder = build_models(spec)
    lora_rank = int(state.get("config", {}).get("lora_rank", 0) or 0)
    if state.get("stage") == "finetune" and lora_rank > 0:
        # values are overwritten by load_state below; the rng only shapes them
        decoder.attach_lora(lora_rank, rng_for(spec.seed, INIT, 7))
    fe.load_state(split_namespace(arrays, "fe."))
    bridge.load_state(split_namespace(arrays, "bridge."))
    decoder.load_state(split_namespace(arrays, "decoder."))
    return Pipeline(
        spec=spec, stats=stats, aug=aug, fe=fe, bridge=bridge, decoder=decoder,
        bpe=bpe, gen=gen if gen is not None else GenerationConfig(),
        ctc_bpe=ctc_bpe, manifest=manifest,
    )
