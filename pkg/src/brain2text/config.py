"""Run configuration: one TOML document drives every command.

The document is strict: any key or section not in the schema is rejected, so
typos fail loudly instead of silently falling back to defaults. The verbatim
text is kept so each stage checkpoint can carry an exact snapshot of the
configuration it was produced under.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .decoder_lm import DecoderConfig, GenerationConfig
from .feature_extractor import FeatureExtractorConfig
from .preprocessing import AugmentationConfig
from .synthgen import SynthConfig
from .system import PRECISIONS, decoder_config_for
from .textproc import Lexicon
from .training import STAGES, StageConfig

__all__ = ["ConfigError", "DecoderDims", "RunConfig", "parse_config", "load_config"]


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DecoderDims:
    """Decoder shape; the vocabulary half of DecoderConfig comes from the
    text model, which does not exist until the alignment stage."""

    embed_dim: int = 64
    num_layers: int = 2
    num_heads: int = 4
    ff_dim: int = 256
    max_context: int = 256

    def config_for(self, n_units: int) -> DecoderConfig:
        return decoder_config_for(
            n_units,
            embed_dim=self.embed_dim,
            num_layers=self.num_layers,
            num_heads=self.num_heads,
            ff_dim=self.ff_dim,
            max_context=self.max_context,
        )


_TOP_KEYS = {"seed", "precision"}
_SECTION_KEYS = {
    "dataset": {"path"},
    "preprocessing": {"white_noise_std", "offset_noise_std", "smooth_std"},
    "textproc": {"ctc_mode", "decoder_bpe_vocab", "ctc_bpe_vocab", "lexicon_path"},
    "feature_extractor": {"num_layers", "hidden", "bidirectional", "stack_k",
                          "stack_s", "session_fallback"},
    "decoder": {"embed_dim", "num_layers", "num_heads", "ff_dim", "max_context",
                "lm_warmup_epochs", "lm_warmup_sentences", "lm_warmup_lr",
                "lm_warmup_batch"},
    "generation": {"mode", "beam_size", "max_new_tokens", "length_penalty"},
    "synth": {"vocab", "sentence_len", "bins_per_phoneme", "channels", "sessions",
              "gain_range", "offset_std", "noise_std_vocal", "noise_std_silent",
              "train_vocal", "train_silent", "test_vocal", "test_silent", "seed"},
}
_STAGE_KEYS = {"epochs", "batch_size", "lr_main", "lr_bridge", "weight_decay",
               "warmup_steps", "grad_clip", "lora_rank"}


def _check_keys(section: str, table: dict, allowed: set[str]) -> None:
    for key in table:
        if key not in allowed:
            raise ConfigError(f"unknown config key: {section}.{key}")


def _pair(section: str, key: str, value, cast) -> tuple:
    if not isinstance(value, list) or len(value) != 2:
        raise ConfigError(f"{section}.{key} must be a two-element array")
    return (cast(value[0]), cast(value[1]))


@dataclass
class RunConfig:
    seed: int = 0
    precision: str = "f64"
    dataset_path: str | None = None
    aug: AugmentationConfig = field(default_factory=AugmentationConfig)
    ctc_mode: str = "phoneme"
    decoder_bpe_vocab: int = 256
    ctc_bpe_vocab: int = 256
    lexicon_path: str | None = None
    extractor: FeatureExtractorConfig = field(default_factory=FeatureExtractorConfig)
    session_fallback: bool = False
    decoder_dims: DecoderDims = field(default_factory=DecoderDims)
    lm_warmup_epochs: int = 0
    lm_warmup_sentences: int = 2000
    lm_warmup_lr: float = 1e-3
    lm_warmup_batch: int = 32
    generation: GenerationConfig = field(default_factory=GenerationConfig)
    stage_overrides: dict = field(default_factory=dict)
    synth: SynthConfig = field(default_factory=SynthConfig)
    text: str = ""
    source: Path | None = None

    def validate(self) -> None:
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision must be one of {sorted(PRECISIONS)}")
        if self.ctc_mode not in ("phoneme", "bpe"):
            raise ConfigError("textproc.ctc_mode must be 'phoneme' or 'bpe'")
        if self.decoder_bpe_vocab < 2:
            raise ConfigError("textproc.decoder_bpe_vocab must be >= 2")
        if self.ctc_bpe_vocab < 2:
            raise ConfigError("textproc.ctc_bpe_vocab must be >= 2")
        self.aug.validate()
        self.extractor.validate()
        self.generation.validate()
        for stage in self.stage_overrides:
            if stage not in STAGES:
                raise ConfigError(f"unknown config section: stages.{stage}")
        # shape-check each stage table now rather than at run time
        for stage in STAGES:
            self.stage_config(stage)

    def stage_config(self, stage: str) -> StageConfig:
        overrides = dict(self.stage_overrides.get(stage, {}))
        overrides.setdefault("seed", self.seed)
        return StageConfig.defaults(stage, **overrides)

    def decoder_config(self, n_units: int) -> DecoderConfig:
        return self.decoder_dims.config_for(n_units)

    def lexicon(self) -> Lexicon:
        if self.lexicon_path:
            base = self.source.parent if self.source is not None else Path(".")
            return Lexicon.from_file((base / self.lexicon_path).resolve())
        return Lexicon.bundled()

    def resolve_dataset(self) -> Path:
        if not self.dataset_path:
            raise ConfigError("dataset.path is not set in the config")
        p = Path(self.dataset_path)
        if not p.is_absolute() and self.source is not None:
            p = (self.source.parent / p).resolve()
        return p


def parse_config(text: str, source: Path | None = None) -> RunConfig:
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"invalid TOML: {e}") from None

    cfg = RunConfig(text=text, source=source)

    for key, value in doc.items():
        if isinstance(value, dict):
            continue
        if key not in _TOP_KEYS:
            raise ConfigError(f"unknown config key: {key}")
    cfg.seed = int(doc.get("seed", cfg.seed))
    cfg.precision = str(doc.get("precision", cfg.precision))

    for section, value in doc.items():
        if not isinstance(value, dict):
            continue
        if section == "stages":
            for stage, table in value.items():
                if stage not in STAGES:
                    raise ConfigError(f"unknown config section: stages.{stage}")
                if not isinstance(table, dict):
                    raise ConfigError(f"stages.{stage} must be a table")
                _check_keys(f"stages.{stage}", table, _STAGE_KEYS)
                cfg.stage_overrides[stage] = dict(table)
            continue
        if section not in _SECTION_KEYS:
            raise ConfigError(f"unknown config section: {section}")
        _check_keys(section, value, _SECTION_KEYS[section])

    ds = doc.get("dataset", {})
    if "path" in ds:
        cfg.dataset_path = str(ds["path"])

    pp = doc.get("preprocessing", {})
    cfg.aug = AugmentationConfig(
        white_noise_std=float(pp.get("white_noise_std", cfg.aug.white_noise_std)),
        offset_noise_std=float(pp.get("offset_noise_std", cfg.aug.offset_noise_std)),
        smooth_std=float(pp.get("smooth_std", cfg.aug.smooth_std)),
    )

    tp = doc.get("textproc", {})
    cfg.ctc_mode = str(tp.get("ctc_mode", cfg.ctc_mode))
    cfg.decoder_bpe_vocab = int(tp.get("decoder_bpe_vocab", cfg.decoder_bpe_vocab))
    cfg.ctc_bpe_vocab = int(tp.get("ctc_bpe_vocab", cfg.ctc_bpe_vocab))
    lex = str(tp.get("lexicon_path", "") or "")
    cfg.lexicon_path = lex or None

    fx = doc.get("feature_extractor", {})
    cfg.extractor = FeatureExtractorConfig(
        num_layers=int(fx.get("num_layers", cfg.extractor.num_layers)),
        hidden=int(fx.get("hidden", cfg.extractor.hidden)),
        bidirectional=bool(fx.get("bidirectional", cfg.extractor.bidirectional)),
        stack_k=int(fx.get("stack_k", cfg.extractor.stack_k)),
        stack_s=int(fx.get("stack_s", cfg.extractor.stack_s)),
    )
    cfg.session_fallback = bool(fx.get("session_fallback", False))

    dc = doc.get("decoder", {})
    cfg.decoder_dims = DecoderDims(
        embed_dim=int(dc.get("embed_dim", 64)),
        num_layers=int(dc.get("num_layers", 2)),
        num_heads=int(dc.get("num_heads", 4)),
        ff_dim=int(dc.get("ff_dim", 256)),
        max_context=int(dc.get("max_context", 256)),
    )
    cfg.lm_warmup_epochs = int(dc.get("lm_warmup_epochs", 0))
    cfg.lm_warmup_sentences = int(dc.get("lm_warmup_sentences", 2000))
    cfg.lm_warmup_lr = float(dc.get("lm_warmup_lr", 1e-3))
    cfg.lm_warmup_batch = int(dc.get("lm_warmup_batch", 32))

    gen = doc.get("generation", {})
    cfg.generation = GenerationConfig(
        mode=str(gen.get("mode", "greedy")),
        beam_size=int(gen.get("beam_size", 5)),
        max_new_tokens=int(gen.get("max_new_tokens", 32)),
        length_penalty=float(gen.get("length_penalty", 0.0)),
    )

    sy = doc.get("synth", {})
    defaults = SynthConfig()
    cfg.synth = SynthConfig(
        vocab=tuple(str(w) for w in sy["vocab"]) if "vocab" in sy else defaults.vocab,
        sentence_len=_pair("synth", "sentence_len", sy["sentence_len"], int)
        if "sentence_len" in sy else defaults.sentence_len,
        bins_per_phoneme=_pair("synth", "bins_per_phoneme", sy["bins_per_phoneme"], int)
        if "bins_per_phoneme" in sy else defaults.bins_per_phoneme,
        channels=int(sy.get("channels", defaults.channels)),
        sessions=int(sy.get("sessions", defaults.sessions)),
        gain_range=_pair("synth", "gain_range", sy["gain_range"], float)
        if "gain_range" in sy else defaults.gain_range,
        offset_std=float(sy.get("offset_std", defaults.offset_std)),
        noise_std_vocal=float(sy.get("noise_std_vocal", defaults.noise_std_vocal)),
        noise_std_silent=float(sy.get("noise_std_silent", defaults.noise_std_silent)),
        train_vocal=int(sy.get("train_vocal", defaults.train_vocal)),
        train_silent=int(sy.get("train_silent", defaults.train_silent)),
        test_vocal=int(sy.get("test_vocal", defaults.test_vocal)),
        test_silent=int(sy.get("test_silent", defaults.test_silent)),
        seed=int(sy.get("seed", cfg.seed)),
    )

    cfg.validate()
    return cfg


def load_config(path: str | Path, seed: int | None = None,
                precision: str | None = None) -> RunConfig:
    """Parse a TOML file; `seed`/`precision` are command-line overrides."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    cfg = parse_config(path.read_text(encoding="utf-8"), source=path.resolve())
    if seed is not None:
        cfg.seed = int(seed)
        for stage in list(cfg.stage_overrides):
            cfg.stage_overrides[stage].pop("seed", None)
        cfg.synth = SynthConfig(**{**_synth_asdict(cfg.synth), "seed": int(seed)})
    if precision is not None:
        cfg.precision = precision
    cfg.validate()
    return cfg


def _synth_asdict(s: SynthConfig) -> dict:
    return {
        "vocab": s.vocab, "sentence_len": s.sentence_len,
        "bins_per_phoneme": s.bins_per_phoneme, "channels": s.channels,
        "sessions": s.sessions, "gain_range": s.gain_range,
        "offset_std": s.offset_std, "noise_std_vocal": s.noise_std_vocal,
        "noise_std_silent": s.noise_std_silent, "train_vocal": s.train_vocal,
        "train_silent": s.train_silent, "test_vocal": s.test_vocal,
        "test_silent": s.test_silent, "seed": s.seed,
    }
