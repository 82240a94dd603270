"""Synthetic multichannel recordings with known phoneme structure.

Each phoneme (and the word separator) gets a fixed random channel template at
seed time. A trial renders its phoneme sequence as template repeats with a
jittered duration, then applies per-session gain and offset drift plus white
observation noise. "Silent" trials reuse the same code with a higher noise
level, standing in for the harder condition. The construction makes the
signals exactly separable at zero noise, which pins down what a correct
pipeline must recover.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import Trial, write_dataset
from .seeding import SYNTH, rng_for
from .textproc import Lexicon, default_inventory, grapheme_to_phoneme

DEFAULT_VOCAB = (
    "about", "after", "animal", "answer", "because", "before", "better", "bird",
    "black", "blue", "book", "brown", "cat", "child", "city", "clean", "cold",
    "day", "dog", "door", "drink", "eight", "family", "father", "fire", "fox",
    "friend", "green", "happy", "house", "jump", "letter", "light", "little",
    "morning", "mother", "night", "number", "open", "paper", "people",
    "picture", "question", "quick", "river", "school", "table", "water",
    "window", "yellow",
)


class SynthError(ValueError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    vocab: tuple[str, ...] = DEFAULT_VOCAB
    sentence_len: tuple[int, int] = (3, 7)
    bins_per_phoneme: tuple[int, int] = (3, 6)
    channels: int = 32
    sessions: int = 3
    gain_range: tuple[float, float] = (0.8, 1.2)
    offset_std: float = 0.1
    noise_std_vocal: float = 0.3
    noise_std_silent: float = 0.6
    train_vocal: int = 320
    train_silent: int = 80
    test_vocal: int = 40
    test_silent: int = 10
    seed: int = 0

    def validate(self, lexicon: Lexicon | None = None) -> None:
        if not self.vocab:
            raise SynthError("vocab is empty")
        if len(set(self.vocab)) != len(self.vocab):
            raise SynthError("vocab has duplicate words")
        lo, hi = self.sentence_len
        if not (1 <= lo <= hi):
            raise SynthError("bad sentence_len range")
        blo, bhi = self.bins_per_phoneme
        if not (1 <= blo <= bhi):
            raise SynthError("bad bins_per_phoneme range")
        if self.channels < 1 or self.sessions < 1:
            raise SynthError("channels and sessions must be >= 1")
        if min(self.train_vocal, self.train_silent, self.test_vocal, self.test_silent) < 0:
            raise SynthError("trial counts must be >= 0")
        if self.train_vocal + self.train_silent < self.sessions:
            raise SynthError("need at least one train trial per session")
        lex = lexicon or Lexicon.bundled()
        for w in self.vocab:
            grapheme_to_phoneme(w, lex)


@dataclass
class SynthWorld:
    """Everything drawn once at seed time: templates and session drift."""

    templates: dict[str, np.ndarray]
    gains: np.ndarray
    offsets: np.ndarray
    lexicon: Lexicon = field(default_factory=Lexicon.bundled)


def build_world(config: SynthConfig, lexicon: Lexicon | None = None) -> SynthWorld:
    rng = rng_for(config.seed, SYNTH, 0)
    inventory = default_inventory()
    templates = {
        sym: rng.normal(0.0, 1.0, size=config.channels)
        for sym in inventory.symbols
    }
    lo, hi = config.gain_range
    gains = rng.uniform(lo, hi, size=config.sessions)
    offsets = rng.normal(0.0, config.offset_std, size=(config.sessions, config.channels))
    return SynthWorld(templates=templates, gains=gains, offsets=offsets,
                      lexicon=lexicon or Lexicon.bundled())


def render_signal(
    sentence: str,
    config: SynthConfig,
    world: SynthWorld,
    rng: np.random.Generator,
    session_index: int,
    noise_std: float,
) -> np.ndarray:
    """Template concatenation with jittered durations, drift, and noise.

    Draw order per trial is fixed: one bin count per phoneme, then the noise
    matrix, so a given generator state renders one exact signal.
    """
    words = sentence.split()
    if not words:
        raise SynthError("empty sentence")
    for w in words:
        if w not in config.vocab:
            raise SynthError(f"word not in vocab: {w!r}")
    phonemes = grapheme_to_phoneme(sentence, world.lexicon)
    lo, hi = config.bins_per_phoneme
    rows = []
    for sym in phonemes:
        bins = int(rng.integers(lo, hi + 1))
        rows.append(np.tile(world.templates[sym], (bins, 1)))
    clean = np.concatenate(rows, axis=0)
    out = clean * world.gains[session_index] + world.offsets[session_index]
    if noise_std > 0:
        out = out + rng.normal(0.0, noise_std, size=clean.shape)
    return out.astype(np.float32)


def render_trial(
    sentence: str,
    config: SynthConfig,
    rng: np.random.Generator,
    world: SynthWorld | None = None,
    trial_id: str = "t0",
    session_index: int = 0,
    split: str = "train",
    condition: str = "vocal",
) -> tuple[Trial, np.ndarray]:
    world = world or build_world(config)
    noise = config.noise_std_vocal if condition == "vocal" else config.noise_std_silent
    signal = render_signal(sentence, config, world, rng, session_index, noise)
    trial = Trial(
        trial_id=trial_id,
        session_id=f"s{session_index:02d}",
        block_id=f"s{session_index:02d}",
        split=split,
        condition=condition,
        transcription=sentence,
        signal_path=f"{trial_id}.f32",
        T=signal.shape[0],
        F=signal.shape[1],
    )
    return trial, signal


def generate_dataset(config: SynthConfig, out_dir: str | Path) -> Path:
    """Write a complete dataset directory; byte-identical under a fixed seed.

    Sessions are assigned round-robin over the generation order, so every
    session receives train trials of both conditions. Block equals session.
    """
    config.validate()
    world = build_world(config)
    sentence_rng = rng_for(config.seed, SYNTH, 1)
    groups = [
        ("train", "vocal", config.train_vocal),
        ("train", "silent", config.train_silent),
        ("test", "vocal", config.test_vocal),
        ("test", "silent", config.test_silent),
    ]
    trials: list[Trial] = []
    signals: list[np.ndarray] = []
    idx = 0
    lo, hi = config.sentence_len
    for split, condition, count in groups:
        for _ in range(count):
            n_words = int(sentence_rng.integers(lo, hi + 1))
            words = [config.vocab[int(j)] for j in
                     sentence_rng.integers(0, len(config.vocab), size=n_words)]
            sentence = " ".join(words)
            trial_rng = rng_for(config.seed, SYNTH, 2, idx)
            trial, signal = render_trial(
                sentence, config, trial_rng, world,
                trial_id=f"t{idx:05d}",
                session_index=idx % config.sessions,
                split=split,
                condition=condition,
            )
            trials.append(trial)
            signals.append(signal)
            idx += 1
    return write_dataset(out_dir, trials, signals, channel_count=config.channels)
