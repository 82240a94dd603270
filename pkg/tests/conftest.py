"""Shared fixtures: a small deterministic dataset and trained text models."""

import numpy as np
import pytest

from brain2text import (
    BpeModel,
    Lexicon,
    SynthConfig,
    default_inventory,
    generate_dataset,
    load_manifest,
    train_bpe,
)


MICRO_SYNTH = SynthConfig(
    vocab=("red", "blue", "green", "door", "open", "stop", "go", "yes"),
    sentence_len=(2, 4),
    channels=6,
    sessions=2,
    train_vocal=16,
    train_silent=4,
    test_vocal=4,
    test_silent=2,
    seed=7,
)


@pytest.fixture(scope="session")
def micro_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("micro_data")
    manifest_path = generate_dataset(MICRO_SYNTH, out)
    return load_manifest(manifest_path)


@pytest.fixture(scope="session")
def lexicon():
    return Lexicon.bundled()


@pytest.fixture(scope="session")
def inventory():
    return default_inventory()


@pytest.fixture(scope="session")
def tiny_bpe():
    corpus = ["the cat sat", "the dog ran", "a cat ran fast", "go go go"]
    return train_bpe(corpus, vocab_size=40)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
