"""Normalization, grapheme-to-phoneme, BPE, and CTC target construction."""

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from brain2text import (
    BpeModel,
    default_inventory,
    grapheme_to_phoneme,
    normalize_for_eval,
    train_bpe,
)
from brain2text.textproc import (
    WORD_SEP,
    TextProcError,
    build_ctc_target,
    letter_to_sound,
)


class FakeTrial:
    def __init__(self, text, trial_id="t0"):
        self.transcription = text
        self.trial_id = trial_id


# ---- normalization ----


def test_contractions_expand_before_punctuation_strips():
    assert normalize_for_eval("I can't do it.") == ["i", "cannot", "do", "it"]


def test_possessive_apostrophes_are_dropped():
    assert normalize_for_eval("The dog's bowl") == ["the", "dogs", "bowl"]


def test_punctuation_and_case_are_removed():
    assert normalize_for_eval("Hello, WORLD!  How -- are you?") == [
        "hello", "world", "how", "are", "you",
    ]


def test_normalization_is_idempotent():
    words = normalize_for_eval("Don't stop; we'll win I'm sure.")
    again = normalize_for_eval(" ".join(words))
    assert words == again


def test_numbers_survive_normalization():
    assert normalize_for_eval("room 42") == ["room", "42"]


# ---- grapheme to phoneme ----


def test_lexicon_pronunciation_for_known_word(lexicon):
    assert grapheme_to_phoneme("cat", lexicon) == ["K", "AE", "T"]


def test_word_separator_between_words(lexicon):
    phones = grapheme_to_phoneme("cat cat", lexicon)
    assert phones == ["K", "AE", "T", WORD_SEP, "K", "AE", "T"]
    assert phones.count(WORD_SEP) == 1


def test_letter_to_sound_fallback_is_total_and_deterministic():
    assert letter_to_sound("zzyzx") == letter_to_sound("zzyzx")
    assert letter_to_sound("thing") == ("TH", "IH", "NG")
    assert letter_to_sound("") == ()


def test_inventory_is_arpabet_plus_separator():
    inv = default_inventory()
    assert len(inv.symbols) == 40
    assert inv.symbols[-1] == WORD_SEP
    assert inv.id_of(inv.symbols[0]) == 1  # 0 is the CTC blank


# ---- BPE ----


def test_first_merge_on_aaab_is_aa():
    model = train_bpe(["aaab"], vocab_size=4)
    assert model.merges[0] == ("a", "a")


def test_encode_prefers_leftmost_merge_application():
    model = train_bpe(["aaab", "aaac"], vocab_size=4)
    # one merge (a,a): "aaa" becomes [aa, a]
    units = model.encode_units("aaa")
    assert units == ["aa", "a"]


def test_decode_inverts_encode_on_training_corpus(tiny_bpe):
    for text in ["the cat sat", "go go go", "a cat ran fast"]:
        assert tiny_bpe.decode(tiny_bpe.encode(text)) == text


def test_unknown_symbol_is_rejected(tiny_bpe):
    with pytest.raises(TextProcError, match="not in BPE vocabulary"):
        tiny_bpe.encode("café")


def test_vocab_size_cap_is_respected():
    model = train_bpe(["abcabcabc"], vocab_size=5)
    assert model.vocab_size == 5


def test_save_load_round_trip_with_space_units(tmp_path):
    # merges that cross word boundaries produce units containing spaces
    model = train_bpe(["go on go on go on", "go on"], vocab_size=12)
    assert any(" " in u for u in model.vocab), "corpus should produce space units"
    mp, vp = tmp_path / "merges.txt", tmp_path / "vocab.json"
    model.save(mp, vp)
    back = BpeModel.load(mp, vp)
    assert back.merges == model.merges
    assert back.vocab == model.vocab
    text = "go on go on"
    assert back.encode(text) == model.encode(text)


def test_json_round_trip(tiny_bpe):
    back = BpeModel.from_json(tiny_bpe.to_json())
    assert back.merges == tiny_bpe.merges
    assert back.vocab == tiny_bpe.vocab


@settings(max_examples=60, deadline=None)
@given(st.text(alphabet="abc d", min_size=1, max_size=30))
def test_decode_encode_identity_over_base_alphabet(text):
    model = train_bpe(["abc abd cab dab bad cad", "aa bb cc dd"], vocab_size=20)
    assert model.decode(model.encode(text)) == text


# ---- CTC targets ----


def test_phoneme_targets_are_inventory_ids(lexicon, inventory):
    trial = FakeTrial("Cat!")
    ids = build_ctc_target(trial, "phoneme", inventory=inventory, lexicon=lexicon)
    assert ids == [inventory.id_of("K"), inventory.id_of("AE"), inventory.id_of("T")]
    assert min(ids) >= 1


def test_phoneme_targets_normalize_first(lexicon, inventory):
    plain = build_ctc_target(FakeTrial("cat"), "phoneme", inventory=inventory, lexicon=lexicon)
    fancy = build_ctc_target(FakeTrial("  CAT. "), "phoneme", inventory=inventory, lexicon=lexicon)
    assert plain == fancy


def test_bpe_targets_shift_ids_past_blank(tiny_bpe):
    ids = build_ctc_target(FakeTrial("the cat"), "bpe", bpe=tiny_bpe)
    assert ids == [i + 1 for i in tiny_bpe.encode("the cat")]
    assert min(ids) >= 1


def test_empty_after_normalization_is_an_error(tiny_bpe):
    with pytest.raises(TextProcError, match="empty target after normalization: trial t9"):
        build_ctc_target(FakeTrial("...", trial_id="t9"), "bpe", bpe=tiny_bpe)


def test_unknown_mode_is_rejected(tiny_bpe):
    with pytest.raises(TextProcError, match="unknown CTC target mode"):
        build_ctc_target(FakeTrial("hi"), "chars", bpe=tiny_bpe)
