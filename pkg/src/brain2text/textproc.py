"""Text front end: scoring normalization, grapheme-to-phoneme, and byte-pair encoding.

Three consumers share this module: the CTC pretraining targets (phoneme ids or
BPE unit ids), the decoder's token vocabulary (BPE over raw transcriptions),
and the scorer (both hypothesis and reference pass through
``normalize_for_eval`` before word error rates are computed).
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path


class TextProcError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Phoneme inventory
# ---------------------------------------------------------------------------

ARPABET = (
    "AA", "AE", "AH", "AO", "AW", "AY", "B", "CH", "D", "DH", "EH", "ER",
    "EY", "F", "G", "HH", "IH", "IY", "JH", "K", "L", "M", "N", "NG", "OW",
    "OY", "P", "R", "S", "SH", "T", "TH", "UH", "UW", "V", "W", "Y", "Z", "ZH",
)

WORD_SEP = "|"

CTC_BLANK = 0  # id 0 is reserved for the CTC blank in every label alphabet


@dataclass(frozen=True)
class PhonemeInventory:
    """Ordered label alphabet for phoneme CTC targets.

    Ids are 1-based because id 0 is the CTC blank; the blank itself is never a
    member of ``symbols``.
    """

    symbols: tuple[str, ...]

    def __post_init__(self) -> None:
        if len(set(self.symbols)) != len(self.symbols):
            raise TextProcError("inventory symbols must be unique")
        object.__setattr__(self, "_ids", {s: i + 1 for i, s in enumerate(self.symbols)})

    @property
    def size(self) -> int:
        return len(self.symbols)

    def id_of(self, symbol: str) -> int:
        try:
            return self._ids[symbol]
        except KeyError:
            raise TextProcError(f"symbol not in inventory: {symbol!r}") from None

    def symbol_of(self, label_id: int) -> str:
        if not 1 <= label_id <= len(self.symbols):
            raise TextProcError(f"label id out of range: {label_id}")
        return self.symbols[label_id - 1]


def default_inventory() -> PhonemeInventory:
    """39 stress-free ARPAbet phonemes plus the word separator."""
    return PhonemeInventory(ARPABET + (WORD_SEP,))


# ---------------------------------------------------------------------------
# Scoring normalization
# ---------------------------------------------------------------------------

# Fixed contraction table, applied before punctuation stripping. Documented in
# docs/text_normalization.md; possessive 's is not expanded (the apostrophe is
# deleted, so "dog's" scores as "dogs").
CONTRACTIONS = {
    "can't": "cannot",
    "won't": "will not",
    "don't": "do not",
    "doesn't": "does not",
    "didn't": "did not",
    "isn't": "is not",
    "aren't": "are not",
    "wasn't": "was not",
    "weren't": "were not",
    "hasn't": "has not",
    "haven't": "have not",
    "hadn't": "had not",
    "couldn't": "could not",
    "shouldn't": "should not",
    "wouldn't": "would not",
    "mustn't": "must not",
    "it's": "it is",
    "that's": "that is",
    "there's": "there is",
    "here's": "here is",
    "he's": "he is",
    "she's": "she is",
    "what's": "what is",
    "who's": "who is",
    "let's": "let us",
    "i'm": "i am",
    "i've": "i have",
    "you've": "you have",
    "we've": "we have",
    "they've": "they have",
    "i'll": "i will",
    "you'll": "you will",
    "he'll": "he will",
    "she'll": "she will",
    "it'll": "it will",
    "we'll": "we will",
    "they'll": "they will",
    "i'd": "i would",
    "you'd": "you would",
    "he'd": "he would",
    "she'd": "she would",
    "we'd": "we would",
    "they'd": "they would",
    "you're": "you are",
    "we're": "we are",
    "they're": "they are",
}

_CONTRACTION_RE = re.compile(
    r"\b(" + "|".join(re.escape(k) for k in sorted(CONTRACTIONS, key=len, reverse=True)) + r")\b"
)
_NON_WORD_RE = re.compile(r"[^a-z0-9]+")


def normalize_for_eval(text: str) -> list[str]:
    """Lowercase, expand contractions, strip punctuation, split into words.

    Idempotent: normalizing the joined output again returns the same words.
    """
    lowered = text.lower()
    expanded = _CONTRACTION_RE.sub(lambda m: CONTRACTIONS[m.group(1)], lowered)
    no_apostrophe = expanded.replace("'", "")
    spaced = _NON_WORD_RE.sub(" ", no_apostrophe)
    return spaced.split()


# ---------------------------------------------------------------------------
# Grapheme to phoneme
# ---------------------------------------------------------------------------

# Letter-to-sound fallback for out-of-lexicon words: greedy longest-match over
# the digraph table, then single characters. Crude but deterministic and total.
_DIGRAPHS = {
    "th": ("TH",), "sh": ("SH",), "ch": ("CH",), "ph": ("F",), "wh": ("W",),
    "ck": ("K",), "ng": ("NG",), "qu": ("K", "W"),
    "ee": ("IY",), "oo": ("UW",), "ea": ("IY",), "ou": ("AW",), "ow": ("AW",),
    "ai": ("EY",), "ay": ("EY",), "oi": ("OY",), "oy": ("OY",),
    "au": ("AO",), "aw": ("AO",),
    "er": ("ER",), "ir": ("ER",), "ur": ("ER",), "ar": ("AA", "R"), "or": ("AO", "R"),
}
_SINGLES = {
    "a": ("AE",), "b": ("B",), "c": ("K",), "d": ("D",), "e": ("EH",),
    "f": ("F",), "g": ("G",), "h": ("HH",), "i": ("IH",), "j": ("JH",),
    "k": ("K",), "l": ("L",), "m": ("M",), "n": ("N",), "o": ("AA",),
    "p": ("P",), "q": ("K",), "r": ("R",), "s": ("S",), "t": ("T",),
    "u": ("AH",), "v": ("V",), "w": ("W",), "x": ("K", "S"), "y": ("Y",),
    "z": ("Z",),
    "0": ("Z", "IY", "R", "OW"), "1": ("W", "AH", "N"), "2": ("T", "UW"),
    "3": ("TH", "R", "IY"), "4": ("F", "AO", "R"), "5": ("F", "AY", "V"),
    "6": ("S", "IH", "K", "S"), "7": ("S", "EH", "V", "AH", "N"),
    "8": ("EY", "T"), "9": ("N", "AY", "N"),
}


def letter_to_sound(word: str) -> tuple[str, ...]:
    phones: list[str] = []
    i = 0
    while i < len(word):
        pair = word[i : i + 2]
        if pair in _DIGRAPHS:
            phones.extend(_DIGRAPHS[pair])
            i += 2
        elif word[i] in _SINGLES:
            phones.extend(_SINGLES[word[i]])
            i += 1
        else:
            i += 1  # unmapped character contributes nothing
    return tuple(phones)


@dataclass
class Lexicon:
    """Word-to-pronunciation map with a deterministic letter-to-sound fallback."""

    entries: dict[str, tuple[str, ...]] = field(default_factory=dict)

    def phonemes(self, word: str) -> tuple[str, ...]:
        hit = self.entries.get(word)
        if hit is not None:
            return hit
        return letter_to_sound(word)

    def __contains__(self, word: str) -> bool:
        return word in self.entries

    @classmethod
    def from_file(cls, path: str | Path) -> "Lexicon":
        entries: dict[str, tuple[str, ...]] = {}
        for raw in Path(path).read_text(encoding="utf-8").splitlines():
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            entries[parts[0].lower()] = tuple(parts[1:])
        return cls(entries)

    @classmethod
    def bundled(cls) -> "Lexicon":
        ref = resources.files("brain2text").joinpath("data/lexicon.txt")
        with resources.as_file(ref) as path:
            return cls.from_file(path)


def grapheme_to_phoneme(text: str, lexicon: Lexicon) -> list[str]:
    """Phoneme sequence for normalized text, with ``WORD_SEP`` between words."""
    out: list[str] = []
    for i, word in enumerate(text.split()):
        if i > 0:
            out.append(WORD_SEP)
        out.extend(lexicon.phonemes(word))
    return out


# ---------------------------------------------------------------------------
# Byte pair encoding
# ---------------------------------------------------------------------------


@dataclass
class BpeModel:
    """Character-level BPE: ordered merges plus a unit-to-id vocabulary.

    Units are plain strings (spaces included), so decode is concatenation and
    ``decode(encode(s)) == s`` holds for any string covered by the base
    alphabet.
    """

    merges: list[tuple[str, str]]
    vocab: dict[str, int]

    def __post_init__(self) -> None:
        self._units_by_id = {i: u for u, i in self.vocab.items()}

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def encode_units(self, text: str) -> list[str]:
        symbols = list(text)
        for pair in self.merges:
            symbols = _apply_merge(symbols, pair)
        return symbols

    def encode(self, text: str) -> list[int]:
        ids = []
        for unit in self.encode_units(text):
            if unit not in self.vocab:
                raise TextProcError(f"symbol not in BPE vocabulary: {unit!r}")
            ids.append(self.vocab[unit])
        return ids

    def decode(self, ids: list[int]) -> str:
        parts = []
        for i in ids:
            if i not in self._units_by_id:
                raise TextProcError(f"unknown BPE id: {i}")
            parts.append(self._units_by_id[i])
        return "".join(parts)

    def to_json(self) -> str:
        return json.dumps(
            {"merges": [list(m) for m in self.merges], "vocab": self.vocab},
            sort_keys=True, ensure_ascii=False,
        )

    @classmethod
    def from_json(cls, text: str) -> "BpeModel":
        payload = json.loads(text)
        merges = [(str(a), str(b)) for a, b in payload["merges"]]
        return cls(merges=merges, vocab={k: int(v) for k, v in payload["vocab"].items()})

    def save(self, merges_path: str | Path, vocab_path: str | Path) -> None:
        # one JSON array per merge line: units may contain spaces themselves
        lines = [json.dumps([a, b], ensure_ascii=False) for a, b in self.merges]
        Path(merges_path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
        Path(vocab_path).write_text(
            json.dumps(self.vocab, sort_keys=True, ensure_ascii=False, indent=0) + "\n",
            encoding="utf-8",
        )

    @classmethod
    def load(cls, merges_path: str | Path, vocab_path: str | Path) -> "BpeModel":
        merges = []
        for line in Path(merges_path).read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            a, b = json.loads(line)
            merges.append((str(a), str(b)))
        vocab = json.loads(Path(vocab_path).read_text(encoding="utf-8"))
        return cls(merges=merges, vocab={k: int(v) for k, v in vocab.items()})


def _apply_merge(symbols: list[str], pair: tuple[str, str]) -> list[str]:
    if len(symbols) < 2:
        return symbols
    merged = pair[0] + pair[1]
    out: list[str] = []
    i = 0
    n = len(symbols)
    while i < n:
        if i + 1 < n and symbols[i] == pair[0] and symbols[i + 1] == pair[1]:
            out.append(merged)
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return out


def train_bpe(corpus: list[str], vocab_size: int) -> BpeModel:
    """Greedy highest-frequency pair merging; ties resolved by the merged string.

    Stops when ``vocab_size`` units exist or no adjacent pair occurs twice.
    """
    if not corpus or all(not s for s in corpus):
        raise TextProcError("empty corpus")
    base = sorted({ch for s in corpus for ch in s})
    if vocab_size <= len(base):
        raise TextProcError(
            f"vocab_size {vocab_size} must exceed base alphabet size {len(base)}"
        )
    vocab = {u: i for i, u in enumerate(base)}
    sequences = [list(s) for s in corpus if s]
    merges: list[tuple[str, str]] = []
    while len(vocab) < vocab_size:
        counts: dict[tuple[str, str], int] = {}
        for seq in sequences:
            for a, b in zip(seq, seq[1:]):
                counts[(a, b)] = counts.get((a, b), 0) + 1
        if not counts:
            break
        best_count = max(counts.values())
        if best_count < 2:
            break
        best = min((p for p, c in counts.items() if c == best_count), key=lambda p: p[0] + p[1])
        merges.append(best)
        vocab[best[0] + best[1]] = len(vocab)
        sequences = [_apply_merge(seq, best) for seq in sequences]
    return BpeModel(merges=merges, vocab=vocab)


def bpe_encode(model: BpeModel, text: str) -> list[int]:
    return model.encode(text)


def bpe_decode(model: BpeModel, ids: list[int]) -> str:
    return model.decode(ids)


# ---------------------------------------------------------------------------
# CTC targets
# ---------------------------------------------------------------------------


def build_ctc_target(
    trial,
    mode: str,
    *,
    inventory: PhonemeInventory | None = None,
    lexicon: Lexicon | None = None,
    bpe: BpeModel | None = None,
) -> list[int]:
    """Label ids (blank excluded, so all ids >= 1) for a trial's transcription.

    ``mode`` is "phoneme" (normalize, g2p, inventory ids) or "bpe" (normalize,
    encode, unit id + 1).
    """
    words = normalize_for_eval(trial.transcription)
    if not words:
        raise TextProcError(f"empty target after normalization: trial {trial.trial_id}")
    text = " ".join(words)
    if mode == "phoneme":
        if inventory is None or lexicon is None:
            raise TextProcError("phoneme mode needs an inventory and a lexicon")
        return [inventory.id_of(p) for p in grapheme_to_phoneme(text, lexicon)]
    if mode == "bpe":
        if bpe is None:
            raise TextProcError("bpe mode needs a trained BPE model")
        return [i + 1 for i in bpe.encode(text)]
    raise TextProcError(f"unknown CTC target mode: {mode}")
