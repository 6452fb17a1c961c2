"""Letter- and word-granularity text representation.

Raw query / POI text becomes two token streams: letters (one token per CJK
character, ASCII letter or digit) and words (forward maximum matching of the
letter stream against a dictionary).  Both map into one shared id space.
"""

from __future__ import annotations

import hashlib
import logging
import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .errors import ConfigError, FormatError

log = logging.getLogger(__name__)

LETTER = "letter"
WORD = "word"
GRANULARITIES = (LETTER, WORD)
_TAG = {LETTER: "L", WORD: "W"}
_UNTAG = {v: k for k, v in _TAG.items()}

PAD_ID = 0
UNK_ID = 1
PAD_TOKEN = "<PAD>"
UNK_TOKEN = "<UNK>"

DEFAULT_MAX_LETTERS = 32
DEFAULT_MAX_WORDS = 16

_CJK_RANGES = (
    (0x3400, 0x4DBF),
    (0x4E00, 0x9FFF),
    (0xF900, 0xFAFF),
    (0x20000, 0x2A6DF),
    (0x2A700, 0x2EBEF),
    (0x30000, 0x3134F),
)


def is_cjk(ch: str) -> bool:
    cp = ord(ch)
    return any(lo <= cp <= hi for lo, hi in _CJK_RANGES)


def _as_text(text) -> str:
    if isinstance(text, (bytes, bytearray)):
        return bytes(text).decode("utf-8")  # strict: raises UnicodeDecodeError
    return text


def tokenize_letters(text) -> list[str]:
    """Split text into letter tokens.

    Text is NFKC-normalised first so full-width IME output (``ＫＦＣ``) behaves
    like ASCII.  CJK ideographs, digits and alphabetic characters each become
    one (lowercased) token; whitespace, punctuation and symbols are dropped.
    """
    text = unicodedata.normalize("NFKC", _as_text(text))
    out = []
    for ch in text:
        if is_cjk(ch):
            out.append(ch)
        elif ch.isalnum():
            out.append(ch.lower())
    return out


def has_pinyin(text) -> bool:
    """True iff the text carries at least one ASCII alphabetic letter."""
    return any(t.isascii() and t.isalpha() for t in tokenize_letters(text))


@dataclass(frozen=True)
class SegmenterDict:
    """Word dictionary for maximum-match segmentation (word -> frequency)."""

    words: dict
    max_word_len: int = field(init=False)

    def __post_init__(self):
        for w, f in self.words.items():
            if not w:
                raise ConfigError("segmenter dictionary contains an empty word")
            if not f > 0:
                raise ConfigError(f"non-positive frequency for word {w!r}")
        object.__setattr__(self, "max_word_len", max((len(w) for w in self.words), default=0))

    def __contains__(self, word):
        return word in self.words

    def __len__(self):
        return len(self.words)

    @classmethod
    def from_words(cls, words: Iterable[str]) -> "SegmenterDict":
        counts = Counter()
        for w in words:
            w = "".join(tokenize_letters(w))
            if w:
                counts[w] += 1
        return cls(dict(counts))

    @classmethod
    def from_corpus(cls, texts: Iterable[str]) -> "SegmenterDict":
        """Induce a dictionary from whitespace-delimited chunks of POI text.

        Only multi-letter chunks are kept; single letters are already the
        segmenter's fallback unit.
        """
        counts = Counter()
        for text in texts:
            for chunk in _as_text(text).split():
                w = "".join(tokenize_letters(chunk))
                if len(tokenize_letters(w)) > 1:
                    counts[w] += 1
        return cls(dict(counts))

    @classmethod
    def from_vocabulary(cls, vocab: "Vocabulary") -> "SegmenterDict":
        words = {}
        for token, gran, idx in vocab.entries:
            if gran == WORD and idx > UNK_ID and len(tokenize_letters(token)) > 1:
                # rank-derived pseudo frequency; max-match only needs membership
                words[token] = vocab.size - idx
        return cls(words)


def segment_words(text, dictionary: SegmenterDict) -> list[str]:
    """Greedy forward maximum matching over the letter stream.

    Spans that match no dictionary word fall back to single letters, so
    ``"".join(segment_words(t, d)) == "".join(tokenize_letters(t))``.
    """
    letters = tokenize_letters(text)
    return _max_match(letters, dictionary)


def _max_match(letters: Sequence[str], dictionary: SegmenterDict) -> list[str]:
    out = []
    i, n = 0, len(letters)
    longest = dictionary.max_word_len
    words = dictionary.words
    while i < n:
        step = 1
        # dictionary words are stored letter-joined; a multi-char letter token
        # never occurs, so span length in letters == string length
        for span in range(min(longest, n - i), 1, -1):
            if "".join(letters[i:i + span]) in words:
                step = span
                break
        out.append("".join(letters[i:i + step]))
        i += step
    return out


class Vocabulary:
    """Dense id space over (token, granularity); ids 0 and 1 are PAD and UNK."""

    def __init__(self, entries: Sequence[tuple[str, str]]):
        self._tokens: list[tuple[str, str]] = [(PAD_TOKEN, LETTER), (UNK_TOKEN, LETTER)]
        self._ids: dict[tuple[str, str], int] = {}
        for token, gran in entries:
            if gran not in GRANULARITIES:
                raise ConfigError(f"unknown granularity {gran!r}")
            key = (token, gran)
            if key in self._ids or token in (PAD_TOKEN, UNK_TOKEN):
                raise ConfigError(f"duplicate vocabulary entry {key!r}")
            self._ids[key] = len(self._tokens)
            self._tokens.append(key)

    @property
    def size(self) -> int:
        return len(self._tokens)

    def __len__(self):
        return self.size

    @property
    def entries(self) -> list[tuple[str, str, int]]:
        return [(t, g, i) for i, (t, g) in enumerate(self._tokens)]

    def lookup(self, token: str, granularity: str) -> int:
        return self._ids.get((token, granularity), UNK_ID)

    def token(self, idx: int) -> str:
        return self._tokens[idx][0]

    def granularity(self, idx: int) -> str:
        return self._tokens[idx][1]

    def count(self, granularity: str) -> int:
        return sum(1 for (_, g) in self._ids if g == granularity)

    def to_text(self) -> str:
        return "".join(f"{i}\t{_TAG[g]}\t{t}\n" for t, g, i in self.entries)

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.to_text())

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        if len(lines) < 2:
            raise FormatError(f"{path}: vocabulary needs at least the PAD and UNK lines")
        entries = []
        for lineno, line in enumerate(lines, 1):
            parts = line.split("\t")
            if len(parts) != 3 or parts[1] not in _UNTAG:
                raise FormatError(f"{path}:{lineno}: malformed vocabulary line {line!r}")
            idx, tag, token = parts
            if not idx.isdigit() or int(idx) != lineno - 1:
                raise FormatError(f"{path}:{lineno}: expected id {lineno - 1}, got {idx!r}")
            if lineno == 1 and token != PAD_TOKEN or lineno == 2 and token != UNK_TOKEN:
                raise FormatError(f"{path}:{lineno}: reserved id must hold {PAD_TOKEN}/{UNK_TOKEN}")
            if lineno > 2:
                entries.append((token, _UNTAG[tag]))
        return cls(entries)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self._tokens == other._tokens

    def __repr__(self):
        return (f"Vocabulary(size={self.size}, letters={self.count(LETTER)}, "
                f"words={self.count(WORD)})")


def build_vocab(corpus: Iterable[str], letter_cap: int, word_cap: int,
                segmenter: SegmenterDict | None = None) -> Vocabulary:
    """Keep the most frequent letters and words of a POI text corpus.

    Ties are broken by token order so the result is a pure function of the
    corpus.  Without an explicit ``segmenter`` the word dictionary is induced
    from whitespace-delimited chunks of the corpus itself.
    """
    if letter_cap < 1 or word_cap < 0:
        raise ConfigError(f"caps must satisfy letter_cap >= 1, word_cap >= 0 "
                          f"(got {letter_cap}, {word_cap})")
    texts = list(corpus)
    if not texts:
        log.warning("empty corpus: vocabulary holds only PAD/UNK")
    if segmenter is None:
        segmenter = SegmenterDict.from_corpus(texts)
    letters, words = Counter(), Counter()
    for text in texts:
        ls = tokenize_letters(text)
        letters.update(ls)
        if word_cap:
            words.update(_max_match(ls, segmenter))

    def top(counter, cap):
        return [t for t, _ in sorted(counter.items(), key=lambda kv: (-kv[1], kv[0]))[:cap]]

    entries = [(t, LETTER) for t in top(letters, letter_cap)]
    entries += [(t, WORD) for t in top(words, word_cap)]
    return Vocabulary(entries)


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple
    granularity: str
    source_length: int

    def __len__(self):
        return len(self.ids)


def encode(tokens: Sequence[str], vocab: Vocabulary, granularity: str, max_len: int) -> TokenSequence:
    if max_len < 1:
        raise ConfigError(f"max_len must be >= 1, got {max_len}")
    ids = tuple(vocab.lookup(t, granularity) for t in tokens[:max_len])
    return TokenSequence(ids, granularity, len(tokens))


class TextEncoder:
    """Text -> (letters, words) token sequences under one vocabulary."""

    def __init__(self, vocab: Vocabulary, segmenter: SegmenterDict | None = None,
                 max_letters: int = DEFAULT_MAX_LETTERS, max_words: int = DEFAULT_MAX_WORDS):
        self.vocab = vocab
        self.segmenter = segmenter if segmenter is not None else SegmenterDict.from_vocabulary(vocab)
        self.max_letters = max_letters
        self.max_words = max_words

    def encode(self, text) -> tuple[TokenSequence, TokenSequence]:
        letters = tokenize_letters(text)
        words = _max_match(letters, self.segmenter)
        return (encode(letters, self.vocab, LETTER, self.max_letters),
                encode(words, self.vocab, WORD, self.max_words))
