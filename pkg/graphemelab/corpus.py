"""
Corpus: synthetic parallel grapheme/phoneme data with gold alignments.

Sentences are sampled from a weighted letter/digraph inventory and transcribed
by a small French-flavoured rule phonetizer, which also reports which grapheme
produced each phoneme. The alignment is what later lets embeddings be labeled
with a gold phoneme.

    generate_corpus(n, seed) --> split_corpus(...) --> build_vocabs(...)
             |
             v
       corpus.tsv  (id, graphemes, phonemes, alignment)
"""

import logging
import unicodedata
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

from graphemelab.errors import (
    InsufficientData,
    IoFailure,
    UnknownSymbol,
    UnsupportedCharacter,
)
from graphemelab.numerics import Prng

PAD = "⟨pad⟩"
SILENT = "∅"
VOWELS = frozenset("aeiou")
PUNCTUATION = frozenset(".,?!")
SPACE = " "
LETTERS = frozenset("abcdefghijklmnopqrstuvwxyz")
SPLIT_NAMES = ("train", "dev", "test")

Span = tuple[int, int]


# ============================================================================
# Domain types
# ============================================================================

@dataclass(frozen=True)
class GraphemeVocab:
    symbols: tuple[str, ...]
    index: dict[str, int] = field(compare=False, repr=False)

    @classmethod
    def from_symbols(cls, symbols: Iterable[str]) -> "GraphemeVocab":
        ordered = (PAD,) + tuple(sorted(set(symbols) - {PAD}))
        return cls(ordered, {s: i for i, s in enumerate(ordered)})

    def __len__(self) -> int:
        return len(self.symbols)

    def encode(self, tokens: Sequence[str]) -> list[int]:
        try:
            return [self.index[t] for t in tokens]
        except KeyError as exc:
            raise UnknownSymbol("input", exc.args[0]) from None


@dataclass(frozen=True)
class PhonemeVocab:
    symbols: tuple[str, ...]
    index: dict[str, int] = field(compare=False, repr=False)

    @classmethod
    def from_symbols(cls, symbols: Iterable[str]) -> "PhonemeVocab":
        ordered = tuple(sorted(set(symbols)))
        return cls(ordered, {s: i for i, s in enumerate(ordered)})

    @property
    def blank_id(self) -> int:
        return len(self.symbols)

    def __len__(self) -> int:
        return len(self.symbols)

    def encode(self, phonemes: Sequence[str]) -> list[int]:
        try:
            return [self.index[p] for p in phonemes]
        except KeyError as exc:
            raise UnknownSymbol("input", exc.args[0]) from None

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.symbols[i] for i in ids]


@dataclass(frozen=True)
class Utterance:
    id: str
    graphemes: tuple[str, ...]
    phonemes: tuple[str, ...]
    alignment: tuple[Span, ...] | None = None

    def labels(self) -> list[str]:
        """Gold label per grapheme: first phoneme of its span, or SILENT."""
        alignment = self.alignment
        if alignment is None:
            _, alignment = phonetize_toy(self.graphemes)
        return [self.phonemes[start] if stop > start else SILENT for start, stop in alignment]


@dataclass(frozen=True)
class Corpus:
    utterances: tuple[Utterance, ...]
    splits: dict[str, tuple[str, ...]] = field(default_factory=dict)

    def by_id(self) -> dict[str, Utterance]:
        return {u.id: u for u in self.utterances}

    def split(self, name: str) -> list[Utterance]:
        if name not in self.splits:
            raise InsufficientData(f"corpus has no '{name}' split")
        lookup = self.by_id()
        return [lookup[i] for i in self.splits[name]]


# ============================================================================
# Normalization
# ============================================================================

def normalize_text(raw: str) -> list[str]:
    """NFC + lowercase; keep a-z, space and . , ? ! as single tokens."""
    text = unicodedata.normalize("NFC", raw).lower()
    tokens = []
    for position, char in enumerate(text):
        if char in LETTERS or char in PUNCTUATION or char == SPACE:
            tokens.append(char)
        else:
            raise UnsupportedCharacter(position, char)
    return tokens


# ============================================================================
# Toy phonetizer
# ============================================================================

def _is_letter(tokens: Sequence[str], i: int) -> bool:
    return 0 <= i < len(tokens) and tokens[i] in LETTERS


def _word_bounds(tokens: Sequence[str], i: int) -> tuple[int, int]:
    start = i
    while _is_letter(tokens, start - 1):
        start -= 1
    stop = i + 1
    while _is_letter(tokens, stop):
        stop += 1
    return start, stop


def _nasal_context(tokens: Sequence[str], i: int, pair: str) -> bool:
    """pair at i, followed by a non-vowel or the end of the word."""
    if "".join(tokens[i:i + 2]) != pair:
        return False
    follower = i + 2
    return not _is_letter(tokens, follower) or tokens[follower] not in VOWELS


def _match(tokens: Sequence[str], i: int) -> tuple[int, int, list[list[str]]]:
    """Longest, then highest-priority, rule matching at i.

    Returns (rule number, matched length, phoneme span per matched grapheme).
    """
    token = tokens[i]
    if token not in LETTERS:
        return 12, 1, [[]]
    _, word_stop = _word_bounds(tokens, i)
    candidates: list[tuple[int, int, list[list[str]]]] = []

    if "".join(tokens[i:i + 3]) == "emb":
        candidates.append((1, 3, [[], ["ã"], ["b"]]))
    if "".join(tokens[i:i + 3]) == "ent" and i + 3 == word_stop:
        candidates.append((2, 3, [[], [], []]))
    if _nasal_context(tokens, i, "an"):
        candidates.append((3, 2, [[], ["ã"]]))
    if _nasal_context(tokens, i, "en"):
        candidates.append((4, 2, [[], ["ã"]]))
    if _nasal_context(tokens, i, "in"):
        candidates.append((5, 2, [[], ["ɛ̃"]]))
    if "".join(tokens[i:i + 2]) == "ou":
        candidates.append((6, 2, [["u"], []]))
    if "".join(tokens[i:i + 2]) == "ch":
        candidates.append((7, 2, [["ʃ"], []]))
    if token == "s" and i + 1 == word_stop:
        liaison = (i + 2 < len(tokens) and tokens[i + 1] == SPACE and tokens[i + 2] in VOWELS)
        candidates.append((8, 1, [["z"] if liaison else []]))
    if token == "e" and i + 1 == word_stop:
        word_start, _ = _word_bounds(tokens, i)
        if word_stop - word_start >= 4:
            candidates.append((9, 1, [[]]))
    if token == "u":
        candidates.append((10, 1, [["y"]]))
    candidates.append((11, 1, [[token]]))

    return min(candidates, key=lambda c: (-c[1], c[0]))


def phonetize_trace(graphemes: Sequence[str]) -> tuple[list[str], list[Span], list[int]]:
    """Phonemes, per-grapheme spans, and the rule number that consumed each grapheme."""
    tokens = list(graphemes)
    phonemes: list[str] = []
    alignment: list[Span] = []
    rules: list[int] = []
    i = 0
    while i < len(tokens):
        rule, length, spans = _match(tokens, i)
        for produced in spans:
            start = len(phonemes)
            phonemes.extend(produced)
            alignment.append((start, len(phonemes)))
            rules.append(rule)
        i += length
    return phonemes, alignment, rules


def phonetize_toy(graphemes: Sequence[str]) -> tuple[list[str], list[Span]]:
    """Apply the fixed rule table; returns phonemes and grapheme -> phoneme spans.

    Multi-letter rules attribute their phonemes to one grapheme: nasal vowels go
    to the nasal consonant ("an" -> a:silent, n:/ã/), other digraphs to their
    first letter ("ch" -> c:/ʃ/, h:silent).
    """
    phonemes, alignment, _ = phonetize_trace(graphemes)
    return phonemes, alignment


# ============================================================================
# Generation
# ============================================================================

# Sampling units: single letters plus digraphs that exercise the rule table.
UNITS: tuple[tuple[str, float], ...] = (
    ("a", 9.0), ("e", 10.0), ("i", 6.0), ("o", 5.0), ("u", 4.0),
    ("b", 2.0), ("c", 2.5), ("d", 3.0), ("f", 1.5), ("h", 0.8),
    ("l", 4.5), ("m", 3.0), ("n", 5.0), ("p", 2.5), ("r", 5.5),
    ("s", 5.0), ("t", 5.0), ("v", 1.5),
    ("ch", 1.2), ("ou", 1.5), ("an", 2.0), ("en", 2.0), ("in", 1.5),
    ("on", 1.5), ("emb", 0.5),
)
SUFFIXES: tuple[tuple[str, float], ...] = (
    ("", 0.55), ("s", 0.2), ("e", 0.15), ("ent", 0.1),
)
SENTENCE_END = ((".", 0.7), ("?", 0.2), ("!", 0.1))
COMMA_PROBABILITY = 0.08
MIN_WORD, MAX_WORD = 2, 8
MIN_WORDS, MAX_WORDS = 3, 12


def _sample_word(prng: Prng) -> str:
    length = MIN_WORD + prng.below(MAX_WORD - MIN_WORD + 1)
    suffix = SUFFIXES[prng.choice_weighted([w for _, w in SUFFIXES])][0]
    if length - len(suffix) < 1:
        suffix = ""
    body_length = length - len(suffix)
    weights = [w for _, w in UNITS]
    body = ""
    while len(body) < body_length:
        body += UNITS[prng.choice_weighted(weights)][0]
    return body[:body_length] + suffix


def _sample_sentence(prng: Prng) -> str:
    count = MIN_WORDS + prng.below(MAX_WORDS - MIN_WORDS + 1)
    words = []
    for index in range(count):
        word = _sample_word(prng)
        if index < count - 1 and prng.uniform() < COMMA_PROBABILITY:
            word += ","
        words.append(word)
    end = SENTENCE_END[prng.choice_weighted([w for _, w in SENTENCE_END])][0]
    return " ".join(words) + end


def make_utterance(utterance_id: str, text: str) -> Utterance:
    graphemes = normalize_text(text)
    phonemes, alignment = phonetize_toy(graphemes)
    return Utterance(utterance_id, tuple(graphemes), tuple(phonemes), tuple(alignment))


def generate_corpus(n_sentences: int, seed: int) -> Corpus:
    if n_sentences < 1:
        raise InsufficientData("n_sentences must be at least 1")
    prng = Prng(seed)
    width = max(5, len(str(n_sentences)))
    utterances = tuple(
        make_utterance(f"u{index:0{width}d}", _sample_sentence(prng))
        for index in range(n_sentences)
    )
    logging.debug(f"Generated {len(utterances)} utterances with seed {seed}")
    return Corpus(utterances)


# ============================================================================
# Splits and vocabularies
# ============================================================================

def split_corpus(corpus: Corpus, test_n: int, dev_n: int, seed: int) -> Corpus:
    total = len(corpus.utterances)
    if test_n < 0 or dev_n < 0 or test_n + dev_n >= total:
        raise InsufficientData(
            f"cannot hold out {test_n} test + {dev_n} dev from {total} utterances")
    order = Prng(seed).sample(total, total)
    ids = [corpus.utterances[i].id for i in order]
    test = set(ids[:test_n])
    dev = set(ids[test_n:test_n + dev_n])
    splits = {"train": [], "dev": [], "test": []}
    for utterance in corpus.utterances:
        name = "test" if utterance.id in test else "dev" if utterance.id in dev else "train"
        splits[name].append(utterance.id)
    return replace(corpus, splits={name: tuple(splits[name]) for name in SPLIT_NAMES})


def build_vocabs(corpus: Corpus) -> tuple[GraphemeVocab, PhonemeVocab]:
    """Closed vocabularies from the train split; dev/test may not add symbols."""
    if not corpus.utterances:
        raise InsufficientData("corpus is empty")
    train = corpus.split("train") if corpus.splits else list(corpus.utterances)
    graphemes = {g for u in train for g in u.graphemes}
    phonemes = {p for u in train for p in u.phonemes}
    for name in ("dev", "test"):
        if name not in corpus.splits:
            continue
        for utterance in corpus.split(name):
            for symbol in utterance.graphemes:
                if symbol not in graphemes:
                    raise UnknownSymbol(name, symbol)
            for symbol in utterance.phonemes:
                if symbol not in phonemes:
                    raise UnknownSymbol(name, symbol)
    return GraphemeVocab.from_symbols(graphemes), PhonemeVocab.from_symbols(phonemes)


# ============================================================================
# File format
# ============================================================================

CORPUS_HEADER = "# graphemelab corpus: id<TAB>graphemes<TAB>phonemes<TAB>alignment"


def format_alignment(alignment: Sequence[Span]) -> str:
    return " ".join(
        f"{i}:{start}-{stop}" if stop > start else f"{i}:-"
        for i, (start, stop) in enumerate(alignment)
    )


def parse_alignment(text: str, line_number: int) -> tuple[Span, ...]:
    spans = []
    for expected, item in enumerate(text.split()):
        index, _, span = item.partition(":")
        if not index.isdigit() or int(index) != expected:
            raise IoFailure(f"line {line_number}: bad alignment entry {item!r}")
        if span == "-":
            spans.append((0, 0))
            continue
        start, _, stop = span.partition("-")
        spans.append((int(start), int(stop)))
    # Silent spans carry no position in the file; anchor them where the running
    # phoneme count stands so every span is a valid slice.
    anchored = []
    cursor = 0
    for start, stop in spans:
        if stop > start:
            cursor = stop
            anchored.append((start, stop))
        else:
            anchored.append((cursor, cursor))
    return tuple(anchored)


def write_corpus(corpus: Corpus, path: Path) -> None:
    lines = [CORPUS_HEADER]
    for u in corpus.utterances:
        alignment = format_alignment(u.alignment) if u.alignment is not None else ""
        lines.append(f"{u.id}\t{''.join(u.graphemes)}\t{' '.join(u.phonemes)}\t{alignment}")
    write_text_atomic(path, "\n".join(lines) + "\n")


def read_corpus(path: Path) -> Corpus:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot read corpus {path}: {exc}") from exc
    utterances = []
    for line_number, line in enumerate(text.split("\n"), 1):
        if not line or line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) < 3:
            raise IoFailure(f"line {line_number}: expected at least 3 tab-separated fields")
        phonemes = tuple(p for p in fields[2].split(" ") if p)
        alignment = parse_alignment(fields[3], line_number) if len(fields) > 3 and fields[3] else None
        utterances.append(Utterance(fields[0], tuple(fields[1]), phonemes, alignment))
    return Corpus(tuple(utterances))


def write_splits(corpus: Corpus, path: Path) -> None:
    lines = ["id\tsplit"]
    membership = {i: name for name, ids in corpus.splits.items() for i in ids}
    for u in corpus.utterances:
        lines.append(f"{u.id}\t{membership[u.id]}")
    write_text_atomic(path, "\n".join(lines) + "\n")


def read_splits(corpus: Corpus, path: Path) -> Corpus:
    try:
        rows = Path(path).read_text(encoding="utf-8").split("\n")[1:]
    except OSError as exc:
        raise IoFailure(f"cannot read splits {path}: {exc}") from exc
    splits: dict[str, list[str]] = {name: [] for name in SPLIT_NAMES}
    for row in rows:
        if not row:
            continue
        utterance_id, name = row.split("\t")
        if name not in splits:
            raise IoFailure(f"unknown split name {name!r}")
        splits[name].append(utterance_id)
    return replace(corpus, splits={name: tuple(ids) for name, ids in splits.items()})


def write_text_atomic(path: Path, text: str) -> None:
    """Write UTF-8 text with LF endings via a temporary file and rename."""
    path = Path(path)
    temporary = path.with_name(f".{path.name}.tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(temporary, "w", encoding="utf-8", newline="\n") as handle:
            handle.write(text)
        temporary.replace(path)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc
