"""Code-switched corpora: tokenisation, language tags, vocabularies, splits,
side-feature files and a synthetic two-language corpus generator.

Language 0 is the Latin-script side and language 1 the Han-script side.
English-like material is split into whitespace words; every Han codepoint
is its own token.
"""

from __future__ import annotations

import hashlib
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .numerics import make_rng

L0, L1 = 0, 1

BOS, EOS = "<s>", "</s>"
DUMMY0, DUMMY1 = "<dummy0>", "<dummy1>"
UNK0, UNK1 = "<unk0>", "<unk1>"

# CJK unified ideographs, extensions A-F and compatibility ideographs
_HAN_RANGES = (
    (0x3400, 0x4DBF),
    (0x4E00, 0x9FFF),
    (0xF900, 0xFAFF),
    (0x20000, 0x2EBEF),
    (0x2F800, 0x2FA1F),
    (0x30000, 0x3134F),
)


class DataError(ValueError):
    """Malformed or unusable corpus material."""


class EmptyUtterance(DataError):
    pass


def is_han(ch: str) -> bool:
    cp = ord(ch)
    return any(lo <= cp <= hi for lo, hi in _HAN_RANGES)


class SurfaceToken(NamedTuple):
    text: str
    lang: int


class Token(NamedTuple):
    lang: int
    index: int


FeatureVector = tuple  # tuple of (feature_name, category_id) pairs


@dataclass
class Utterance:
    tokens: list[Token]
    features: list[FeatureVector] | None = None

    def __post_init__(self):
        if self.features is not None and len(self.features) != len(self.tokens):
            raise DataError(f"{len(self.features)} feature tuples for {len(self.tokens)} tokens")

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def ids(self) -> list[int]:
        return [t.index for t in self.tokens]

    @property
    def langs(self) -> list[int]:
        return [t.lang for t in self.tokens]


# --------------------------------------------------------------------------
# tokenisation


def tokenize_utterance(line: str) -> list[SurfaceToken]:
    """Split a raw line into language-tagged tokens.

    >>> tokenize_utterance("ok的la")
    [SurfaceToken(text='ok', lang=0), SurfaceToken(text='的', lang=1), SurfaceToken(text='la', lang=0)]
    """
    out: list[SurfaceToken] = []
    for chunk in line.split():
        run: list[str] = []
        for ch in chunk:
            if is_han(ch):
                if run:
                    out.append(SurfaceToken("".join(run).lower(), L0))
                    run = []
                out.append(SurfaceToken(ch, L1))
            else:
                run.append(ch)
        if run:
            out.append(SurfaceToken("".join(run).lower(), L0))
    if not out:
        raise EmptyUtterance("empty utterance")
    return out


def tokenize_lines(lines: Iterable[str]) -> tuple[list[list[SurfaceToken]], list[int]]:
    """Tokenise every line, dropping empty ones.  Returns the kept line numbers too."""
    kept, numbers = [], []
    for i, line in enumerate(lines):
        try:
            kept.append(tokenize_utterance(line))
        except EmptyUtterance:
            continue
        numbers.append(i)
    return kept, numbers


def read_lines(path) -> list[str]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise DataError(f"cannot read corpus {path}: {exc}") from exc
    return text.splitlines()


def render(tokens: Sequence[str]) -> str:
    """Surface line for a token sequence; Han tokens are space-separated too."""
    return " ".join(tokens)


# --------------------------------------------------------------------------
# vocabulary


@dataclass
class Vocabulary:
    """Index layout: BOS, EOS, then the L0 range (DUMMY0, UNK0, words...),
    then the L1 range (DUMMY1, UNK1, characters...).

    BOS and EOS belong to neither language.
    """

    tokens0: list[str]
    tokens1: list[str]
    min_count: int = 1
    _index: dict = field(init=False, repr=False)

    def __post_init__(self):
        self.itos: list[str] = [BOS, EOS, DUMMY0, UNK0, *self.tokens0, DUMMY1, UNK1, *self.tokens1]
        self.start1 = 4 + len(self.tokens0)
        self.lang_of = np.full(len(self.itos), -1, dtype=np.int64)
        self.lang_of[2 : self.start1] = L0
        self.lang_of[self.start1 :] = L1
        self._index = {(L0, w): 2 + i for i, w in enumerate([DUMMY0, UNK0, *self.tokens0])}
        self._index.update({(L1, w): self.start1 + i for i, w in enumerate([DUMMY1, UNK1, *self.tokens1])})

    def __len__(self) -> int:
        return len(self.itos)

    bos = 0
    eos = 1
    dummy0 = 2
    unk0 = 3

    @property
    def dummy1(self) -> int:
        return self.start1

    @property
    def unk1(self) -> int:
        return self.start1 + 1

    def dummy(self, lang: int) -> int:
        return self.dummy0 if lang == L0 else self.dummy1

    def unk(self, lang: int) -> int:
        return self.unk0 if lang == L0 else self.unk1

    @property
    def specials(self) -> dict[str, int]:
        return {BOS: 0, EOS: 1, DUMMY0: 2, UNK0: 3, DUMMY1: self.dummy1, UNK1: self.unk1}

    @property
    def range0(self) -> range:
        return range(2, self.start1)

    @property
    def range1(self) -> range:
        return range(self.start1, len(self.itos))

    @property
    def scorable(self) -> np.ndarray:
        """Indices a language model predicts: UNKs, words and EOS (never DUMMY/BOS)."""
        return np.array(
            [self.unk0, *range(4, self.start1), self.unk1, *range(self.start1 + 2, len(self.itos)), self.eos],
            dtype=np.int64,
        )

    def index(self, tok: SurfaceToken) -> int:
        return self._index.get((tok.lang, tok.text), self.unk(tok.lang))

    def token(self, index: int) -> Token:
        lang = int(self.lang_of[index])
        if lang < 0:
            raise DataError(f"index {index} ({self.itos[index]}) carries no language")
        return Token(lang, index)

    def decode(self, utt: Utterance | Sequence[int]) -> list[str]:
        ids = utt.ids if isinstance(utt, Utterance) else utt
        return [self.itos[i] for i in ids]

    def lines(self) -> list[str]:
        """Vocabulary file rows, specials first; BOS/EOS carry language ``-``."""
        rows = []
        for surface, idx in self.specials.items():
            lang = self.lang_of[idx]
            rows.append(f"{'-' if lang < 0 else lang}\t{surface}\t{idx}")
        for idx in [*range(4, self.start1), *range(self.start1 + 2, len(self.itos))]:
            rows.append(f"{self.lang_of[idx]}\t{self.itos[idx]}\t{idx}")
        return rows

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.lines()) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        by_index: dict[int, tuple[str, str]] = {}
        for n, line in enumerate(read_lines(path), 1):
            if not line:
                continue
            try:
                lang, surface, idx = line.split("\t")
                by_index[int(idx)] = (lang, surface)
            except ValueError as exc:
                raise DataError(f"{path}:{n}: bad vocabulary row {line!r}") from exc
        itos = [by_index[i][1] for i in range(len(by_index))]
        start1 = itos.index(DUMMY1)
        vocab = cls(tokens0=itos[4:start1], tokens1=itos[start1 + 2 :])
        if vocab.itos != itos:
            raise DataError(f"{path}: vocabulary layout is inconsistent")
        return vocab

    def digest(self) -> str:
        return hashlib.sha256("\n".join(self.lines()).encode("utf-8")).hexdigest()[:16]


def build_vocabulary(utterances: Iterable[Sequence[SurfaceToken]], min_count: int = 1) -> Vocabulary:
    """Per-language vocabularies ordered by frequency, then lexicographically."""
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    counts: Counter = Counter()
    for utt in utterances:
        counts.update((t.lang, t.text) for t in utt)
    if not counts:
        raise DataError("empty corpus")

    def ordered(lang):
        items = [(w, c) for (l, w), c in counts.items() if l == lang and c >= min_count]
        return [w for w, _ in sorted(items, key=lambda wc: (-wc[1], wc[0]))]

    return Vocabulary(ordered(L0), ordered(L1), min_count=min_count)


def encode(utterance: Sequence[SurfaceToken], vocab: Vocabulary, features=None) -> Utterance:
    return Utterance([Token(t.lang, vocab.index(t)) for t in utterance], features)


def encode_all(utterances, vocab: Vocabulary, features=None) -> list[Utterance]:
    if features is None:
        return [encode(u, vocab) for u in utterances]
    return [encode(u, vocab, f) for u, f in zip(utterances, features, strict=True)]


# --------------------------------------------------------------------------
# splits and statistics


@dataclass
class CorpusSplit:
    train: list
    dev: list
    test: list
    seed: int = 0

    def parts(self) -> dict[str, list]:
        return {"train": self.train, "dev": self.dev, "test": self.test}


def split_sizes(n: int) -> tuple[int, int, int]:
    held = math.floor(n / 10 + 0.5)
    return n - 2 * held, held, held


def split_corpus(utterances: Sequence, seed: int) -> CorpusSplit:
    """Random 80/10/10 partition, deterministic in ``seed``."""
    n = len(utterances)
    if n < 10:
        raise DataError(f"need at least 10 utterances to split, got {n}")
    n_train, n_dev, _ = split_sizes(n)
    order = make_rng(seed).permutation(n)
    pick = lambda idx: [utterances[i] for i in idx]  # noqa: E731
    return CorpusSplit(
        train=pick(order[:n_train]),
        dev=pick(order[n_train : n_train + n_dev]),
        test=pick(order[n_train + n_dev :]),
        seed=seed,
    )


def _lang_seq(utt) -> list[int]:
    if isinstance(utt, Utterance):
        return utt.langs
    return [t.lang for t in utt]


def utterance_counts(utterances) -> dict[str, int]:
    tokens = l0 = 0
    for u in utterances:
        langs = _lang_seq(u)
        tokens += len(langs)
        l0 += sum(1 for l in langs if l == L0)
    return {"utterances": len(utterances), "tokens": tokens, "l0_tokens": l0, "l1_tokens": tokens - l0}


def corpus_stats(split: CorpusSplit) -> dict[str, dict[str, int]]:
    return {name: utterance_counts(utts) for name, utts in split.parts().items()}


STAT_ROWS = (("# Utterances", "utterances"), ("# Tokens", "tokens"),
             ("# L0 Tokens", "l0_tokens"), ("# L1 Tokens", "l1_tokens"))


def stats_tsv(stats: dict[str, dict[str, int]]) -> str:
    cols = list(stats)
    lines = ["\t".join(["stat", *cols])]
    for label, key in STAT_ROWS:
        lines.append("\t".join([label, *(str(stats[c][key]) for c in cols)]))
    return "\n".join(lines) + "\n"


def switch_rate(utterances) -> float:
    """Fraction of within-utterance adjacent token pairs that change language."""
    pairs = switches = 0
    for u in utterances:
        langs = _lang_seq(u)
        pairs += max(len(langs) - 1, 0)
        switches += sum(1 for a, b in zip(langs, langs[1:]) if a != b)
    return switches / pairs if pairs else 0.0


# --------------------------------------------------------------------------
# synthetic corpora

_ONSETS = ["b", "d", "f", "g", "h", "k", "l", "m", "n", "p", "r", "s", "t", "v", "w", "z", "ch", "sh"]
_NUCLEI = ["a", "e", "i", "o", "u", "ai", "ou"]


def _pseudo_words(n: int, rng: np.random.Generator) -> list[str]:
    words: list[str] = []
    seen = set()
    while len(words) < n:
        k = int(rng.integers(1, 4))
        w = "".join(_ONSETS[rng.integers(len(_ONSETS))] + _NUCLEI[rng.integers(len(_NUCLEI))] for _ in range(k))
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words


def _han_chars(n: int, rng: np.random.Generator) -> list[str]:
    cps = rng.choice(0x9FA5 - 0x4E00, size=n, replace=False) + 0x4E00
    return [chr(int(c)) for c in cps]


def synth_corpus(
    seed: int,
    n_utterances: int,
    switch_prob: float,
    vocab_sizes: tuple[int, int] = (50, 50),
    mean_len: float = 8.0,
    start_lang: int | None = None,
    concentration: float = 0.1,
) -> list[str]:
    """Generate lines from two hidden per-language bigram models.

    At every token boundary the language flips with probability
    ``switch_prob``; on re-entering a language its bigram chain resumes
    from the last token emitted in that language.  Utterance lengths are
    ``1 + Poisson(mean_len - 1)``.  ``start_lang=None`` picks the first
    language uniformly.
    """
    if mean_len < 1:
        raise ValueError("mean_len must be >= 1")
    if not 0.0 <= switch_prob <= 1.0:
        raise ValueError("switch_prob must lie in [0, 1]")
    if min(vocab_sizes) < 10:
        raise ValueError("each vocabulary needs at least 10 entries")
    rng = make_rng(seed)
    surfaces = (_pseudo_words(vocab_sizes[0], rng), _han_chars(vocab_sizes[1], rng))
    start = [rng.dirichlet(np.full(v, concentration * 10)) for v in vocab_sizes]
    trans = [rng.dirichlet(np.full(v, concentration), size=v) for v in vocab_sizes]
    cdf_start = [np.cumsum(p) for p in start]
    cdf_trans = [np.cumsum(t, axis=1) for t in trans]

    def draw(cdf):
        return min(int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right")), len(cdf) - 1)

    lines = []
    for _ in range(n_utterances):
        length = 1 + int(rng.poisson(mean_len - 1))
        lang = int(rng.integers(2)) if start_lang is None else start_lang
        last = [None, None]
        words = []
        for pos in range(length):
            if pos > 0 and rng.random() < switch_prob:
                lang = 1 - lang
            prev = last[lang]
            tok = draw(cdf_start[lang] if prev is None else cdf_trans[lang][prev])
            last[lang] = tok
            words.append(surfaces[lang][tok])
        lines.append(render(words))
    return lines


# --------------------------------------------------------------------------
# side features


class FeatureFileError(DataError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


@dataclass
class FeatureSet:
    cardinalities: dict[str, int]
    sequences: list[list[FeatureVector]]


def parse_feature_header(line: str) -> dict[str, int]:
    decl = {}
    for item in line.split("\t"):
        name, _, card = item.partition(":")
        if not name or not card.isdigit() or int(card) < 1:
            raise FeatureFileError(1, f"bad declaration {item!r}")
        decl[name] = int(card)
    return decl


def format_features(cardinalities: dict[str, int], sequences: Iterable[Sequence[FeatureVector]]) -> str:
    lines = ["\t".join(f"{k}:{v}" for k, v in cardinalities.items())]
    for seq in sequences:
        lines.append("\t".join("|".join(f"{k}={v}" for k, v in fv) for fv in seq))
    return "\n".join(lines) + "\n"


def load_features(path, utterances: Sequence) -> FeatureSet:
    """Read a feature file and check it against tokenised utterances.

    Line numbers in errors are 1-based file lines (the header is line 1).
    A feature named ``lang`` must agree with each token's language.
    """
    lines = read_lines(path)
    if not lines:
        raise FeatureFileError(1, "missing header")
    decl = parse_feature_header(lines[0])
    sequences = []
    for k, utt in enumerate(utterances):
        line_no = k + 2
        if line_no > len(lines):
            raise FeatureFileError(line_no, "missing feature line")
        cells = lines[line_no - 1].split("\t") if lines[line_no - 1] else []
        if len(cells) != len(utt):
            raise FeatureFileError(line_no, f"{len(cells)} feature tuples for {len(utt)} tokens")
        seq = []
        for tok, cell in zip(utt, cells):
            fv = []
            for pair in cell.split("|"):
                name, _, val = pair.partition("=")
                if name not in decl:
                    raise FeatureFileError(line_no, f"undeclared feature {name!r}")
                if not val.isdigit() or int(val) >= decl[name]:
                    raise FeatureFileError(line_no, f"{name}={val} outside 0..{decl[name] - 1}")
                if name == "lang" and int(val) != tok.lang:
                    raise FeatureFileError(line_no, f"lang={val} disagrees with token {tok}")
                fv.append((name, int(val)))
            if [n for n, _ in fv] != list(decl):
                raise FeatureFileError(line_no, "feature tuple does not list every declared feature in order")
            seq.append(tuple(fv))
        sequences.append(seq)
    if len(lines) > len(utterances) + 1 and any(lines[len(utterances) + 1 :]):
        raise FeatureFileError(len(utterances) + 2, "more feature lines than utterances")
    return FeatureSet(decl, sequences)


def lang_features(utterances: Sequence) -> FeatureSet:
    """Language-ID feature derived from the tokens themselves."""
    return FeatureSet({"lang": 2}, [[(("lang", t.lang),) for t in u] for u in utterances])


def merge_features(a: FeatureSet, b: FeatureSet) -> FeatureSet:
    overlap = set(a.cardinalities) & set(b.cardinalities)
    if overlap:
        raise DataError(f"feature declared twice: {sorted(overlap)}")
    seqs = [[fa + fb for fa, fb in zip(sa, sb, strict=True)] for sa, sb in zip(a.sequences, b.sequences, strict=True)]
    return FeatureSet({**a.cardinalities, **b.cardinalities}, seqs)
