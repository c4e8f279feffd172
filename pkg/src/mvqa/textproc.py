"""Language-aware text utilities.

Normalization, tokenization, answer containment, answer categories, and
question-prefix classification. Per-language behavior is driven by the
switches on a language record (``has_letter_case``, ``whitespace_delimited``)
plus small bundled data files; nothing in this module calls a model.

Comparison rule used throughout the package: two strings are "the same
answer" when their ``normalize`` outputs are equal, and an answer "appears
in" a caption when its token sequence is a contiguous sublist of the
caption's token sequence.
"""
from __future__ import annotations

import functools
import unicodedata
from dataclasses import dataclass
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import TYPE_CHECKING, Iterator, Mapping

import regex as _regex

if TYPE_CHECKING:  # real language records live in core; only the flags are used here
    from .core import LanguageCode

__all__ = [
    "AnswerCategory",
    "Lexicon",
    "Standardization",
    "TokenSeq",
    "QUESTION_PREFIXES",
    "OTHER_PREFIX",
    "TERMINAL_PUNCTUATION",
    "answer_category",
    "answer_in_caption",
    "classify_question",
    "load_lexicon",
    "normalize",
    "set_data_root",
    "standardize_answer",
    "tokenize",
]

# Sentence-final punctuation stripped by normalize(): ASCII, fullwidth/CJK,
# and the Devanagari danda.
TERMINAL_PUNCTUATION = ".?!。？！．।"

# Kept inside tokens (compounds, contractions); stripped only at token edges.
_KEEP_INSIDE = "-'’"


class _EnglishFlags:
    """Stand-in language record so English-only helpers need no core import."""

    code = "en"
    has_letter_case = True
    whitespace_delimited = True


_EN = _EnglishFlags()


def normalize(text: str, lang: "LanguageCode") -> str:
    """Canonical comparison form: NFC, casefolded where the script has case,
    whitespace collapsed, one trailing run of sentence punctuation stripped.

    Idempotent: normalize(normalize(x)) == normalize(x).
    """
    out = unicodedata.normalize("NFC", text)
    if lang.has_letter_case:
        # casefold can produce denormalized sequences; re-apply NFC
        out = unicodedata.normalize("NFC", out.casefold())
    out = " ".join(out.split())
    return out.rstrip(TERMINAL_PUNCTUATION + " ")


def _is_separator(ch: str) -> bool:
    if ch.isspace():
        return True
    if ch in _KEEP_INSIDE:
        return False
    return unicodedata.category(ch).startswith("P")


def _split_words(text: str) -> list[str]:
    """Default tokenizer: split on whitespace and punctuation."""
    tokens: list[str] = []
    current: list[str] = []
    for ch in text:
        if _is_separator(ch):
            if current:
                tokens.append("".join(current))
                current = []
        else:
            current.append(ch)
    if current:
        tokens.append("".join(current))
    out = []
    for tok in tokens:
        tok = tok.strip(_KEEP_INSIDE)
        if tok:
            out.append(tok)
    return out


# CJK unified ideographs (base + ext A + compatibility + ext B..F plane 2).
_CJK_RANGES = (
    (0x3400, 0x4DBF),
    (0x4E00, 0x9FFF),
    (0xF900, 0xFAFF),
    (0x20000, 0x2FA1F),
)


def _is_cjk(ch: str) -> bool:
    cp = ord(ch)
    return any(lo <= cp <= hi for lo, hi in _CJK_RANGES)


def _split_zh(text: str) -> list[str]:
    """Chinese: every ideograph is its own token, other runs use the default rule."""
    tokens: list[str] = []
    run: list[str] = []

    def flush() -> None:
        if run:
            tokens.extend(_split_words("".join(run)))
            run.clear()

    for ch in text:
        if _is_cjk(ch):
            flush()
            tokens.append(ch)
        else:
            run.append(ch)
    flush()
    return tokens


def _is_thai(ch: str) -> bool:
    return 0x0E00 <= ord(ch) < 0x0E80


def _split_th(text: str, words: frozenset[str], max_len: int) -> list[str]:
    """Thai: greedy longest dictionary match, falling back to one extended
    grapheme cluster when nothing matches. Non-Thai runs use the default rule."""
    tokens: list[str] = []
    i, n = 0, len(text)
    while i < n:
        ch = text[i]
        if ch.isspace():
            i += 1
            continue
        if not _is_thai(ch):
            j = i
            while j < n and not _is_thai(text[j]) and not text[j].isspace():
                j += 1
            tokens.extend(_split_words(text[i:j]))
            i = j
            continue
        match = None
        for length in range(min(max_len, n - i), 0, -1):
            cand = text[i : i + length]
            if cand in words:
                match = cand
                break
        if match is None:
            match = _regex.match(r"\X", text[i:]).group(0)
        tokens.append(match)
        i += len(match)
    return tokens


@dataclass(frozen=True, slots=True)
class TokenSeq:
    """Tokens of one text in one language.

    Invariants: no token is empty or contains whitespace, and re-tokenizing
    the space-joined tokens yields the same sequence.
    """

    tokens: tuple[str, ...]
    lang: "LanguageCode"

    def __post_init__(self) -> None:
        for tok in self.tokens:
            if not tok or any(ch.isspace() for ch in tok):
                raise ValueError(f"invalid token {tok!r}")

    def __iter__(self) -> Iterator[str]:
        return iter(self.tokens)

    def __len__(self) -> int:
        return len(self.tokens)

    def text(self) -> str:
        return " ".join(self.tokens)


def tokenize(text: str, lang: "LanguageCode") -> TokenSeq:
    if lang.whitespace_delimited:
        toks = _split_words(text)
    elif lang.code == "zh":
        toks = _split_zh(text)
    elif lang.code == "th":
        dictionary = _thai_dictionary()
        toks = _split_th(text, dictionary.words, dictionary.max_len)
    else:
        toks = _split_words(text)
    return TokenSeq(tuple(toks), lang)


def answer_in_caption(answer: str, caption: str, lang: "LanguageCode") -> bool:
    """True when the normalized answer's tokens appear contiguously in the
    normalized caption's tokens. An empty needle is trivially contained."""
    needle = tokenize(normalize(answer, lang), lang).tokens
    if not needle:
        return True
    hay = tokenize(normalize(caption, lang), lang).tokens
    k = len(needle)
    return any(hay[i : i + k] == needle for i in range(len(hay) - k + 1))


class AnswerCategory(str, Enum):
    BOOLEAN = "boolean"
    NUMERIC = "numeric"
    COLOR = "color"
    OTHER = "other"


@dataclass(frozen=True)
class Lexicon:
    """Closed-class answer vocabulary for one language.

    Keys are normalize()d surfaces. ``boolean`` maps surface -> slot
    ("yes"/"no"); ``boolean_canonical`` maps slot -> preferred surface;
    ``numbers`` maps number words to digit strings; ``colors`` and
    ``none_forms`` map variants to a canonical surface.
    """

    lang_code: str
    boolean: Mapping[str, str]
    boolean_canonical: Mapping[str, str]
    numbers: Mapping[str, str]
    colors: Mapping[str, str]
    none_forms: Mapping[str, str]


@dataclass(frozen=True, slots=True)
class Standardization:
    """Result of standardize_answer: the standard surface plus whether the
    input differed from it (worth surfacing to a reviewer)."""

    text: str
    nonstandard: bool


# Data files live in the package by default; tests and deployments can point
# elsewhere. Changing the root invalidates the caches.
_DATA_ROOT: Path | None = None


def set_data_root(root: str | Path | None) -> None:
    global _DATA_ROOT
    _DATA_ROOT = Path(root) if root is not None else None
    _load_lexicon_cached.cache_clear()
    _thai_dictionary.cache_clear()


def _read_data_text(relpath: str) -> str:
    if _DATA_ROOT is not None:
        return (_DATA_ROOT / relpath).read_text(encoding="utf-8")
    return resources.files("mvqa").joinpath("data", relpath).read_text(encoding="utf-8")


def _read_pairs(content: str, relpath: str) -> list[tuple[str, str]]:
    """Lines of ``surface<TAB>value`` (or bare ``surface``, meaning itself)."""
    pairs: list[tuple[str, str]] = []
    for lineno, raw in enumerate(content.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        surface, _, value = line.partition("\t")
        surface = surface.strip()
        value = value.strip() or surface
        if not surface:
            raise ValueError(f"{relpath}:{lineno}: empty surface")
        pairs.append((surface, value))
    return pairs


def _surface_key(surface: str, lang: "LanguageCode") -> str:
    return normalize(surface, lang)


@functools.lru_cache(maxsize=None)
def _load_lexicon_cached(code: str) -> Lexicon:
    # late import keeps module load order flexible; no cycle at import time
    from .core import language

    lang = language(code)
    base = f"lexicons/{code}"

    def table(name: str) -> dict[str, str]:
        pairs = _read_pairs(_read_data_text(f"{base}/{name}.txt"), f"{base}/{name}.txt")
        return {_surface_key(surface, lang): value for surface, value in pairs}

    boolean_pairs = _read_pairs(_read_data_text(f"{base}/boolean.txt"), f"{base}/boolean.txt")
    boolean: dict[str, str] = {}
    canonical: dict[str, str] = {}
    for surface, slot in boolean_pairs:
        if slot not in ("yes", "no"):
            raise ValueError(f"{base}/boolean.txt: slot must be yes or no, got {slot!r}")
        boolean[_surface_key(surface, lang)] = slot
        canonical.setdefault(slot, _surface_key(surface, lang))
    return Lexicon(
        lang_code=code,
        boolean=boolean,
        boolean_canonical=canonical,
        numbers=table("numbers"),
        colors=table("color"),
        none_forms=table("none"),
    )


def load_lexicon(lang: "LanguageCode") -> Lexicon:
    return _load_lexicon_cached(lang.code)


@dataclass(frozen=True)
class _ThaiDictionary:
    words: frozenset[str]
    max_len: int


@functools.lru_cache(maxsize=None)
def _thai_dictionary() -> _ThaiDictionary:
    words = set()
    for lineno, raw in enumerate(_read_data_text("dict/th.txt").splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        words.add(line)
    if not words:
        raise ValueError("dict/th.txt: no entries")
    return _ThaiDictionary(frozenset(words), max(len(w) for w in words))


def answer_category(answer: str, lang: "LanguageCode", lexicon: Lexicon | None = None) -> AnswerCategory:
    """Boolean beats numeric beats color; everything else is OTHER."""
    lex = lexicon if lexicon is not None else load_lexicon(lang)
    norm = normalize(answer, lang)
    if norm in lex.boolean:
        return AnswerCategory.BOOLEAN
    if norm in lex.numbers or (norm and all(ch.isdecimal() for ch in norm)):
        return AnswerCategory.NUMERIC
    if norm in lex.colors:
        return AnswerCategory.COLOR
    return AnswerCategory.OTHER


def standardize_answer(
    answer: str,
    category: AnswerCategory,
    lang: "LanguageCode",
    lexicon: Lexicon | None = None,
) -> Standardization:
    """Map an answer to its standard surface for the closed categories.

    boolean -> the language's canonical yes/no surface; numeric -> digit
    string (number words resolved through the lexicon, native digits through
    int()); color -> canonical color surface. OTHER answers are normalized
    only. ``nonstandard`` reports whether the input differed.
    """
    lex = lexicon if lexicon is not None else load_lexicon(lang)
    norm = normalize(answer, lang)
    if category is AnswerCategory.BOOLEAN:
        slot = lex.boolean.get(norm)
        if slot is None:
            return Standardization(norm, True)
        std = lex.boolean_canonical[slot]
        return Standardization(std, std != norm)
    if category is AnswerCategory.NUMERIC:
        if norm in lex.numbers:
            std = lex.numbers[norm]
            return Standardization(std, std != norm)
        if norm and all(ch.isdecimal() for ch in norm):
            std = str(int(norm))
            return Standardization(std, std != norm)
        return Standardization(norm, True)
    if category is AnswerCategory.COLOR:
        std = lex.colors.get(norm)
        if std is None:
            return Standardization(norm, True)
        return Standardization(std, std != norm)
    return Standardization(norm, False)


# English question prefixes tracked by dataset statistics, most common first.
QUESTION_PREFIXES = (
    "is",
    "what is",
    "how many",
    "where",
    "what kind",
    "what are",
    "who",
    "are",
    "what color",
    "a",
    "what type",
    "what was",
    "do",
    "in",
    "besides",
    "does",
)
OTHER_PREFIX = "other"


def classify_question(question: str) -> str:
    """Classify an English question by its longest matching leading prefix.

    The match is token-wise: a prefix matches only when followed by a word
    boundary, and the longest matching prefix wins.
    """
    q = normalize(question, _EN)
    best: str | None = None
    for prefix in QUESTION_PREFIXES:
        if q == prefix or q.startswith(prefix + " "):
            if best is None or len(prefix) > len(best):
                best = prefix
    return best if best is not None else OTHER_PREFIX
