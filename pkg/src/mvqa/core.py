"""Core domain types and dataset I/O.

Everything downstream (generation, filtering, annotation, evaluation) moves
data through these types. All text is NFC-normalized on construction, and
JSONL parsing is strict: every bad input line becomes a diagnostic with its
line number, collected into one SchemaError.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import unicodedata
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Any, Iterable, Iterator, Mapping

from . import textproc

__all__ = [
    "BENCHMARK_LANGUAGES",
    "Benchmark",
    "BenchmarkExample",
    "CATEGORIES",
    "CandidateQA",
    "Caption",
    "DatasetStats",
    "FilterEntry",
    "LANGUAGES",
    "LanguageCode",
    "SOURCES",
    "SchemaError",
    "UnknownLanguageError",
    "candidate_id",
    "canonical_json",
    "dataset_stats",
    "format_percent",
    "language",
    "load_benchmark",
    "load_candidates",
    "load_captions",
    "nfc",
    "percent",
    "write_benchmark",
    "write_candidates",
]


def nfc(text: str) -> str:
    return unicodedata.normalize("NFC", text)


def canonical_json(obj: Any) -> str:
    """Deterministic single-line JSON: sorted keys, no spaces, raw UTF-8."""
    return json.dumps(obj, ensure_ascii=False, sort_keys=True, separators=(",", ":"))


def percent(count: int, total: int) -> float:
    """count/total as a percentage with 1 decimal, halves rounded away from zero."""
    if total <= 0:
        raise ValueError("total must be positive")
    q = (Decimal(count) * 100 / Decimal(total)).quantize(Decimal("0.1"), rounding=ROUND_HALF_UP)
    return float(q)


def format_percent(value: float) -> str:
    return f"{value:.1f}"


class UnknownLanguageError(ValueError):
    pass


class SchemaError(ValueError):
    """An input file violated the documented shape.

    ``diagnostics`` holds one human-readable message per offending line,
    each starting with ``line N:``.
    """

    def __init__(self, path: str | Path, diagnostics: Iterable[str]):
        self.path = str(path)
        self.diagnostics = list(diagnostics)
        preview = "; ".join(self.diagnostics[:3])
        if len(self.diagnostics) > 3:
            preview += "; ..."
        super().__init__(f"{self.path}: {len(self.diagnostics)} invalid line(s): {preview}")


@dataclass(frozen=True, slots=True)
class LanguageCode:
    """A supported language plus the switches the text layer keys off."""

    code: str
    name: str
    has_letter_case: bool
    whitespace_delimited: bool
    script: str

    def __str__(self) -> str:
        return self.code


_LANGUAGE_TABLE = (
    LanguageCode("en", "English", True, True, "Latin"),
    LanguageCode("fr", "French", True, True, "Latin"),
    LanguageCode("hi", "Hindi", False, True, "Devanagari"),
    LanguageCode("iw", "Hebrew", False, True, "Hebrew"),
    LanguageCode("ro", "Romanian", True, True, "Latin"),
    LanguageCode("th", "Thai", False, False, "Thai"),
    LanguageCode("zh", "Chinese", False, False, "Han"),
    LanguageCode("bn", "Bengali", False, True, "Bengali"),
    LanguageCode("de", "German", True, True, "Latin"),
    LanguageCode("id", "Indonesian", True, True, "Latin"),
    LanguageCode("ko", "Korean", False, True, "Hangul"),
    LanguageCode("pt", "Portuguese", True, True, "Latin"),
    LanguageCode("ru", "Russian", True, True, "Cyrillic"),
)

LANGUAGES: dict[str, LanguageCode] = {lang.code: lang for lang in _LANGUAGE_TABLE}

BENCHMARK_LANGUAGES = tuple(LANGUAGES[c] for c in ("en", "fr", "hi", "iw", "ro", "th", "zh"))


def language(code: str) -> LanguageCode:
    try:
        return LANGUAGES[code]
    except KeyError:
        supported = ", ".join(LANGUAGES)
        raise UnknownLanguageError(f"unknown language code {code!r} (supported: {supported})") from None


@dataclass(frozen=True, slots=True)
class Caption:
    """One image caption in one language; english_text is filled by step 1."""

    image_id: str
    lang: LanguageCode
    text: str
    english_text: str | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "text", nfc(self.text))
        if self.english_text is not None:
            object.__setattr__(self, "english_text", nfc(self.english_text))
        if not self.image_id:
            raise ValueError("image_id must be non-empty")
        if not self.text.strip():
            raise ValueError("text must be non-empty")


FILTER_VERDICTS = ("pass", "reject")


@dataclass(frozen=True, slots=True)
class FilterEntry:
    filter: str
    verdict: str
    detail: str = ""

    def __post_init__(self) -> None:
        if self.verdict not in FILTER_VERDICTS:
            raise ValueError(f"verdict must be one of {FILTER_VERDICTS}, got {self.verdict!r}")
        if not self.filter:
            raise ValueError("filter name must be non-empty")


SOURCES = ("transvq2a", "directqg")


def candidate_id(image_id: str, lang: LanguageCode, source: str, english_question: str, english_answer: str) -> str:
    """Content hash identity for a candidate. The target-language question and
    answer are deliberately excluded so translation never changes identity."""
    payload = "\x1f".join((nfc(image_id), lang.code, source, nfc(english_question), nfc(english_answer)))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


@dataclass(frozen=True, slots=True)
class CandidateQA:
    """A generated question/answer pair on its way through the filters.

    ``filter_trace`` is append-only and nothing may follow a reject; use
    ``with_trace`` to extend it.
    """

    id: str
    image_id: str
    lang: LanguageCode
    source: str
    english_question: str
    english_answer: str
    question: str
    answer: str
    english_caption: str | None = None
    filter_trace: tuple[FilterEntry, ...] = ()

    def __post_init__(self) -> None:
        for name in ("image_id", "english_question", "english_answer", "question", "answer"):
            object.__setattr__(self, name, nfc(getattr(self, name)))
        if self.english_caption is not None:
            object.__setattr__(self, "english_caption", nfc(self.english_caption))
        if not self.image_id:
            raise ValueError("image_id must be non-empty")
        if self.source not in SOURCES:
            raise ValueError(f"source must be one of {SOURCES}, got {self.source!r}")
        if self.source == "transvq2a" and not (self.english_question and self.english_answer):
            raise ValueError("transvq2a candidates need english_question and english_answer")
        for entry in self.filter_trace[:-1]:
            if entry.verdict == "reject":
                raise ValueError("filter_trace continues past a reject")
        if not self.id:
            object.__setattr__(
                self,
                "id",
                candidate_id(self.image_id, self.lang, self.source, self.english_question, self.english_answer),
            )

    @classmethod
    def make(
        cls,
        image_id: str,
        lang: LanguageCode,
        source: str,
        english_question: str,
        english_answer: str,
        question: str = "",
        answer: str = "",
        english_caption: str | None = None,
    ) -> "CandidateQA":
        return cls(
            id="",
            image_id=image_id,
            lang=lang,
            source=source,
            english_question=english_question,
            english_answer=english_answer,
            question=question,
            answer=answer,
            english_caption=english_caption,
        )

    @property
    def rejected(self) -> bool:
        return any(entry.verdict == "reject" for entry in self.filter_trace)

    def with_trace(self, entry: FilterEntry, **updates: Any) -> "CandidateQA":
        if self.rejected:
            raise ValueError("cannot extend the trace of a rejected candidate")
        return dataclasses.replace(self, filter_trace=self.filter_trace + (entry,), **updates)

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "id": self.id,
            "image_id": self.image_id,
            "lang": self.lang.code,
            "source": self.source,
            "english_question": self.english_question,
            "english_answer": self.english_answer,
            "question": self.question,
            "answer": self.answer,
            "filter_trace": [
                {"filter": e.filter, "verdict": e.verdict, "detail": e.detail} for e in self.filter_trace
            ],
        }
        if self.english_caption is not None:
            out["english_caption"] = self.english_caption
        return out

    @classmethod
    def from_dict(cls, obj: Mapping[str, Any]) -> "CandidateQA":
        trace = tuple(
            FilterEntry(e["filter"], e["verdict"], e.get("detail", "")) for e in obj.get("filter_trace", ())
        )
        return cls(
            id=obj["id"],
            image_id=obj["image_id"],
            lang=language(obj["lang"]),
            source=obj["source"],
            english_question=obj.get("english_question", ""),
            english_answer=obj.get("english_answer", ""),
            question=obj.get("question", ""),
            answer=obj.get("answer", ""),
            english_caption=obj.get("english_caption"),
            filter_trace=trace,
        )


CATEGORIES = ("boolean", "numeric", "color", "other")


@dataclass(frozen=True, slots=True)
class BenchmarkExample:
    """One human-validated benchmark row.

    Answers are non-empty and pairwise distinct after normalization; boolean
    examples only carry surfaces from the language's boolean lexicon. Unknown
    input keys survive round-trips in ``extra``.
    """

    id: str
    image_id: str
    lang: LanguageCode
    question: str
    answers: tuple[str, ...]
    category: str
    collection_flag: bool = False
    english_question: str | None = None
    extra: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for name in ("id", "image_id", "question"):
            object.__setattr__(self, name, nfc(getattr(self, name)))
            if not getattr(self, name):
                raise ValueError(f"{name} must be non-empty")
        object.__setattr__(self, "answers", tuple(nfc(a) for a in self.answers))
        if self.english_question is not None:
            object.__setattr__(self, "english_question", nfc(self.english_question))
        if self.category not in CATEGORIES:
            raise ValueError(f"category must be one of {CATEGORIES}, got {self.category!r}")
        if not self.answers:
            raise ValueError("answers must be non-empty")
        normalized = [textproc.normalize(a, self.lang) for a in self.answers]
        if len(set(normalized)) != len(normalized):
            raise ValueError("answers must be pairwise distinct after normalization")
        if self.category == "boolean":
            lex = textproc.load_lexicon(self.lang)
            for a, norm in zip(self.answers, normalized):
                if norm not in lex.boolean:
                    raise ValueError(f"boolean example answer {a!r} not in the {self.lang.code} boolean lexicon")

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "id": self.id,
            "image_id": self.image_id,
            "lang": self.lang.code,
            "question": self.question,
            "answers": list(self.answers),
            "category": self.category,
            "collection_flag": self.collection_flag,
        }
        if self.english_question is not None:
            out["english_question"] = self.english_question
        for key, value in self.extra.items():
            out.setdefault(key, value)
        return out


class Benchmark:
    """Ordered benchmark examples indexed by id and by language."""

    def __init__(self, examples: Iterable[BenchmarkExample]):
        self.examples: list[BenchmarkExample] = list(examples)
        self.by_id: dict[str, BenchmarkExample] = {}
        self.by_lang: dict[str, list[BenchmarkExample]] = {}
        for ex in self.examples:
            if ex.id in self.by_id:
                raise ValueError(f"duplicate example id {ex.id!r}")
            self.by_id[ex.id] = ex
            self.by_lang.setdefault(ex.lang.code, []).append(ex)

    def __len__(self) -> int:
        return len(self.examples)

    def __iter__(self) -> Iterator[BenchmarkExample]:
        return iter(self.examples)

    def languages(self) -> list[LanguageCode]:
        return [lang for lang in LANGUAGES.values() if lang.code in self.by_lang]


def _iter_jsonl(path: str | Path) -> Iterator[tuple[int, Any]]:
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            yield lineno, line


def _parse_obj(line: str, lineno: int, diagnostics: list[str]) -> dict[str, Any] | None:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        diagnostics.append(f"line {lineno}: not valid JSON ({exc.msg})")
        return None
    if not isinstance(obj, dict):
        diagnostics.append(f"line {lineno}: expected a JSON object")
        return None
    return obj


def _take_str(obj: dict, name: str, lineno: int, diagnostics: list[str], required: bool = True) -> str | None:
    value = obj.get(name)
    if value is None:
        if required:
            diagnostics.append(f"line {lineno}: {name}: missing")
        return None
    if not isinstance(value, str):
        diagnostics.append(f"line {lineno}: {name}: expected a string")
        return None
    return value


def load_captions(path: str | Path) -> list[Caption]:
    """Read captions.jsonl. Raises SchemaError listing every bad line."""
    captions: list[Caption] = []
    diagnostics: list[str] = []
    for lineno, line in _iter_jsonl(path):
        obj = _parse_obj(line, lineno, diagnostics)
        if obj is None:
            continue
        image_id = _take_str(obj, "image_id", lineno, diagnostics)
        lang_code = _take_str(obj, "lang", lineno, diagnostics)
        text = _take_str(obj, "text", lineno, diagnostics)
        english_text = _take_str(obj, "english_text", lineno, diagnostics, required=False)
        if image_id is None or lang_code is None or text is None:
            continue
        try:
            lang = language(lang_code)
        except UnknownLanguageError as exc:
            diagnostics.append(f"line {lineno}: lang: {exc}")
            continue
        try:
            captions.append(Caption(image_id=image_id, lang=lang, text=text, english_text=english_text))
        except ValueError as exc:
            diagnostics.append(f"line {lineno}: {exc}")
    if diagnostics:
        raise SchemaError(path, diagnostics)
    return captions


_BENCHMARK_FIELDS = ("id", "image_id", "lang", "question", "answers", "category", "collection_flag", "english_question")


def load_benchmark(path: str | Path) -> Benchmark:
    """Read benchmark.jsonl. Raises SchemaError listing every bad line."""
    examples: list[BenchmarkExample] = []
    diagnostics: list[str] = []
    seen_ids: dict[str, int] = {}
    for lineno, line in _iter_jsonl(path):
        obj = _parse_obj(line, lineno, diagnostics)
        if obj is None:
            continue
        ex_id = _take_str(obj, "id", lineno, diagnostics)
        image_id = _take_str(obj, "image_id", lineno, diagnostics)
        lang_code = _take_str(obj, "lang", lineno, diagnostics)
        question = _take_str(obj, "question", lineno, diagnostics)
        category = _take_str(obj, "category", lineno, diagnostics)
        english_question = _take_str(obj, "english_question", lineno, diagnostics, required=False)
        answers = obj.get("answers")
        if answers is None or not isinstance(answers, list) or not all(isinstance(a, str) for a in answers):
            diagnostics.append(f"line {lineno}: answers: expected a list of strings")
            answers = None
        collection_flag = obj.get("collection_flag", False)
        if not isinstance(collection_flag, bool):
            diagnostics.append(f"line {lineno}: collection_flag: expected a boolean")
            collection_flag = None
        if None in (ex_id, image_id, lang_code, question, category, answers, collection_flag):
            continue
        try:
            lang = language(lang_code)
        except UnknownLanguageError as exc:
            diagnostics.append(f"line {lineno}: lang: {exc}")
            continue
        if ex_id in seen_ids:
            diagnostics.append(f"line {lineno}: id: duplicate of line {seen_ids[ex_id]} ({ex_id!r})")
            continue
        extra = {k: v for k, v in obj.items() if k not in _BENCHMARK_FIELDS}
        try:
            example = BenchmarkExample(
                id=ex_id,
                image_id=image_id,
                lang=lang,
                question=question,
                answers=tuple(answers),
                category=category,
                collection_flag=collection_flag,
                english_question=english_question,
                extra=extra,
            )
        except ValueError as exc:
            diagnostics.append(f"line {lineno}: {exc}")
            continue
        seen_ids[ex_id] = lineno
        examples.append(example)
    if diagnostics:
        raise SchemaError(path, diagnostics)
    return Benchmark(examples)


def write_benchmark(benchmark: Benchmark, path: str | Path) -> None:
    """Write benchmark.jsonl: UTF-8, NFC, one canonical-field object per line."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ex in benchmark:
            fh.write(json.dumps(ex.to_dict(), ensure_ascii=False) + "\n")


def load_candidates(path: str | Path) -> list[CandidateQA]:
    candidates: list[CandidateQA] = []
    diagnostics: list[str] = []
    for lineno, line in _iter_jsonl(path):
        obj = _parse_obj(line, lineno, diagnostics)
        if obj is None:
            continue
        try:
            candidates.append(CandidateQA.from_dict(obj))
        except (KeyError, TypeError) as exc:
            diagnostics.append(f"line {lineno}: missing or malformed field: {exc}")
        except (ValueError, UnknownLanguageError) as exc:
            diagnostics.append(f"line {lineno}: {exc}")
    if diagnostics:
        raise SchemaError(path, diagnostics)
    return candidates


def write_candidates(candidates: Iterable[CandidateQA], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for cand in candidates:
            fh.write(json.dumps(cand.to_dict(), ensure_ascii=False) + "\n")


@dataclass(frozen=True)
class DatasetStats:
    """Per-language example counts and question-prefix percentages."""

    total: int
    counts: dict[str, int]
    prefix_pct: dict[str, dict[str, float]]

    def render(self, fmt: str = "text") -> str:
        langs = [c for c in LANGUAGES if c in self.counts]
        prefixes = list(textproc.QUESTION_PREFIXES) + [textproc.OTHER_PREFIX]
        count_rows = [("lang", "examples")] + [(c, str(self.counts[c])) for c in langs]
        count_rows.append(("total", str(self.total)))
        prefix_rows = [["prefix"] + langs]
        for p in prefixes:
            prefix_rows.append([p] + [format_percent(self.prefix_pct[c].get(p, 0.0)) for c in langs])
        if fmt == "markdown":
            def md(rows: list) -> str:
                lines = ["| " + " | ".join(r) + " |" for r in rows]
                lines.insert(1, "|" + "|".join(" --- " for _ in rows[0]) + "|")
                return "\n".join(lines)

            return md([list(r) for r in count_rows]) + "\n\n" + md(prefix_rows)
        if fmt == "json":
            return canonical_json({"total": self.total, "counts": self.counts, "prefix_pct": self.prefix_pct})
        widths = [max(len(r[i]) for r in prefix_rows) for i in range(len(prefix_rows[0]))]
        lines = [f"{c:<8}{n}" for c, n in count_rows]
        lines.append("")
        for row in prefix_rows:
            lines.append("  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)).rstrip())
        return "\n".join(lines)


def dataset_stats(benchmark: Benchmark) -> DatasetStats:
    """Counts per language plus the question-prefix distribution, computed over
    english_question where present (the prefix table is English)."""
    counts: dict[str, int] = {}
    buckets: dict[str, dict[str, int]] = {}
    for ex in benchmark:
        code = ex.lang.code
        counts[code] = counts.get(code, 0) + 1
        if ex.english_question is not None:
            text = ex.english_question
        elif ex.lang.code == "en":
            text = ex.question
        else:
            text = None
        prefix = textproc.classify_question(text) if text is not None else textproc.OTHER_PREFIX
        buckets.setdefault(code, {})
        buckets[code][prefix] = buckets[code].get(prefix, 0) + 1
    prefix_pct = {
        code: {p: percent(n, counts[code]) for p, n in per_lang.items()}
        for code, per_lang in buckets.items()
    }
    return DatasetStats(total=len(benchmark), counts=counts, prefix_pct=prefix_pct)
