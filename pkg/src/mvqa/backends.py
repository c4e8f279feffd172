"""Pluggable model backends and their reference implementations.

Four operations feed the pipeline: caption/QA translation, question
generation from an English caption, answering a question against an English
context, and direct question generation for closed-class answers. The
reference implementations are deterministic and rule-based so the whole
toolkit runs offline on bundled demo data; the remote adapters speak a small
JSON-over-HTTP protocol and are what production deployments configure.

Every translator, reference or remote, satisfies the identity law:
translate(text, L, L) == text, byte for byte.
"""
from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Mapping, Protocol, runtime_checkable

import requests
import tomli

from . import textproc
from .core import LanguageCode, language

__all__ = [
    "BackendError",
    "BackendUnreachableError",
    "Backends",
    "Capabilities",
    "ConfigError",
    "DEFAULT_DISTRACTORS",
    "DirectQGRequest",
    "DirectQuestionGenerator",
    "EchoAnswerer",
    "LexiconTranslator",
    "QGOutput",
    "QuestionAnswerer",
    "QuestionGenerator",
    "RemoteDirectQuestionGenerator",
    "RemoteEndpoint",
    "RemoteQuestionAnswerer",
    "RemoteQuestionGenerator",
    "RemoteTranslator",
    "SerializedBackend",
    "TemplateDirectQuestionGenerator",
    "TemplateQuestionGenerator",
    "Translator",
    "UnsupportedLanguagePairError",
    "load_backends",
]

_EN = language("en")


class BackendError(RuntimeError):
    """A backend call failed (after retries, for remote backends)."""


class BackendUnreachableError(BackendError):
    """Could not connect to a remote backend endpoint at all."""


class UnsupportedLanguagePairError(BackendError):
    pass


class ConfigError(ValueError):
    """The backend configuration file is unusable."""


@dataclass(frozen=True)
class Capabilities:
    """What a backend promises: thread safety and, for translators, which
    (source, target) pairs it accepts. ``language_pairs=None`` means any."""

    concurrent_safe: bool = True
    language_pairs: frozenset[tuple[str, str]] | None = None

    def supports(self, source: str, target: str) -> bool:
        if source == target:
            return True
        if self.language_pairs is None:
            return True
        return (source, target) in self.language_pairs


@dataclass(frozen=True)
class QGOutput:
    """Question generation result: (question, answer) pairs, no duplicates,
    no empty questions or answers."""

    pairs: tuple[tuple[str, str], ...]

    def __post_init__(self) -> None:
        seen: set[tuple[str, str]] = set()
        for q, a in self.pairs:
            if not q:
                raise ValueError("QG pair with empty question")
            if not a:
                raise ValueError("QG pair with empty answer")
            if (q, a) in seen:
                raise ValueError(f"duplicate QG pair {(q, a)!r}")
            seen.add((q, a))


@dataclass(frozen=True)
class DirectQGRequest:
    """Ask for questions whose answer is a specific closed-class surface.

    ``answer`` must come from the language's boolean lexicon or its
    none-forms; ``caption`` is the image caption in that same language.
    """

    caption: str
    answer: str
    lang: LanguageCode

    def __post_init__(self) -> None:
        self.slot()  # validates

    def slot(self) -> str:
        """The answer class: "yes", "no", or "none"."""
        lex = textproc.load_lexicon(self.lang)
        norm = textproc.normalize(self.answer, self.lang)
        if norm in lex.boolean:
            return lex.boolean[norm]
        if norm in lex.none_forms:
            return "none"
        raise ValueError(
            f"answer {self.answer!r} is not in the {self.lang.code} boolean lexicon or none forms"
        )


@runtime_checkable
class Translator(Protocol):
    capabilities: Capabilities

    def translate(self, text: str, source: LanguageCode, target: LanguageCode) -> str: ...


@runtime_checkable
class QuestionGenerator(Protocol):
    capabilities: Capabilities

    def generate_qa(self, english_caption: str) -> QGOutput: ...


@runtime_checkable
class QuestionAnswerer(Protocol):
    capabilities: Capabilities

    def answer_from_context(self, question: str, context: str) -> str: ...


@runtime_checkable
class DirectQuestionGenerator(Protocol):
    capabilities: Capabilities

    def direct_generate(self, request: DirectQGRequest) -> list[str]: ...


def _strip_edge_punct(word: str) -> tuple[str, str, str]:
    """Split a whitespace token into (leading punct, core, trailing punct)."""
    import unicodedata

    start, end = 0, len(word)
    while start < end and unicodedata.category(word[start]).startswith("P"):
        start += 1
    while end > start and unicodedata.category(word[end - 1]).startswith("P"):
        end -= 1
    return word[:start], word[start:end], word[end:]


def _bundled_translator_dir() -> Path:
    return Path(str(resources.files("mvqa").joinpath("data", "translator")))


class LexiconTranslator:
    """Word-by-word demo translator backed by ``src-tgt.tsv`` tables.

    Lookup is casefolded; unknown words pass through unchanged; an empty
    right-hand side deletes the word; edge punctuation hugs its word. Only
    the pairs with a table file are supported (plus identity).
    """

    def __init__(self, table_dir: str | Path | None = None):
        directory = Path(table_dir) if table_dir is not None else _bundled_translator_dir()
        if not directory.is_dir():
            raise ConfigError(f"translator table directory not found: {directory}")
        self._tables: dict[tuple[str, str], dict[str, str]] = {}
        for path in sorted(directory.glob("*.tsv")):
            src, sep, tgt = path.stem.partition("-")
            if not sep or not src or not tgt:
                raise ConfigError(f"translator table {path.name}: name must be <src>-<tgt>.tsv")
            self._tables[(src, tgt)] = self._read_table(path)
        self.capabilities = Capabilities(
            concurrent_safe=True, language_pairs=frozenset(self._tables)
        )

    @staticmethod
    def _read_table(path: Path) -> dict[str, str]:
        table: dict[str, str] = {}
        for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
            line = raw.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            src, sep, tgt = line.partition("\t")
            src = src.strip()
            if not src or not sep:
                raise ConfigError(f"{path.name}:{lineno}: expected src<TAB>tgt")
            table[src.casefold()] = tgt.strip()
        return table

    def translate(self, text: str, source: LanguageCode, target: LanguageCode) -> str:
        if source.code == target.code:
            return text
        table = self._tables.get((source.code, target.code))
        if table is None:
            raise UnsupportedLanguagePairError(
                f"no translation table for {source.code}->{target.code}"
            )
        out: list[str] = []
        for word in text.split():
            prefix, core, suffix = _strip_edge_punct(word)
            repl = table.get(core.casefold()) if core else None
            if repl is None:
                out.append(word)
            elif repl == "":
                edges = prefix + suffix
                if edges:
                    out.append(edges)
            else:
                out.append(prefix + repl + suffix)
        return " ".join(out)


# Token classification shared by the template generator and the echo answerer.
_STOPWORDS = frozenset(
    """a an the this that these those and or of to with is are was were be been
    there here it its on in at under near behind above below beside by for
    from into over up down out as while during""".split()
)

_PREPOSITIONS = ("on", "in", "at", "under", "near", "behind", "above", "below", "beside")


def _plural(noun: str) -> bool:
    return noun.endswith("s") and not noun.endswith("ss")


def _be(noun: str) -> str:
    return "are" if _plural(noun) else "is"


def _english_rule_pairs(caption: str) -> list[tuple[str, str]]:
    """The shared rule table: counting, color, location, then topic fallback.

    Emits at most one pair per (rule, noun); first occurrence wins. Both the
    template generator and the echo answerer derive from this single function,
    which is what makes the generate-then-answer consistency check satisfiable
    by construction for reference backends.
    """
    lex = textproc.load_lexicon(_EN)
    toks = textproc.tokenize(textproc.normalize(caption, _EN), _EN).tokens

    def is_number(t: str) -> bool:
        return t in lex.numbers or (t and all(ch.isdecimal() for ch in t))

    def is_color(t: str) -> bool:
        return t in lex.colors

    def is_noun(t: str) -> bool:
        return t not in _STOPWORDS and not is_number(t) and not is_color(t)

    pairs: list[tuple[str, str]] = []
    seen: set[tuple[str, str]] = set()

    def add(rule: str, key: str, question: str, answer: str) -> None:
        if (rule, key) not in seen:
            seen.add((rule, key))
            pairs.append((question, answer))

    for i, tok in enumerate(toks[:-1]):
        if is_number(tok) and is_noun(toks[i + 1]):
            noun = toks[i + 1]
            add("count", noun, f"how many {noun}?", tok)
    for i, tok in enumerate(toks):
        if is_color(tok):
            noun = None
            if i + 1 < len(toks) and is_noun(toks[i + 1]):
                noun = toks[i + 1]
            elif i > 0 and is_noun(toks[i - 1]):
                noun = toks[i - 1]
            if noun is not None:
                add("color", noun, f"what color {_be(noun)} the {noun}?", tok)
    for i in range(len(toks) - 1, -1, -1):
        if toks[i] in _PREPOSITIONS and i + 1 < len(toks):
            subject = next((t for t in toks[:i] if is_noun(t)), None)
            if subject is not None:
                phrase = " ".join(toks[i:])
                add("where", subject, f"where {_be(subject)} the {subject}?", phrase)
            break
    for tok in toks:
        if is_noun(tok):
            add("topic", tok, "what is in the image?", tok)
            break
    return pairs


class TemplateQuestionGenerator:
    """Rule-based English question generation over caption tokens.

    A deterministic stand-in for a learned model: counting, color, location,
    and topic templates, one pair per (rule, noun).
    """

    capabilities = Capabilities()

    def generate_qa(self, english_caption: str) -> QGOutput:
        return QGOutput(tuple(_english_rule_pairs(english_caption)))


class EchoAnswerer:
    """Answers a question by regenerating the rule pairs for the context and
    looking the question up; unknown questions get an empty answer."""

    capabilities = Capabilities()

    def answer_from_context(self, question: str, context: str) -> str:
        table = {
            textproc.normalize(q, _EN): a for q, a in _english_rule_pairs(context)
        }
        return table.get(textproc.normalize(question, _EN), "")


DEFAULT_DISTRACTORS = ("cat", "dog", "car", "bird", "horse", "umbrella", "clock", "pizza")


class TemplateDirectQuestionGenerator:
    """Template questions for closed-class answers.

    yes: asks about a noun that is in the caption. no: asks about distractor
    nouns absent from it. none: asks for a count of an absent noun. The rules
    run in English; non-English requests route the caption in and the
    questions out through the supplied translator.
    """

    def __init__(
        self,
        translator: Translator | None = None,
        distractors: Iterable[str] = DEFAULT_DISTRACTORS,
    ):
        self._translator = translator
        self._distractors = tuple(distractors)
        concurrent = translator is None or translator.capabilities.concurrent_safe
        self.capabilities = Capabilities(concurrent_safe=concurrent)

    def direct_generate(self, request: DirectQGRequest) -> list[str]:
        slot = request.slot()
        if request.lang.code == "en":
            caption_en = request.caption
        else:
            if self._translator is None:
                raise UnsupportedLanguagePairError(
                    f"direct generation for {request.lang.code} needs a translator"
                )
            caption_en = self._translator.translate(request.caption, request.lang, _EN)

        lex = textproc.load_lexicon(_EN)
        toks = textproc.tokenize(textproc.normalize(caption_en, _EN), _EN).tokens
        nouns = [
            t
            for t in toks
            if t not in _STOPWORDS
            and t not in lex.colors
            and not (t in lex.numbers or all(ch.isdecimal() for ch in t))
        ]
        questions_en: list[str] = []
        if slot == "yes":
            if nouns:
                questions_en.append(f"is there a {nouns[0]} in the image?")
        elif slot == "no":
            absent = [d for d in self._distractors if not textproc.answer_in_caption(d, caption_en, _EN)]
            questions_en.extend(f"is there a {d} in the image?" for d in absent[:2])
        else:  # none
            absent = [d for d in self._distractors if not textproc.answer_in_caption(d, caption_en, _EN)]
            questions_en.extend(f"how many {d}s are in the image?" for d in absent[:1])

        if request.lang.code == "en":
            return questions_en
        assert self._translator is not None
        return [self._translator.translate(q, _EN, request.lang) for q in questions_en]


@dataclass(frozen=True)
class RemoteEndpoint:
    url: str
    timeout_s: float = 30.0
    retries: int = 2
    backoff_s: float = 0.5


def _call_remote(endpoint: RemoteEndpoint, payload: Mapping[str, Any]) -> Any:
    """POST the payload, return the "output" value. Connection failures become
    BackendUnreachableError; timeouts and 5xx are retried with backoff."""
    last_error: Exception | None = None
    unreachable = False
    for attempt in range(endpoint.retries + 1):
        if attempt:
            time.sleep(endpoint.backoff_s * (2 ** (attempt - 1)))
        try:
            resp = requests.post(endpoint.url, json=dict(payload), timeout=endpoint.timeout_s)
        except requests.exceptions.ConnectionError as exc:
            last_error, unreachable = exc, True
            continue
        except requests.exceptions.Timeout as exc:
            last_error, unreachable = exc, False
            continue
        if resp.status_code >= 500:
            last_error, unreachable = BackendError(f"{endpoint.url}: HTTP {resp.status_code}"), False
            continue
        if resp.status_code != 200:
            raise BackendError(f"{endpoint.url}: HTTP {resp.status_code}")
        try:
            body = resp.json()
        except ValueError as exc:
            raise BackendError(f"{endpoint.url}: response is not JSON") from exc
        if not isinstance(body, dict) or "output" not in body:
            raise BackendError(f'{endpoint.url}: response missing "output"')
        return body["output"]
    if unreachable:
        raise BackendUnreachableError(f"cannot reach backend at {endpoint.url}: {last_error}")
    raise BackendError(
        f"backend at {endpoint.url} failed after {endpoint.retries + 1} attempts: {last_error}"
    )


def _parse_pair_spec(specs: Iterable[str]) -> frozenset[tuple[str, str]]:
    pairs = set()
    for spec in specs:
        src, sep, tgt = spec.partition("-")
        if not sep or not src or not tgt:
            raise ConfigError(f"language pair {spec!r}: expected <src>-<tgt>")
        pairs.add((src, tgt))
    return frozenset(pairs)


class RemoteTranslator:
    def __init__(
        self,
        endpoint: RemoteEndpoint,
        language_pairs: frozenset[tuple[str, str]] | None = None,
        concurrent_safe: bool = True,
    ):
        self.endpoint = endpoint
        self.capabilities = Capabilities(concurrent_safe, language_pairs)

    def translate(self, text: str, source: LanguageCode, target: LanguageCode) -> str:
        if source.code == target.code:
            return text
        if not self.capabilities.supports(source.code, target.code):
            raise UnsupportedLanguagePairError(
                f"configured backend does not translate {source.code}->{target.code}"
            )
        out = _call_remote(
            self.endpoint,
            {"op": "translate", "text": text, "source": source.code, "target": target.code},
        )
        if not isinstance(out, str):
            raise BackendError("translate: expected a string output")
        return out


class RemoteQuestionGenerator:
    def __init__(self, endpoint: RemoteEndpoint, concurrent_safe: bool = True):
        self.endpoint = endpoint
        self.capabilities = Capabilities(concurrent_safe)

    def generate_qa(self, english_caption: str) -> QGOutput:
        out = _call_remote(self.endpoint, {"op": "generate_qa", "caption": english_caption})
        if not isinstance(out, list):
            raise BackendError("generate_qa: expected a list output")
        pairs = []
        for item in out:
            if not (isinstance(item, (list, tuple)) and len(item) == 2 and all(isinstance(x, str) for x in item)):
                raise BackendError(f"generate_qa: malformed pair {item!r}")
            pairs.append((item[0], item[1]))
        try:
            return QGOutput(tuple(pairs))
        except ValueError as exc:
            raise BackendError(f"generate_qa: {exc}") from exc


class RemoteQuestionAnswerer:
    def __init__(self, endpoint: RemoteEndpoint, concurrent_safe: bool = True):
        self.endpoint = endpoint
        self.capabilities = Capabilities(concurrent_safe)

    def answer_from_context(self, question: str, context: str) -> str:
        out = _call_remote(self.endpoint, {"op": "answer", "question": question, "context": context})
        if not isinstance(out, str):
            raise BackendError("answer: expected a string output")
        return out


class RemoteDirectQuestionGenerator:
    def __init__(self, endpoint: RemoteEndpoint, concurrent_safe: bool = True):
        self.endpoint = endpoint
        self.capabilities = Capabilities(concurrent_safe)

    def direct_generate(self, request: DirectQGRequest) -> list[str]:
        out = _call_remote(
            self.endpoint,
            {
                "op": "direct_generate",
                "caption": request.caption,
                "answer": request.answer,
                "lang": request.lang.code,
            },
        )
        if not isinstance(out, list) or not all(isinstance(q, str) for q in out):
            raise BackendError("direct_generate: expected a list of strings")
        return out


class SerializedBackend:
    """Proxy that serializes every method call on a backend whose capabilities
    say it is not concurrent-safe. Attribute reads pass through."""

    def __init__(self, inner: Any):
        self._inner = inner
        self._lock = threading.Lock()

    def __getattr__(self, name: str) -> Any:
        value = getattr(self._inner, name)
        if not callable(value):
            return value

        def locked(*args: Any, **kwargs: Any) -> Any:
            with self._lock:
                return value(*args, **kwargs)

        return locked


@dataclass
class Backends:
    """The four configured backends the pipeline and CLI draw from."""

    translator: Translator
    question_generator: QuestionGenerator
    question_answerer: QuestionAnswerer
    direct_question_generator: DirectQuestionGenerator


def _endpoint_from(section: Mapping[str, Any], name: str) -> RemoteEndpoint:
    url = section.get("endpoint")
    if not isinstance(url, str) or not url:
        raise ConfigError(f"[{name}] kind = \"remote\" requires an endpoint URL")
    return RemoteEndpoint(
        url=url,
        timeout_s=float(section.get("timeout_s", 30.0)),
        retries=int(section.get("retries", 2)),
        backoff_s=float(section.get("backoff_s", 0.5)),
    )


def load_backends(path: str | Path | None = None) -> Backends:
    """Build the backend set from a TOML file.

    Sections: [translator], [question_generator], [question_answerer],
    [direct_question_generator]; each takes kind = "reference" (default) or
    "remote" with an endpoint. Missing file contents default to the bundled
    reference implementations.
    """
    if path is None:
        data: dict[str, Any] = {}
    else:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"backend config not found: {p}")
        try:
            data = tomli.loads(p.read_text(encoding="utf-8"))
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"{p}: invalid TOML: {exc}") from exc

    def section(name: str) -> Mapping[str, Any]:
        sec = data.get(name, {})
        if not isinstance(sec, dict):
            raise ConfigError(f"[{name}] must be a table")
        kind = sec.get("kind", "reference")
        if kind not in ("reference", "remote"):
            raise ConfigError(f"[{name}] kind must be \"reference\" or \"remote\", got {kind!r}")
        return sec

    t_sec = section("translator")
    if t_sec.get("kind", "reference") == "remote":
        pairs = None
        if "language_pairs" in t_sec:
            raw = t_sec["language_pairs"]
            if not isinstance(raw, list) or not all(isinstance(s, str) for s in raw):
                raise ConfigError("[translator] language_pairs must be a list of \"src-tgt\" strings")
            pairs = _parse_pair_spec(raw)
        translator: Translator = RemoteTranslator(
            _endpoint_from(t_sec, "translator"),
            language_pairs=pairs,
            concurrent_safe=bool(t_sec.get("concurrent_safe", True)),
        )
    else:
        translator = LexiconTranslator(t_sec.get("table_dir"))

    qg_sec = section("question_generator")
    if qg_sec.get("kind", "reference") == "remote":
        question_generator: QuestionGenerator = RemoteQuestionGenerator(
            _endpoint_from(qg_sec, "question_generator"),
            concurrent_safe=bool(qg_sec.get("concurrent_safe", True)),
        )
    else:
        question_generator = TemplateQuestionGenerator()

    qa_sec = section("question_answerer")
    if qa_sec.get("kind", "reference") == "remote":
        question_answerer: QuestionAnswerer = RemoteQuestionAnswerer(
            _endpoint_from(qa_sec, "question_answerer"),
            concurrent_safe=bool(qa_sec.get("concurrent_safe", True)),
        )
    else:
        question_answerer = EchoAnswerer()

    dq_sec = section("direct_question_generator")
    if dq_sec.get("kind", "reference") == "remote":
        direct: DirectQuestionGenerator = RemoteDirectQuestionGenerator(
            _endpoint_from(dq_sec, "direct_question_generator"),
            concurrent_safe=bool(dq_sec.get("concurrent_safe", True)),
        )
    else:
        distractors = dq_sec.get("distractors", DEFAULT_DISTRACTORS)
        if not isinstance(distractors, (list, tuple)) or not all(isinstance(d, str) for d in distractors):
            raise ConfigError("[direct_question_generator] distractors must be a list of strings")
        direct = TemplateDirectQuestionGenerator(translator, distractors)

    return Backends(
        translator=translator,
        question_generator=question_generator,
        question_answerer=question_answerer,
        direct_question_generator=direct,
    )
