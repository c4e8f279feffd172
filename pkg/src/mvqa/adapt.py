"""Cross-lingual adaptation transforms.

Translate-Train builds prompted training data in each target language from
English examples; Translate-Test wraps an English-only answerer with
translation on both sides. Both are pure data transforms; no training here.
"""
from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

from .backends import BackendError, Translator
from .core import LanguageCode, language, nfc

__all__ = [
    "PromptedExample",
    "build_prompt",
    "parse_prompt",
    "translate_test",
    "translate_train",
]

log = logging.getLogger(__name__)

_EN = language("en")

_PROMPT_RE = re.compile(r"Answer in ([a-z]{2}): (.*)", re.DOTALL)


def build_prompt(question: str, lang: LanguageCode) -> str:
    return f"Answer in {lang.code}: {question}"


def parse_prompt(prompt: str) -> tuple[str, str]:
    """Inverse of build_prompt: (lang code, question). The ": " right after
    the language code is the split point; the question may contain more."""
    m = _PROMPT_RE.fullmatch(prompt)
    if m is None:
        raise ValueError(f"not a prompt in the expected template: {prompt!r}")
    return m.group(1), m.group(2)


@dataclass(frozen=True, slots=True)
class PromptedExample:
    """One training row: the language-tagged prompt and its target answer."""

    prompt: str
    target_answer: str
    lang: LanguageCode

    def __post_init__(self) -> None:
        object.__setattr__(self, "prompt", nfc(self.prompt))
        object.__setattr__(self, "target_answer", nfc(self.target_answer))
        code, _ = parse_prompt(self.prompt)
        if code != self.lang.code:
            raise ValueError(f"prompt is tagged {code!r} but lang is {self.lang.code!r}")


def _as_english_pair(example: Sequence[str]) -> tuple[str, str]:
    if len(example) == 2:
        return example[0], example[1]
    if len(example) == 3:
        tag = example[2]
        code = tag.code if isinstance(tag, LanguageCode) else str(tag)
        if code != "en":
            raise ValueError(f"source examples must be English, got {code!r}")
        return example[0], example[1]
    raise ValueError(f"expected (question, answer[, en]) tuples, got {example!r}")


def translate_train(
    examples: Iterable[Sequence[str]],
    target_langs: Sequence[LanguageCode],
    translator: Translator,
    translate_answers: bool = True,
) -> list[PromptedExample]:
    """Build prompted examples for English plus every target language.

    The English split is always retained, first, regardless of the target
    list. ``translate_answers=False`` keeps answers English (the
    cross-lingual training setting). A translator failure skips that example
    for that language with a log entry; it never aborts the build.
    """
    pairs = [_as_english_pair(ex) for ex in examples]
    langs: list[LanguageCode] = [_EN]
    seen = {"en"}
    for lang in target_langs:
        if lang.code not in seen:
            seen.add(lang.code)
            langs.append(lang)

    out: list[PromptedExample] = []
    for lang in langs:
        for question, answer in pairs:
            if lang.code == "en":
                q, a = question, answer
            else:
                try:
                    q = translator.translate(question, _EN, lang)
                    a = translator.translate(answer, _EN, lang) if translate_answers else answer
                except BackendError as exc:
                    log.warning("translate_train: skipping %r for %s: %s", question, lang.code, exc)
                    continue
            out.append(PromptedExample(build_prompt(q, lang), a, lang))
    return out


def translate_test(
    question: str,
    lang: LanguageCode,
    translator: Translator,
    english_answerer: Callable[[str], str],
) -> str:
    """Answer a target-language question with an English-only answerer.

    Question goes to English, the answer comes back to ``lang``. An empty
    English answer is returned as-is (nothing to translate). Backend errors
    propagate: a missing language pair must never leak an English answer.
    """
    english_question = translator.translate(question, lang, _EN)
    english_answer = english_answerer(english_question)
    if not english_answer.strip():
        return ""
    return translator.translate(english_answer, _EN, lang)
