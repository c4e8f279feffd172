"""Caption-to-candidate generation pipeline.

Four steps per caption: translate the caption to English, generate English
QA pairs, translate surviving pairs to the target language, and test answer
containment against the original caption. Between steps 2 and 3 sits the
generate-then-answer consistency filter. Direct question generation for
closed-class answers runs beside the chain and bypasses the caption filter
by design (those answers are intentionally absent from captions).

Stage accounting mirrors the four fixed rows (Captions, English QAs,
Validated English QAs, Validated Multilingual QAs) with each validated row
reported as a percentage of the previous stage.
"""
from __future__ import annotations

import dataclasses
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

from . import textproc
from .backends import (
    BackendError,
    Backends,
    DirectQGRequest,
    SerializedBackend,
    Translator,
)
from .core import (
    CandidateQA,
    Caption,
    FilterEntry,
    LanguageCode,
    canonical_json,
    format_percent,
    language,
    percent,
)

__all__ = [
    "CaptionFailure",
    "GenerationRun",
    "PipelineConfig",
    "QGQA_RULES",
    "QgqaRule",
    "STAGE_ROWS",
    "StageRecord",
    "StageStats",
    "caption_answer_filter",
    "default_directqg_answers",
    "qgqa_consistency_filter",
    "run_corpus",
    "run_directqg",
    "stage_stats",
    "transvq2a",
]

_EN = language("en")

QGQA_RULES = ("normalized_exact", "token_f1")


@dataclass(frozen=True)
class QgqaRule:
    """How a computed answer must match the extracted one: exact equality of
    normalized strings, or token-level F1 at or above a threshold."""

    kind: str = "normalized_exact"
    threshold: float | None = None

    def __post_init__(self) -> None:
        if self.kind not in QGQA_RULES:
            raise ValueError(f"rule kind must be one of {QGQA_RULES}, got {self.kind!r}")
        if self.kind == "token_f1":
            if self.threshold is None or not (0.0 < self.threshold <= 1.0):
                raise ValueError("token_f1 rule needs a threshold in (0, 1]")
        elif self.threshold is not None:
            raise ValueError("threshold only applies to the token_f1 rule")


@dataclass(frozen=True)
class PipelineConfig:
    target_lang: LanguageCode
    qgqa_rule: QgqaRule = QgqaRule()
    directqg: bool = False
    directqg_answers: tuple[str, ...] | None = None
    parallelism: int = 1

    def validate(self) -> None:
        """Raises ValueError on unusable settings, before any backend call."""
        if self.parallelism < 1:
            raise ValueError("parallelism must be >= 1")
        if self.directqg_answers is not None and not self.directqg:
            raise ValueError("directqg_answers given but directqg is disabled")
        if self.directqg:
            for surface in self.resolved_directqg_answers():
                # DirectQGRequest construction enforces the lexicon invariant
                DirectQGRequest(caption="-", answer=surface, lang=self.target_lang)

    def resolved_directqg_answers(self) -> tuple[str, ...]:
        if self.directqg_answers is not None:
            return self.directqg_answers
        return default_directqg_answers(self.target_lang)


def default_directqg_answers(lang: LanguageCode) -> tuple[str, ...]:
    """The canonical yes, no, and none surfaces for the language."""
    lex = textproc.load_lexicon(lang)
    out = [lex.boolean_canonical[slot] for slot in ("yes", "no") if slot in lex.boolean_canonical]
    for canon in lex.none_forms.values():
        out.append(canon)
        break
    return tuple(out)


STAGE_ROWS = (
    "Captions",
    "English QAs",
    "Validated English QAs",
    "Validated Multilingual QAs",
)


@dataclass(frozen=True)
class StageRecord:
    name: str
    count_in: int
    count_out: int
    pct_of_previous: float | None

    def __post_init__(self) -> None:
        if self.count_out > self.count_in:
            raise ValueError(f"stage {self.name}: count_out exceeds count_in")

    def cell(self) -> str:
        if self.pct_of_previous is None:
            return str(self.count_out)
        return f"{self.count_out} ({format_percent(self.pct_of_previous)}%)"


def stage_record(name: str, count_in: int, count_out: int) -> StageRecord:
    """Build a validated-stage record; pct is omitted when nothing came in."""
    pct = percent(count_out, count_in) if count_in > 0 else None
    return StageRecord(name, count_in, count_out, pct)


@dataclass(frozen=True)
class StageStats:
    lang: str
    rows: tuple[StageRecord, ...]


@dataclass(frozen=True)
class CaptionFailure:
    image_id: str
    lang: str
    stage: str
    error: str


@dataclass
class GenerationRun:
    target_lang: LanguageCode
    passed: list[CandidateQA]
    rejected: list[CandidateQA]
    stats: StageStats
    directqg_count: int
    failures: list[CaptionFailure]
    config: dict[str, Any]

    def report_dict(self) -> dict[str, Any]:
        return {
            "target_lang": self.target_lang.code,
            "config": self.config,
            "stages": [
                {
                    "name": row.name,
                    "count_in": row.count_in,
                    "count_out": row.count_out,
                    "pct_of_previous": row.pct_of_previous,
                }
                for row in self.stats.rows
            ],
            "directqg_generated": self.directqg_count,
            "passed": len(self.passed),
            "rejected": len(self.rejected),
            "failures": [dataclasses.asdict(f) for f in self.failures],
        }


def _token_f1(gold: str, computed: str) -> float:
    from collections import Counter

    gold_toks = textproc.tokenize(textproc.normalize(gold, _EN), _EN).tokens
    comp_toks = textproc.tokenize(textproc.normalize(computed, _EN), _EN).tokens
    if not gold_toks or not comp_toks:
        return 1.0 if gold_toks == comp_toks else 0.0
    overlap = sum((Counter(gold_toks) & Counter(comp_toks)).values())
    if overlap == 0:
        return 0.0
    precision = overlap / len(comp_toks)
    recall = overlap / len(gold_toks)
    return 2 * precision * recall / (precision + recall)


def _qgqa_match(gold: str, computed: str, rule: QgqaRule) -> tuple[bool, str]:
    if rule.kind == "normalized_exact":
        ok = textproc.normalize(gold, _EN) == textproc.normalize(computed, _EN)
        return ok, f"model answered {computed!r}"
    score = _token_f1(gold, computed)
    assert rule.threshold is not None
    return score >= rule.threshold, f"model answered {computed!r}, token_f1={score:.3f}"


def qgqa_consistency_filter(
    candidates: Iterable[CandidateQA],
    qa_backend: Any,
    rule: QgqaRule = QgqaRule(),
) -> tuple[list[CandidateQA], list[CandidateQA]]:
    """Re-answer each candidate's English question from its English caption
    and compare with the extracted answer. Backend failures reject the
    candidate (conservative), they never abort the run."""
    passed: list[CandidateQA] = []
    rejected: list[CandidateQA] = []
    for cand in candidates:
        if cand.english_caption is None:
            raise ValueError(f"candidate {cand.id}: english_caption is required by this filter")
        try:
            computed = qa_backend.answer_from_context(cand.english_question, cand.english_caption)
        except BackendError as exc:
            entry = FilterEntry("qgqa_consistency", "reject", f"backend_error: {exc}")
            rejected.append(cand.with_trace(entry))
            continue
        ok, detail = _qgqa_match(cand.english_answer, computed, rule)
        entry = FilterEntry("qgqa_consistency", "pass" if ok else "reject", detail)
        (passed if ok else rejected).append(cand.with_trace(entry))
    return passed, rejected


def caption_answer_filter(
    candidates: Iterable[CandidateQA],
    original_caption: Caption,
    translator: Translator,
) -> tuple[list[CandidateQA], list[CandidateQA]]:
    """Keep candidates whose answer appears in the original caption.

    Boolean-category answers pass unconditionally. When the candidate's
    language differs from the caption's, the answer is back-translated into
    the caption's language first. Translator failures reject (conservative).
    """
    passed: list[CandidateQA] = []
    rejected: list[CandidateQA] = []
    for cand in candidates:
        category = textproc.answer_category(cand.answer, cand.lang)
        if category is textproc.AnswerCategory.BOOLEAN:
            entry = FilterEntry("caption_answer", "pass", "boolean answer, containment not required")
            passed.append(cand.with_trace(entry))
            continue
        if cand.lang.code == original_caption.lang.code:
            probe = cand.answer
            note = ""
        else:
            try:
                probe = translator.translate(cand.answer, cand.lang, original_caption.lang)
            except BackendError as exc:
                entry = FilterEntry("caption_answer", "reject", f"backend_error: {exc}")
                rejected.append(cand.with_trace(entry))
                continue
            note = f" (answer back-translated to {original_caption.lang.code}: {probe!r})"
        ok = textproc.answer_in_caption(probe, original_caption.text, original_caption.lang)
        detail = ("answer found in caption" if ok else "answer not found in caption") + note
        entry = FilterEntry("caption_answer", "pass" if ok else "reject", detail)
        (passed if ok else rejected).append(cand.with_trace(entry))
    return passed, rejected


def _english_caption(caption: Caption, translator: Translator) -> str:
    if caption.lang.code == "en":
        return caption.text
    if caption.english_text:
        return caption.english_text
    return translator.translate(caption.text, caption.lang, _EN)


def _generate_english(caption: Caption, backends: Backends, target: LanguageCode) -> list[CandidateQA]:
    """Steps 1 and 2: English caption, then English QA pairs."""
    english = _english_caption(caption, backends.translator)
    qg_out = backends.question_generator.generate_qa(english)
    return [
        CandidateQA.make(
            caption.image_id,
            target,
            "transvq2a",
            english_question=q,
            english_answer=a,
            english_caption=english,
        )
        for q, a in qg_out.pairs
    ]


def _translate_pairs(
    candidates: Iterable[CandidateQA], translator: Translator, target: LanguageCode
) -> list[CandidateQA]:
    """Step 3: fill the target-language question and answer (identity for en)."""
    out = []
    for cand in candidates:
        q = translator.translate(cand.english_question, _EN, target)
        a = translator.translate(cand.english_answer, _EN, target)
        out.append(dataclasses.replace(cand, question=q, answer=a))
    return out


def transvq2a(caption: Caption, backends: Backends, config: PipelineConfig) -> list[CandidateQA]:
    """Steps 1-3 for one caption, no filtering: candidates with English
    provenance and target-language question/answer filled in."""
    english_cands = _generate_english(caption, backends, config.target_lang)
    return _translate_pairs(english_cands, backends.translator, config.target_lang)


def run_directqg(
    captions: Iterable[Caption], backends: Backends, config: PipelineConfig
) -> list[CandidateQA]:
    """Direct generation of closed-class-answer questions for each caption.

    The request caption must be in the target language; captions in other
    languages are routed through the translator (via English)."""
    out: list[CandidateQA] = []
    for caption in captions:
        out.extend(_directqg_for_caption(caption, backends, config))
    return out


def _directqg_for_caption(
    caption: Caption, backends: Backends, config: PipelineConfig
) -> list[CandidateQA]:
    target = config.target_lang
    if caption.lang.code == target.code:
        target_caption = caption.text
        english = caption.english_text
    else:
        english = _english_caption(caption, backends.translator)
        target_caption = english if target.code == "en" else backends.translator.translate(english, _EN, target)
    out: list[CandidateQA] = []
    for surface in config.resolved_directqg_answers():
        request = DirectQGRequest(caption=target_caption, answer=surface, lang=target)
        slot = request.slot()
        questions = backends.direct_question_generator.direct_generate(request)
        for q in questions:
            out.append(
                CandidateQA(
                    id="",
                    image_id=caption.image_id,
                    lang=target,
                    source="directqg",
                    english_question=q if target.code == "en" else "",
                    english_answer=slot,
                    question=q,
                    answer=surface,
                    english_caption=english,
                    filter_trace=(
                        FilterEntry("directqg", "pass", "closed-class answer; filters bypassed by design"),
                    ),
                )
            )
    return out


@dataclass
class _CaptionOutcome:
    caption: Caption
    failure: CaptionFailure | None = None
    generated: int = 0
    qgqa_passed: int = 0
    passed: list[CandidateQA] = field(default_factory=list)
    rejected: list[CandidateQA] = field(default_factory=list)
    direct: list[CandidateQA] = field(default_factory=list)


def _process_caption(caption: Caption, backends: Backends, config: PipelineConfig) -> _CaptionOutcome:
    outcome = _CaptionOutcome(caption)

    def fail(stage: str, exc: Exception) -> _CaptionOutcome:
        return _CaptionOutcome(
            caption,
            failure=CaptionFailure(caption.image_id, caption.lang.code, stage, str(exc)),
        )

    try:
        english_cands = _generate_english(caption, backends, config.target_lang)
    except BackendError as exc:
        return fail("generate", exc)

    qgqa_passed, qgqa_rejected = qgqa_consistency_filter(
        english_cands, backends.question_answerer, config.qgqa_rule
    )
    try:
        translated = _translate_pairs(qgqa_passed, backends.translator, config.target_lang)
    except BackendError as exc:
        return fail("translate_qa", exc)

    caption_with_english = caption
    if translated and caption.english_text is None:
        caption_with_english = dataclasses.replace(caption, english_text=translated[0].english_caption)
    final_passed, final_rejected = caption_answer_filter(
        translated, caption_with_english, backends.translator
    )

    direct: list[CandidateQA] = []
    if config.directqg:
        try:
            direct = _directqg_for_caption(caption_with_english, backends, config)
        except BackendError as exc:
            return fail("directqg", exc)

    outcome.generated = len(english_cands)
    outcome.qgqa_passed = len(qgqa_passed)
    outcome.passed = final_passed
    outcome.rejected = qgqa_rejected + final_rejected
    outcome.direct = direct
    return outcome


def _sort_key(cand: CandidateQA) -> tuple[str, str]:
    return (cand.id, canonical_json(cand.to_dict()))


def run_corpus(
    captions: Sequence[Caption], backends: Backends, config: PipelineConfig
) -> GenerationRun:
    """Run the full chain over a corpus.

    A caption whose generation or translation step fails is skipped whole and
    recorded; filter-stage backend failures reject individual candidates
    instead. Output ordering is sorted by candidate id (ties broken by
    content), so results do not depend on parallelism.
    """
    config.validate()
    effective = backends
    if config.parallelism > 1:
        def guard(backend: Any) -> Any:
            if not backend.capabilities.concurrent_safe:
                return SerializedBackend(backend)
            return backend

        effective = Backends(
            translator=guard(backends.translator),
            question_generator=guard(backends.question_generator),
            question_answerer=guard(backends.question_answerer),
            direct_question_generator=guard(backends.direct_question_generator),
        )

    if config.parallelism == 1:
        outcomes = [_process_caption(c, effective, config) for c in captions]
    else:
        with ThreadPoolExecutor(max_workers=config.parallelism) as pool:
            outcomes = list(pool.map(lambda c: _process_caption(c, effective, config), captions))

    failures = [o.failure for o in outcomes if o.failure is not None]
    completed = [o for o in outcomes if o.failure is None]

    generated = sum(o.generated for o in completed)
    qgqa_passed = sum(o.qgqa_passed for o in completed)
    passed = sorted((c for o in completed for c in o.passed), key=_sort_key)
    direct = sorted((c for o in completed for c in o.direct), key=_sort_key)
    rejected = sorted((c for o in completed for c in o.rejected), key=_sort_key)
    multilingual = len(passed)

    rows = (
        StageRecord("Captions", len(captions), len(completed), None),
        StageRecord("English QAs", generated, generated, None),
        stage_record("Validated English QAs", generated, qgqa_passed),
        stage_record("Validated Multilingual QAs", qgqa_passed, multilingual),
    )
    config_snapshot = {
        "target_lang": config.target_lang.code,
        "qgqa_rule": {"kind": config.qgqa_rule.kind, "threshold": config.qgqa_rule.threshold},
        "directqg": config.directqg,
        "directqg_answers": list(config.resolved_directqg_answers()) if config.directqg else [],
        "parallelism": config.parallelism,
    }
    return GenerationRun(
        target_lang=config.target_lang,
        passed=passed + direct,
        rejected=rejected,
        stats=StageStats(config.target_lang.code, rows),
        directqg_count=len(direct),
        failures=sorted(failures, key=lambda f: (f.image_id, f.lang, f.stage)),
        config=config_snapshot,
    )


def stage_stats(runs: "GenerationRun | Sequence[GenerationRun]", fmt: str = "text") -> str:
    """Render stage rows as a table, one column per run's target language."""
    if isinstance(runs, GenerationRun):
        runs = [runs]
    if not runs:
        raise ValueError("no runs to render")
    header = ["stage"] + [run.stats.lang for run in runs]
    by_name = [{row.name: row for row in run.stats.rows} for run in runs]
    names = list(runs[0].stats.rows)
    table = [header]
    for record in names:
        row = [record.name]
        for stats in by_name:
            entry = stats.get(record.name)
            row.append(entry.cell() if entry is not None else "")
        table.append(row)
    if fmt == "csv":
        import csv
        import io

        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerows(table)
        return buf.getvalue()
    if fmt != "text":
        raise ValueError(f"unknown format {fmt!r} (expected text or csv)")
    widths = [max(len(row[i]) for row in table) for i in range(len(header))]
    lines = ["  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)).rstrip() for row in table]
    return "\n".join(lines)
