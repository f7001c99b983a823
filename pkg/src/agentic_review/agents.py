"""
评审智能体模块
每个智能体渲染自己的提示词模板，经网关发起一次调用，再把输出解析成类型化产物
"""

import json
import logging
import re
from typing import Any, Optional, Sequence, Union

from pydantic import ValidationError

from .errors import (
    CountMismatch,
    ParseError,
    PreconditionError,
    SchemaMismatch,
    ScoreOutOfRange,
)
from .llm import DEFAULT_TEMPERATURE, CompletionRequest, LLMGateway
from .parsing import bullet_items, cited_papers, extract_json, require_keys, require_list, split_sections, strip_markup
from .prompts import TemplateLibrary
from .types import (
    Aspect,
    DomainAnalysis,
    InterrogationLog,
    LiteratureContext,
    MissingItem,
    PaperArtifact,
    QAPair,
    Reference,
    Review,
    ReviewGuidelines,
    StructuredSummary,
    dedupe_references,
    scrub_citation_artifacts,
    validate_reference,
)

logger = logging.getLogger(__name__)

NARRATIVE_SECTIONS = ("Domain History", "Open Problems", "Significance Criteria")
TRUNCATION_MARKER = "[... paper text truncated after {n} characters ...]"

_RATING_LINE = re.compile(
    r"^\W*(?:overall\s+)?(?:rating|score|decision\s+score)\W*:?\s*\**\s*(10|[1-9])(?:\.0+)?\b",
    re.IGNORECASE | re.MULTILINE,
)
_LEADING_INT = re.compile(r"^\s*(-?\d+(?:\.\d+)?)")
_REVIEW_LIST_FIELDS = ("strengths", "weaknesses", "suggestions", "questions")
_PROSE_SECTION_WORDS = {
    "summary": ("summary",),
    "strengths": ("strength",),
    "weaknesses": ("weakness",),
    "suggestions": ("suggestion", "improvement"),
    "questions": ("question",),
}


def truncate_paper(text: str, budget: int) -> str:
    """超过字符预算时保留前 budget 个字符并追加标记行"""
    if len(text) <= budget:
        return text
    logger.warning(f"Paper text has {len(text)} characters, truncating to {budget}")
    return text[:budget] + "\n" + TRUNCATION_MARKER.format(n=budget)


def render_qa_pairs(log: InterrogationLog) -> str:
    return "".join(
        f"Question {i}:\n{pair.question}\nAnswer {i}:\n{pair.answer}\n\n"
        for i, pair in enumerate(log.pairs, start=1)
    )


def _dumps(value: Any) -> str:
    return json.dumps(value, indent=2, ensure_ascii=False)


def _validation_to_schema(error: ValidationError, path: str) -> SchemaMismatch:
    first = error.errors()[0]
    location = "".join(f"[{part}]" if isinstance(part, int) else f".{part}" for part in first["loc"])
    return SchemaMismatch(first["msg"], f"{path}{location}")


def parse_references(items: Any, path: str = "$.references", *, strict: bool = False) -> list[Reference]:
    """
    按文献综述 JSON 模式解析参考文献列表

    标题为空的条目被丢弃，含引用残留的字段被清洗，两者都会记录日志；
    严格模式下拒绝未知字段
    """
    references = []
    for index, item in enumerate(require_list(items, path)):
        item_path = f"{path}[{index}]"
        if not isinstance(item, dict):
            raise SchemaMismatch(f"expected an object, got {type(item).__name__}", item_path)
        try:
            ref = Reference.model_validate(item)
        except ValidationError as e:
            raise _validation_to_schema(e, item_path) from e
        if strict and ref.unknown_fields:
            raise SchemaMismatch(f"unknown fields {sorted(ref.unknown_fields)}", item_path)

        violations = validate_reference(ref)
        if any(v.startswith("title:") for v in violations):
            logger.warning(f"Dropping reference at {item_path}: empty title")
            continue
        if violations:
            logger.warning(f"Scrubbing reference {ref.title!r}: {'; '.join(violations)}")
            ref = ref.scrubbed()
        references.append(ref)
    return references


def parse_missing_items(obj: Any, key: str, *, strict: bool = False) -> list[MissingItem]:
    path = f"$.{key}"
    if key not in obj:
        if strict:
            raise SchemaMismatch(f"missing key {key!r}", path)
        logger.warning(f"Scout output has no {key!r}, treating as empty")
        return []
    items = []
    for index, entry in enumerate(require_list(obj[key], path)):
        entry = require_keys(entry, ("name", "reference", "reason"), f"{path}[{index}]")
        items.append(
            MissingItem(name=str(entry["name"]), reference=str(entry["reference"]), reason=str(entry["reason"]))
        )
    return items


def _parse_rating(value: Any, *, strict: bool) -> Optional[int]:
    if isinstance(value, bool) or value is None:
        score: Optional[float] = None
    elif isinstance(value, (int, float)):
        score = float(value)
    else:
        match = _LEADING_INT.match(str(value))
        score = float(match.group(1)) if match else None

    if score is None or score != int(score) or not 1 <= score <= 10:
        if strict:
            raise ScoreOutOfRange("rating", value)
        logger.warning(f"Ignoring unusable review rating {value!r}")
        return None
    return int(score)


def _as_items(value: Any) -> tuple[str, ...]:
    if value is None:
        return ()
    if isinstance(value, (list, tuple)):
        return tuple(str(item).strip() for item in value if str(item).strip())
    text = str(value)
    return tuple(strip_markup(item) for item in bullet_items(text)) or ((text.strip(),) if text.strip() else ())


def _review_from_json(obj: dict[str, Any], text: str, *, requests_score: bool, strict: bool) -> Review:
    lowered = {key.lower(): value for key, value in obj.items()}
    score = None
    if requests_score:
        for key in ("rating", "decision_score", "score", "overall score"):
            if key in lowered:
                score = _parse_rating(lowered[key], strict=strict)
                break
        else:
            logger.warning("Review JSON carries no rating field")
    return Review(
        summary=str(lowered.get("summary") or "").strip(),
        raw_text=text,
        decision_score=score,
        **{name: _as_items(lowered.get(name)) for name in _REVIEW_LIST_FIELDS},
    )


def _review_from_prose(text: str, *, requests_score: bool) -> Review:
    collected: dict[str, list[str]] = {name: [] for name in _PROSE_SECTION_WORDS}
    for title, body in split_sections(text):
        lowered = title.lower()
        for name, words in _PROSE_SECTION_WORDS.items():
            if lowered and any(word in lowered for word in words):
                if name == "summary":
                    collected[name].extend(strip_markup(line) for line in body if line.strip())
                else:
                    items = bullet_items("\n".join(body))
                    lines = items or [line for line in body if line.strip()]
                    collected[name].extend(strip_markup(line) for line in lines)
                break

    score = None
    if requests_score:
        match = _RATING_LINE.search(text)
        if match:
            score = int(match.group(1))
        else:
            logger.warning("No rating found in prose review")
    return Review(
        summary="\n".join(collected["summary"]),
        raw_text=text,
        decision_score=score,
        **{name: tuple(collected[name]) for name in _REVIEW_LIST_FIELDS},
    )


def parse_review(text: str, *, requests_score: bool = True, strict: bool = False) -> Review:
    """
    解析评审生成器的输出

    优先解析 JSON 对象；找不到 JSON 时按 Summary/Strengths/Weaknesses 等标题拆分正文
    """
    try:
        obj = extract_json(text)
    except ParseError:
        obj = None
    if isinstance(obj, dict):
        return _review_from_json(obj, text, requests_score=requests_score, strict=strict)
    logger.debug("Review output is not a JSON object, using headed-prose fallback")
    return _review_from_prose(text, requests_score=requests_score)


def _normalize_aspects(aspect: Union[Aspect, Sequence[Aspect]]) -> tuple[Aspect, ...]:
    aspects = (aspect,) if isinstance(aspect, Aspect) else tuple(aspect)
    if not aspects:
        raise PreconditionError("at least one aspect is required")
    if Aspect.NOVELTY_SIGNIFICANCE in aspects and len(aspects) > 1:
        raise PreconditionError("novelty questions use their own prompt and cannot be batched")
    return aspects


class Agents:
    """全部评审智能体，共享一个网关"""

    def __init__(
        self,
        gateway: LLMGateway,
        *,
        templates: Optional[TemplateLibrary] = None,
        temperature: float = DEFAULT_TEMPERATURE,
        strict: bool = False,
        paper_char_budget: int = 200_000,
    ):
        self.gateway = gateway
        self.templates = templates or TemplateLibrary()
        self.temperature = temperature
        self.strict = strict
        self.paper_char_budget = paper_char_budget

    async def _call(self, agent_name: str, template_name: str, *, enable_search: bool, **values: Any) -> str:
        system_prompt, user_prompt = self.templates.get(template_name).render(**values)
        request = CompletionRequest(
            agent_name=agent_name,
            system_prompt=system_prompt,
            user_prompt=user_prompt,
            temperature=self.temperature,
            enable_search=enable_search,
        )
        response = await self.gateway.complete(request)
        return response.text

    def _paper_text(self, paper: PaperArtifact) -> str:
        return truncate_paper(paper.full_text, self.paper_char_budget)

    def _context_values(
        self, summary: StructuredSummary, context: LiteratureContext, paper: PaperArtifact
    ) -> dict[str, str]:
        return {
            "summary": summary.text,
            "domain_narrative": context.domain_narrative,
            "literature_review": _dumps(context.literature_review_payload()),
            "missing_baselines_datasets": _dumps(context.missing_payload()),
            "paper_text": self._paper_text(paper),
            "cutoff_date": paper.cutoff_date.isoformat(),
        }

    async def summarize(self, paper: PaperArtifact) -> StructuredSummary:
        if not paper.full_text.strip():
            raise PreconditionError("paper text is empty")
        text = await self._call("summarizer", "summarizer", enable_search=False, paper_text=self._paper_text(paper))
        return StructuredSummary.from_text(text)

    async def initial_literature_review(self, paper: PaperArtifact) -> tuple[DomainAnalysis, list[Reference]]:
        """
        初始文献检索（联网）

        Returns:
            tuple[DomainAnalysis, list[Reference]]: 领域分析与去重后的参考文献

        Raises:
            NoJsonFound: 输出中没有 JSON
            SchemaMismatch: 缺少 domain_analysis 或 references
        """
        if not paper.abstract_block.strip():
            raise PreconditionError("paper has no abstract block")
        text = await self._call(
            "literature_reviewer",
            "literature_reviewer",
            enable_search=True,
            cutoff_date=paper.cutoff_date.isoformat(),
            paper_abstract=paper.abstract_block,
        )
        obj = require_keys(extract_json(text), ("domain_analysis", "references"))
        try:
            analysis = DomainAnalysis.model_validate(obj["domain_analysis"])
        except ValidationError as e:
            raise _validation_to_schema(e, "$.domain_analysis") from e
        references = dedupe_references(parse_references(obj["references"], strict=self.strict))
        logger.info(f"Initial literature review: {analysis.specific_subfield}, {len(references)} references")
        return analysis, references

    async def expand_literature(self, current: Sequence[Reference], paper: PaperArtifact) -> list[Reference]:
        """一轮扩展检索，只返回 current 中没有的新文献"""
        text = await self._call(
            "literature_expander",
            "literature_expander",
            enable_search=True,
            cutoff_date=paper.cutoff_date.isoformat(),
            current_references_json=_dumps([ref.model_dump(mode="json") for ref in current]),
        )
        obj = extract_json(text)
        if isinstance(obj, dict) and "references" in obj:
            items, path = obj["references"], "$.references"
        else:
            items, path = obj, "$"
        new = dedupe_references(parse_references(items, path, strict=self.strict), existing=current)
        logger.info(f"Literature expansion added {len(new)} references")
        return new

    async def build_domain_narrative(self, context: LiteratureContext) -> str:
        if not context.references:
            raise PreconditionError("domain narrative needs at least one reference")
        narrative = await self._call(
            "historian",
            "historian",
            enable_search=False,
            literature_review_json=_dumps(context.literature_review_payload()),
        )
        lowered = narrative.lower()
        missing = [name for name in NARRATIVE_SECTIONS if name.lower() not in lowered]
        if missing:
            logger.warning(f"Domain narrative lacks sections: {', '.join(missing)}")
        return narrative

    async def scout_baselines(self, paper: PaperArtifact) -> tuple[list[MissingItem], list[MissingItem]]:
        text = await self._call(
            "baseline_scout",
            "baseline_scout",
            enable_search=True,
            cutoff_date=paper.cutoff_date.isoformat(),
            paper_text=self._paper_text(paper),
        )
        obj = extract_json(text)
        if not isinstance(obj, dict):
            raise SchemaMismatch(f"expected an object, got {type(obj).__name__}")
        baselines = parse_missing_items(obj, "missing_baselines", strict=self.strict)
        datasets = parse_missing_items(obj, "missing_datasets", strict=self.strict)
        logger.info(f"Baseline scout: {len(baselines)} missing baselines, {len(datasets)} missing datasets")
        return baselines, datasets

    async def generate_questions(
        self,
        aspect: Union[Aspect, Sequence[Aspect]],
        summary: StructuredSummary,
        context: LiteratureContext,
        paper: PaperArtifact,
        n: int,
    ) -> list[str]:
        """
        为一个维度（或一组非新颖性维度的联合标签）生成 n 个问题

        Raises:
            NoJsonFound: 输出中没有 JSON 列表
            CountMismatch: 问题少于 n，或严格模式下多于 n
        """
        if n < 1:
            raise PreconditionError("n must be at least 1")
        aspects = _normalize_aspects(aspect)
        values = self._context_values(summary, context, paper)
        if aspects == (Aspect.NOVELTY_SIGNIFICANCE,):
            text = await self._call(
                "novelty_questions", "novelty_questions", enable_search=False, num_questions=n, **values
            )
        else:
            label = " and ".join(a.label for a in aspects)
            text = await self._call(
                "aspect_questions", "aspect_questions", enable_search=False, num_questions=n, aspect=label, **values
            )

        questions = [str(q).strip() for q in require_list(extract_json(text), "$") if str(q).strip()]
        # 不足时两种模式都报错，多出的只在宽松模式下截断
        if len(questions) < n or (self.strict and len(questions) != n):
            raise CountMismatch(n, len(questions))
        if len(questions) > n:
            logger.warning(f"Got {len(questions)} questions, keeping the first {n}")
            questions = questions[:n]
        return questions

    async def answer_question(
        self,
        aspect: Aspect,
        question: str,
        summary: StructuredSummary,
        context: LiteratureContext,
        paper: PaperArtifact,
    ) -> QAPair:
        if not question.strip():
            raise PreconditionError("question is empty")
        values = self._context_values(summary, context, paper)
        if aspect.uses_search:
            answer = await self._call("novelty_answerer", "novelty_answer", enable_search=True, question=question, **values)
            supporting = tuple(cited_papers(answer))
        else:
            answer = await self._call("aspect_answerer", "aspect_answer", enable_search=False, question=question, **values)
            supporting = ()
        return QAPair(
            aspect=aspect,
            question=question,
            answer=answer,
            used_search=aspect.uses_search,
            supporting_references=supporting,
        )

    async def generate_review(
        self,
        summary: StructuredSummary,
        log: InterrogationLog,
        paper: PaperArtifact,
        guidelines: ReviewGuidelines,
    ) -> Review:
        if not log.pairs:
            raise PreconditionError("interrogation log is empty")
        text = await self._call(
            "review_generator",
            "review_generator",
            enable_search=False,
            review_guidelines=guidelines.guideline_text,
            summary=summary.text,
            qa_pairs_text=render_qa_pairs(log),
            paper_text=self._paper_text(paper),
            fewshot_examples=guidelines.fewshot_examples,
        )
        return parse_review(text, requests_score=guidelines.requests_score, strict=self.strict)
