"""
评审流水线类型定义模块
定义在流水线中流转的所有不可变产物，并按提示词内嵌的 JSON 模式做校验
"""

import hashlib
import json
import re
from datetime import date
from enum import Enum
from typing import Any, Iterable, Optional

from pydantic import (
    AliasChoices,
    BaseModel,
    ConfigDict,
    Field,
    field_validator,
    model_validator,
)

from .parsing import parse_summary_sections

SCHEMA_VERSION = "1"

# 形如 [12]、[3, 4]、[5-7] 的引用残留
CITATION_ARTIFACT = re.compile(r"\[\d+(?:\s*[,–\-]\s*\d+)*\]")
_TITLE_PUNCT = re.compile(r"[^\w\s]|_")
_INTRODUCTION = re.compile(
    r"^\s*(?:#+\s*)?(?:\d+\.?|[IVX]+\.)?\s*introduction\b",
    re.IGNORECASE | re.MULTILINE,
)


class FrozenModel(BaseModel):
    model_config = ConfigDict(frozen=True)


class Aspect(str, Enum):
    """问答引擎的评审维度"""

    NOVELTY_SIGNIFICANCE = "novelty_significance"
    TECHNICAL_SOUNDNESS = "technical_soundness"
    CLARITY_PRESENTATION = "clarity_presentation"

    @property
    def label(self) -> str:
        return _ASPECT_LABELS[self]

    @property
    def uses_search(self) -> bool:
        return self is Aspect.NOVELTY_SIGNIFICANCE


_ASPECT_LABELS = {
    Aspect.NOVELTY_SIGNIFICANCE: "novelty and significance",
    Aspect.TECHNICAL_SOUNDNESS: "technical soundness and quality",
    Aspect.CLARITY_PRESENTATION: "clarity and presentation",
}


def _require_text(value: str, name: str) -> str:
    if not value or not value.strip():
        raise ValueError(f"{name} must be non-empty")
    return value


class PaperArtifact(FrozenModel):
    """待评审论文（预先抽取的文本）"""

    paper_id: str
    full_text: str
    abstract_block: str = ""
    cutoff_date: date

    @field_validator("full_text")
    @classmethod
    def _full_text_non_empty(cls, value: str) -> str:
        return _require_text(value, "full_text")

    @classmethod
    def from_text(
        cls,
        full_text: str,
        cutoff_date: date,
        *,
        paper_id: Optional[str] = None,
        abstract_block: Optional[str] = None,
        abstract_chars: int = 3000,
    ) -> "PaperArtifact":
        """
        从全文构造论文产物，缺省时推导摘要块和 paper_id

        Args:
            full_text: 论文全文
            cutoff_date: 投稿/发表日期，检索的时间上限
            paper_id: 可选标识，缺省为全文内容哈希
            abstract_block: 可选的标题+作者+摘要，缺省取 Introduction 之前的部分
            abstract_chars: 推导摘要块的最大字符数

        Returns:
            PaperArtifact
        """
        if abstract_block is None:
            abstract_block = derive_abstract_block(full_text, abstract_chars)
        if paper_id is None:
            paper_id = "paper-" + hashlib.sha256(full_text.encode("utf-8")).hexdigest()[:12]
        return cls(
            paper_id=paper_id,
            full_text=full_text,
            abstract_block=abstract_block,
            cutoff_date=cutoff_date,
        )


def derive_abstract_block(full_text: str, max_chars: int = 3000) -> str:
    """取 Introduction 标题之前的文本作为摘要块"""
    match = _INTRODUCTION.search(full_text)
    head = full_text[: match.start()] if match and match.start() > 0 else full_text
    return head.strip()[:max_chars].strip()


class StructuredSummary(FrozenModel):
    """面向评审的论文压缩表示"""

    text: str
    core_claims: tuple[str, ...] = ()
    method_sketch: str = ""
    reported_evidence: tuple[str, ...] = ()

    @field_validator("text")
    @classmethod
    def _text_non_empty(cls, value: str) -> str:
        return _require_text(value, "text")

    @classmethod
    def from_text(cls, text: str) -> "StructuredSummary":
        sections = parse_summary_sections(text)
        return cls(
            text=text,
            core_claims=tuple(sections.claims),
            method_sketch=sections.method,
            reported_evidence=tuple(sections.evidence),
        )


def _coerce_text(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, (list, tuple)):
        return ", ".join(str(item) for item in value)
    return value if isinstance(value, str) else str(value)


def _coerce_flag(value: Any) -> bool:
    if isinstance(value, bool):
        return value
    if isinstance(value, str):
        return value.strip().lower() in {"true", "yes", "1"}
    if isinstance(value, (int, float)):
        return bool(value)
    return False


class Reference(BaseModel):
    """文献综述中的一条参考文献，字段名与提示词 JSON 模式一致"""

    # 未知字段默认保留，严格模式由解析层拒绝
    model_config = ConfigDict(frozen=True, extra="allow")

    title: str = ""
    venue_year: str = ""
    authors: str = ""
    is_foundational: bool = False
    is_sota_candidate: bool = False
    is_dataset_paper: bool = False
    is_survey_paper: bool = False
    core_method: str = ""
    # 扩展提示词使用 datasets_and_metrics
    datasets_and_performance: str = Field(
        default="",
        validation_alias=AliasChoices("datasets_and_performance", "datasets_and_metrics"),
    )
    known_limitations: str = ""

    @field_validator(
        "title", "venue_year", "authors", "core_method",
        "datasets_and_performance", "known_limitations",
        mode="before",
    )
    @classmethod
    def _text_fields(cls, value: Any) -> str:
        return _coerce_text(value)

    @field_validator(
        "is_foundational", "is_sota_candidate", "is_dataset_paper", "is_survey_paper",
        mode="before",
    )
    @classmethod
    def _flag_fields(cls, value: Any) -> bool:
        return _coerce_flag(value)

    @property
    def unknown_fields(self) -> dict[str, Any]:
        return dict(self.model_extra or {})

    def scrubbed(self) -> "Reference":
        """去除 core_method 和 datasets_and_performance 中的引用残留"""
        return self.model_copy(
            update={
                "core_method": scrub_citation_artifacts(self.core_method),
                "datasets_and_performance": scrub_citation_artifacts(self.datasets_and_performance),
            }
        )


def scrub_citation_artifacts(text: str) -> str:
    cleaned = CITATION_ARTIFACT.sub("", text)
    cleaned = re.sub(r"[ \t]{2,}", " ", cleaned)
    return re.sub(r"\s+([.,;:])", r"\1", cleaned).strip()


def validate_reference(ref: Reference) -> list[str]:
    """
    校验参考文献，返回全部违规项；空列表表示合法

    Args:
        ref: 待校验的参考文献

    Returns:
        list[str]: 违规描述
    """
    violations = []
    if not ref.title.strip():
        violations.append("title: empty title")
    for name in ("core_method", "datasets_and_performance"):
        found = CITATION_ARTIFACT.findall(getattr(ref, name))
        if found:
            violations.append(f"{name}: citation artifact {', '.join(found)}")
    return violations


def normalize_title(title: str) -> str:
    """小写、去标点、合并空白；幂等"""
    return " ".join(_TITLE_PUNCT.sub(" ", title.lower()).split())


def dedupe_references(
    refs: Iterable[Reference], existing: Iterable[Reference] = ()
) -> list[Reference]:
    """按规范化标题去重，保持顺序，先出现者保留；同时排除 existing 中已有的标题"""
    seen = {normalize_title(ref.title) for ref in existing}
    unique = []
    for ref in refs:
        key = normalize_title(ref.title)
        if key in seen:
            continue
        seen.add(key)
        unique.append(ref)
    return unique


class DomainAnalysis(FrozenModel):
    broad_domain: str
    specific_subfield: str
    primary_datasets_commonly_used: tuple[str, ...] = ()
    standard_metrics_used: tuple[str, ...] = ()

    @field_validator("broad_domain", "specific_subfield")
    @classmethod
    def _non_empty(cls, value: str, info) -> str:
        return _require_text(value, info.field_name)


class MissingItem(FrozenModel):
    """基线侦察员发现的缺失基线或数据集"""

    name: str
    reference: str
    reason: str


class LiteratureContext(FrozenModel):
    """动态上下文：领域分析、参考文献、领域叙事、缺失基线与数据集"""

    domain_analysis: DomainAnalysis
    references: tuple[Reference, ...] = ()
    domain_narrative: str = ""
    missing_baselines: tuple[MissingItem, ...] = ()
    missing_datasets: tuple[MissingItem, ...] = ()
    expansion_rounds_completed: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def _references_unique(self) -> "LiteratureContext":
        keys = [normalize_title(ref.title) for ref in self.references]
        if len(keys) != len(set(keys)):
            raise ValueError("references must be deduplicated by normalized title")
        return self

    def literature_review_payload(self) -> dict[str, Any]:
        """下游提示词中插入的完整文献综述 JSON"""
        return {
            "domain_analysis": self.domain_analysis.model_dump(mode="json"),
            "references": [ref.model_dump(mode="json") for ref in self.references],
        }

    def missing_payload(self) -> dict[str, Any]:
        return {
            "missing_baselines": [item.model_dump(mode="json") for item in self.missing_baselines],
            "missing_datasets": [item.model_dump(mode="json") for item in self.missing_datasets],
        }


class QAPair(FrozenModel):
    aspect: Aspect
    question: str
    answer: str
    used_search: bool
    supporting_references: tuple[str, ...] = ()

    @field_validator("question", "answer")
    @classmethod
    def _non_empty(cls, value: str, info) -> str:
        return _require_text(value, info.field_name)

    @model_validator(mode="after")
    def _search_matches_aspect(self) -> "QAPair":
        if self.used_search != self.aspect.uses_search:
            raise ValueError("used_search must be true exactly for novelty_significance")
        return self


class InterrogationLog(FrozenModel):
    """按顺序记录的问答对"""

    pairs: tuple[QAPair, ...] = ()

    def __len__(self) -> int:
        return len(self.pairs)

    def by_aspect(self, aspect: Aspect) -> list[QAPair]:
        return [pair for pair in self.pairs if pair.aspect is aspect]


class Review(FrozenModel):
    summary: str = ""
    strengths: tuple[str, ...] = ()
    weaknesses: tuple[str, ...] = ()
    suggestions: tuple[str, ...] = ()
    questions: tuple[str, ...] = ()
    decision_score: Optional[int] = Field(default=None, ge=1, le=10)
    raw_text: str

    @field_validator("raw_text")
    @classmethod
    def _raw_non_empty(cls, value: str) -> str:
        return _require_text(value, "raw_text")


class ReviewGuidelines(FrozenModel):
    venue_name: str = ""
    guideline_text: str
    fewshot_examples: str = ""
    requests_score: bool = True

    @field_validator("guideline_text")
    @classmethod
    def _guidelines_non_empty(cls, value: str) -> str:
        return _require_text(value, "guideline_text")


class CallLedgerEntry(FrozenModel):
    """一次逻辑 LLM 调用的记账条目"""

    agent_name: str
    prompt_chars: int = Field(ge=0)
    completion_chars: int = Field(ge=0)
    used_search_tool: bool
    wall_time: float = Field(ge=0.0)
    sequence_index: int = Field(ge=0)
    retries: int = Field(default=0, ge=0)
    error: Optional[str] = None


def canonical_json(model: BaseModel) -> str:
    """排序键、紧凑分隔的规范化 JSON，用于哈希和字节稳定的往返"""
    return canonical_dumps(model.model_dump(mode="json"))


def canonical_dumps(value: Any) -> str:
    return json.dumps(value, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def content_hash(*parts: str) -> str:
    digest = hashlib.sha256()
    for part in parts:
        digest.update(part.encode("utf-8"))
        digest.update(b"\x00")
    return digest.hexdigest()
