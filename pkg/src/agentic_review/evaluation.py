"""
评估协议模块
SxS 双盲对比、H-Max 打分、胜率汇总、收益总结与评审员一致性
"""

import logging
import random
from datetime import date
from decimal import ROUND_HALF_UP, Decimal
from enum import Enum
from typing import Any, Literal, Mapping, Optional, Sequence

from pydantic import Field, model_validator

from .agents import truncate_paper
from .errors import LengthMismatch, MissingDimension, PreconditionError, SchemaMismatch, ScoreOutOfRange
from .llm import DEFAULT_TEMPERATURE, CompletionRequest, LLMGateway
from .parsing import extract_json, require_keys
from .pipeline import gather_settled
from .prompts import TemplateLibrary
from .types import FrozenModel, PaperArtifact

logger = logging.getLogger(__name__)

SOURCES_KEY = "Novelty and Significance Assessment External Sources Used"
_ONE_DECIMAL = Decimal("0.1")
_HUNDRED = Decimal(100)

TieMode = Literal["explicit", "drop"]


class Dimension(str, Enum):
    TECHNICAL_ACCURACY = "technical_accuracy"
    CONSTRUCTIVE_VALUE = "constructive_value"
    ANALYTICAL_DEPTH = "analytical_depth"
    NOVELTY_SIGNIFICANCE = "novelty_significance"
    OVERALL = "overall"

    @property
    def key(self) -> str:
        """评审员 JSON 中使用的字段前缀"""
        return _DIMENSION_KEYS[self]


_DIMENSION_KEYS = {
    Dimension.TECHNICAL_ACCURACY: "Technical Accuracy",
    Dimension.CONSTRUCTIVE_VALUE: "Constructive Value",
    Dimension.ANALYTICAL_DEPTH: "Analytical Depth",
    Dimension.NOVELTY_SIGNIFICANCE: "Novelty and Significance Assessment",
    Dimension.OVERALL: "Overall",
}


class Winner(str, Enum):
    A = "A"
    B = "B"
    TIE = "Tie"

    def swapped(self) -> "Winner":
        if self is Winner.A:
            return Winner.B
        if self is Winner.B:
            return Winner.A
        return self


class DimensionJudgment(FrozenModel):
    reason: str = ""
    winner: Winner


class SxSVerdict(FrozenModel):
    """A/B 始终指调用方的原始标签"""

    judgments: dict[Dimension, DimensionJudgment]
    external_sources: tuple[str, ...] = ()
    order_was_swapped: bool = False
    item_id: str = ""

    @model_validator(mode="after")
    def _all_dimensions(self) -> "SxSVerdict":
        missing = [d.value for d in Dimension if d not in self.judgments]
        if missing:
            raise ValueError(f"verdict is missing dimensions: {', '.join(missing)}")
        return self

    def winner(self, dimension: Dimension = Dimension.OVERALL) -> Winner:
        return self.judgments[dimension].winner


class DimensionScore(FrozenModel):
    reason: str = ""
    score: int = Field(ge=1, le=10)


class HMaxScores(FrozenModel):
    scores: dict[Dimension, DimensionScore]
    external_sources: tuple[str, ...] = ()

    @model_validator(mode="after")
    def _all_dimensions(self) -> "HMaxScores":
        missing = [d.value for d in Dimension if d not in self.scores]
        if missing:
            raise ValueError(f"scores are missing dimensions: {', '.join(missing)}")
        return self

    def score(self, dimension: Dimension) -> int:
        return self.scores[dimension].score


class WinRate(FrozenModel):
    """百分比保留一位小数，平局取余数，三者之和恰为 100"""

    win: Decimal
    lose: Decimal
    tie: Decimal
    n: int

    def as_floats(self) -> dict[str, float]:
        return {"win": float(self.win), "lose": float(self.lose), "tie": float(self.tie)}


class SxSItem(FrozenModel):
    paper: PaperArtifact
    review_a: str
    review_b: str
    item_id: str = ""


def presentation_swapped(seed: int) -> bool:
    """由种子决定是否交换两条评审的呈现顺序"""
    return random.Random(seed).random() < 0.5


def _parse_winner(value: Any, key: str) -> Winner:
    text = str(value).strip().strip('"').lower()
    if text in {"a", "assistant a"}:
        return Winner.A
    if text in {"b", "assistant b"}:
        return Winner.B
    if text == "tie":
        return Winner.TIE
    raise SchemaMismatch(f"unrecognized winner {value!r}", f"$.{key}")


def _parse_sources(value: Any) -> tuple[str, ...]:
    if value is None:
        return ()
    if not isinstance(value, list):
        value = [value]
    sources = []
    for item in value:
        if isinstance(item, dict):
            sources.append(", ".join(str(v) for v in item.values() if v))
        elif str(item).strip():
            sources.append(str(item).strip())
    return tuple(sources)


def parse_sxs_verdict(text: str, *, order_was_swapped: bool, item_id: str = "") -> SxSVerdict:
    """
    解析 SxS 评审员输出，并按呈现顺序把胜者解码回调用方的标签

    Raises:
        NoJsonFound: 输出中没有 JSON
        MissingDimension: 缺少某个维度的胜者字段
    """
    obj = require_keys(extract_json(text), ())
    judgments = {}
    for dimension in Dimension:
        key = f"{dimension.key} Better Assistant"
        if key not in obj:
            raise MissingDimension(key)
        winner = _parse_winner(obj[key], key)
        judgments[dimension] = DimensionJudgment(
            reason=str(obj.get(f"{dimension.key} Reason", "")),
            winner=winner.swapped() if order_was_swapped else winner,
        )
    return SxSVerdict(
        judgments=judgments,
        external_sources=_parse_sources(obj.get(SOURCES_KEY)),
        order_was_swapped=order_was_swapped,
        item_id=item_id,
    )


def _parse_score(value: Any, key: str, *, strict: bool) -> int:
    if isinstance(value, bool):
        raise ScoreOutOfRange(key, value)
    try:
        number = Decimal(str(value).strip())
    except ArithmeticError as e:
        raise ScoreOutOfRange(key, value) from e
    if number != number.to_integral_value():
        if strict:
            raise ScoreOutOfRange(key, value)
        rounded = number.quantize(Decimal(1), rounding=ROUND_HALF_UP)
        logger.warning(f"{key}: non-integer score {value!r} rounded to {rounded}")
        number = rounded
    if not 1 <= number <= 10:
        raise ScoreOutOfRange(key, value)
    return int(number)


def parse_hmax_scores(text: str, *, strict: bool = False) -> HMaxScores:
    """
    解析 H-Max 评审员输出

    Raises:
        MissingDimension: 缺少某个维度的分数
        ScoreOutOfRange: 分数越界，或严格模式下不是整数
    """
    obj = require_keys(extract_json(text), ())
    scores = {}
    for dimension in Dimension:
        key = f"{dimension.key} Score"
        if key not in obj:
            raise MissingDimension(key)
        scores[dimension] = DimensionScore(
            reason=str(obj.get(f"{dimension.key} Reason", "")),
            score=_parse_score(obj[key], key, strict=strict),
        )
    return HMaxScores(scores=scores, external_sources=_parse_sources(obj.get(SOURCES_KEY)))


class Judge:
    """评估用 LLM 评审员，封装模板渲染与网关调用"""

    def __init__(
        self,
        gateway: LLMGateway,
        *,
        templates: Optional[TemplateLibrary] = None,
        temperature: float = DEFAULT_TEMPERATURE,
        paper_char_budget: int = 200_000,
        strict: bool = False,
    ):
        self.gateway = gateway
        self.templates = templates or TemplateLibrary()
        self.temperature = temperature
        self.paper_char_budget = paper_char_budget
        self.strict = strict

    async def _call(self, agent_name: str, template_name: str, *, enable_search: bool, **values: Any) -> str:
        system_prompt, user_prompt = self.templates.get(template_name).render(**values)
        response = await self.gateway.complete(
            CompletionRequest(
                agent_name=agent_name,
                system_prompt=system_prompt,
                user_prompt=user_prompt,
                temperature=self.temperature,
                enable_search=enable_search,
            )
        )
        return response.text

    async def sxs(
        self,
        paper: PaperArtifact,
        review_a: str,
        review_b: str,
        *,
        cutoff_date: Optional[date] = None,
        rng_seed: int = 0,
        item_id: str = "",
    ) -> SxSVerdict:
        if not review_a.strip() or not review_b.strip():
            raise PreconditionError("both reviews must be non-empty")
        swapped = presentation_swapped(rng_seed)
        first, second = (review_b, review_a) if swapped else (review_a, review_b)
        text = await self._call(
            "sxs_judge",
            "sxs_judge",
            enable_search=True,
            cutoff_date=(cutoff_date or paper.cutoff_date).isoformat(),
            paper_text=truncate_paper(paper.full_text, self.paper_char_budget),
            review_a=first,
            review_b=second,
        )
        verdict = parse_sxs_verdict(text, order_was_swapped=swapped, item_id=item_id)
        logger.debug(f"SxS {item_id or paper.paper_id}: swapped={swapped}, overall={verdict.winner().value}")
        return verdict

    async def hmax(
        self,
        paper: PaperArtifact,
        ai_review: str,
        human_reviews: Sequence[str],
        *,
        cutoff_date: Optional[date] = None,
    ) -> HMaxScores:
        if not human_reviews:
            raise PreconditionError("H-Max scoring needs at least one human review")
        if not ai_review.strip():
            raise PreconditionError("AI review is empty")
        text = await self._call(
            "hmax_judge",
            "hmax_judge",
            enable_search=True,
            cutoff_date=(cutoff_date or paper.cutoff_date).isoformat(),
            paper_text=truncate_paper(paper.full_text, self.paper_char_budget),
            ai_review=ai_review,
            human_review=format_human_reviews(human_reviews),
        )
        return parse_hmax_scores(text, strict=self.strict)

    async def gains(self, traces: Sequence[str], model_a: str, model_b: str) -> dict[str, Any]:
        if not traces:
            raise PreconditionError("summary of gains needs at least one trace")
        text = await self._call(
            "gains_summary",
            "gains_summary",
            enable_search=False,
            model_a=model_a,
            model_b=model_b,
            num_samples=len(traces),
            sxs_evaluations="\n\n".join(f"--- Trace {i} ---\n{trace}" for i, trace in enumerate(traces, start=1)),
        )
        return require_keys(extract_json(text), (f"{model_a} Gains", f"{model_a} Losses"))


def format_human_reviews(reviews: Sequence[str]) -> str:
    return "\n\n".join(
        f"---------- Human Review {i} of {len(reviews)} ----------\n{review.strip()}"
        for i, review in enumerate(reviews, start=1)
    )


async def sxs_evaluate(
    paper: PaperArtifact,
    review_a: str,
    review_b: str,
    judge: Judge,
    cutoff_date: Optional[date] = None,
    rng_seed: int = 0,
) -> SxSVerdict:
    return await judge.sxs(paper, review_a, review_b, cutoff_date=cutoff_date, rng_seed=rng_seed)


async def sxs_evaluate_batch(items: Sequence[SxSItem], judge: Judge, *, base_seed: int = 0) -> list[SxSVerdict]:
    """逐条使用种子 base_seed + index；评审员调用并发执行，结果保持输入顺序"""
    if not items:
        raise PreconditionError("no SxS items to evaluate")
    return await gather_settled(
        *(
            (
                lambda item=item, index=index: judge.sxs(
                    item.paper,
                    item.review_a,
                    item.review_b,
                    rng_seed=base_seed + index,
                    item_id=item.item_id or str(index),
                )
            )
            for index, item in enumerate(items)
        )
    )


async def hmax_evaluate(
    paper: PaperArtifact,
    ai_review: str,
    human_reviews: Sequence[str],
    judge: Judge,
    cutoff_date: Optional[date] = None,
) -> HMaxScores:
    return await judge.hmax(paper, ai_review, human_reviews, cutoff_date=cutoff_date)


async def summarize_gains(traces: Sequence[str], model_a: str, model_b: str, judge: Judge) -> dict[str, Any]:
    return await judge.gains(traces, model_a, model_b)


def verdict_trace(verdict: SxSVerdict, model_a: str, model_b: str) -> str:
    """把裁决改写成以模型名称表述的文字记录，供收益总结使用"""
    names = {Winner.A: model_a, Winner.B: model_b, Winner.TIE: "Tie"}
    lines = []
    for dimension in Dimension:
        judgment = verdict.judgments[dimension]
        lines.append(f"{dimension.key}: better = {names[judgment.winner]}")
        if judgment.reason:
            lines.append(f"  reason: {judgment.reason}")
    return "\n".join(lines)


def _percent(count: int, total: int) -> Decimal:
    return (Decimal(count) * _HUNDRED / Decimal(total)).quantize(_ONE_DECIMAL, rounding=ROUND_HALF_UP)


def aggregate_win_rates(
    verdicts: Sequence[SxSVerdict], *, tie_mode: TieMode = "explicit"
) -> dict[Dimension, WinRate]:
    """
    按维度统计 A 的胜/负/平百分比

    explicit 模式平局为余数；drop 模式剔除平局后只在胜负之间计算
    """
    if not verdicts:
        raise PreconditionError("no verdicts to aggregate")
    rates = {}
    for dimension in Dimension:
        winners = [verdict.winner(dimension) for verdict in verdicts]
        wins = winners.count(Winner.A)
        losses = winners.count(Winner.B)
        if tie_mode == "drop":
            decided = wins + losses
            if decided == 0:
                rates[dimension] = WinRate(win=Decimal("0.0"), lose=Decimal("0.0"), tie=Decimal("100.0"), n=0)
                continue
            win = _percent(wins, decided)
            rates[dimension] = WinRate(win=win, lose=_HUNDRED - win, tie=Decimal("0.0"), n=decided)
        else:
            win = _percent(wins, len(winners))
            lose = _percent(losses, len(winners))
            rates[dimension] = WinRate(win=win, lose=lose, tie=_HUNDRED - win - lose, n=len(winners))
    return rates


def aggregate_hmax(results: Sequence[HMaxScores]) -> dict[Dimension, float]:
    if not results:
        raise PreconditionError("no H-Max scores to aggregate")
    return {
        dimension: sum(result.score(dimension) for result in results) / len(results)
        for dimension in Dimension
    }


def judge_agreement(verdicts_1: Sequence[SxSVerdict], verdicts_2: Sequence[SxSVerdict]) -> float:
    """两个评审员在同一批条目上总体胜者一致的比例"""
    if len(verdicts_1) != len(verdicts_2):
        raise LengthMismatch(f"{len(verdicts_1)} vs {len(verdicts_2)} verdicts")
    if not verdicts_1:
        raise PreconditionError("no verdicts to compare")
    same = sum(1 for v1, v2 in zip(verdicts_1, verdicts_2) if v1.winner() == v2.winner())
    return same / len(verdicts_1)


def win_rates_to_json(rates: Mapping[Dimension, WinRate]) -> dict[str, Any]:
    return {dimension.value: {**rate.as_floats(), "n": rate.n} for dimension, rate in rates.items()}


def format_win_rate_table(rows: Mapping[str, Mapping[Dimension, WinRate]]) -> str:
    """每个系统每个维度一行，列对齐"""
    name_width = max([len("system")] + [len(name) for name in rows])
    dim_width = max(len(d.key) for d in Dimension)
    lines = [f"{'system':<{name_width}}  {'dimension':<{dim_width}}  {'win':>6}  {'lose':>6}  {'tie':>6}"]
    for name, rates in rows.items():
        for dimension, rate in rates.items():
            lines.append(
                f"{name:<{name_width}}  {dimension.key:<{dim_width}}  "
                f"{rate.win:>6}  {rate.lose:>6}  {rate.tie:>6}"
            )
    return "\n".join(lines)


def format_hmax_table(rows: Mapping[str, Mapping[Dimension, float]]) -> str:
    name_width = max([len("system")] + [len(name) for name in rows])
    dim_width = max(len(d.key) for d in Dimension)
    lines = [f"{'system':<{name_width}}  {'dimension':<{dim_width}}  {'score':>6}"]
    for name, means in rows.items():
        for dimension, mean in means.items():
            lines.append(f"{name:<{name_width}}  {dimension.key:<{dim_width}}  {mean:>6.2f}")
    return "\n".join(lines)
