import json
import random
from decimal import Decimal

import pytest
from scipy.stats import binomtest

from agentic_review.errors import LengthMismatch, MissingDimension, PreconditionError, SchemaMismatch, ScoreOutOfRange
from agentic_review.evaluation import (
    Dimension,
    DimensionJudgment,
    Judge,
    SxSItem,
    SxSVerdict,
    Winner,
    aggregate_hmax,
    aggregate_win_rates,
    format_hmax_table,
    format_human_reviews,
    format_win_rate_table,
    judge_agreement,
    parse_hmax_scores,
    parse_sxs_verdict,
    presentation_swapped,
    sxs_evaluate,
    sxs_evaluate_batch,
    verdict_trace,
    win_rates_to_json,
)
from agentic_review.llm import LLMGateway
from agentic_review.mock import MockBackend

SXS_JSON = {
    "Technical Accuracy Reason": "r",
    "Technical Accuracy Better Assistant": "A",
    "Constructive Value Reason": "r",
    "Constructive Value Better Assistant": "B",
    "Analytical Depth Reason": "r",
    "Analytical Depth Better Assistant": "Tie",
    "Novelty and Significance Assessment External Sources Used": ["VCNet, ICLR, 2021, Nie et al."],
    "Novelty and Significance Assessment Reason": "r",
    "Novelty and Significance Assessment Better Assistant": "A",
    "Overall Reason": "r",
    "Overall Better Assistant": "A",
}


def verdict(overall: Winner, **others: Winner) -> SxSVerdict:
    judgments = {d: DimensionJudgment(winner=others.get(d.name.lower(), overall)) for d in Dimension}
    judgments[Dimension.OVERALL] = DimensionJudgment(winner=overall)
    return SxSVerdict(judgments=judgments)


def make_judge(backend: MockBackend, strict: bool = False) -> Judge:
    return Judge(LLMGateway(backend), strict=strict)


def test_presentation_swap_is_seeded_and_unbiased():
    assert presentation_swapped(42) == presentation_swapped(42)
    swaps = sum(presentation_swapped(seed) for seed in range(1000))
    assert binomtest(swaps, 1000, 0.5).pvalue > 0.01


def test_parse_sxs_verdict_decodes_swapped_order():
    text = "THOUGHT:\n...\nREVIEW COMPARISON JSON:\n```json\n" + json.dumps(SXS_JSON) + "\n```"
    plain = parse_sxs_verdict(text, order_was_swapped=False)
    swapped = parse_sxs_verdict(text, order_was_swapped=True)
    assert plain.winner(Dimension.TECHNICAL_ACCURACY) is Winner.A
    assert plain.winner(Dimension.CONSTRUCTIVE_VALUE) is Winner.B
    assert swapped.winner(Dimension.TECHNICAL_ACCURACY) is Winner.B
    assert swapped.winner(Dimension.CONSTRUCTIVE_VALUE) is Winner.A
    assert swapped.winner(Dimension.ANALYTICAL_DEPTH) is Winner.TIE
    assert plain.external_sources == ("VCNet, ICLR, 2021, Nie et al.",)
    assert swapped.order_was_swapped


def test_parse_sxs_verdict_errors():
    missing = {k: v for k, v in SXS_JSON.items() if k != "Overall Better Assistant"}
    with pytest.raises(MissingDimension) as info:
        parse_sxs_verdict(json.dumps(missing), order_was_swapped=False)
    assert info.value.key == "Overall Better Assistant"
    with pytest.raises(SchemaMismatch):
        parse_sxs_verdict(json.dumps({**SXS_JSON, "Overall Better Assistant": "C"}), order_was_swapped=False)


def hmax_json(**overrides) -> str:
    obj = {f"{d.key} Score": 5 for d in Dimension}
    obj.update({f"{d.key} Reason": "r" for d in Dimension})
    obj.update(overrides)
    return json.dumps(obj)


def test_parse_hmax_scores():
    scores = parse_hmax_scores(hmax_json(**{"Overall Score": 7}))
    assert scores.score(Dimension.OVERALL) == 7
    assert scores.score(Dimension.ANALYTICAL_DEPTH) == 5
    assert parse_hmax_scores(hmax_json(**{"Overall Score": 6.5})).score(Dimension.OVERALL) == 7
    with pytest.raises(ScoreOutOfRange):
        parse_hmax_scores(hmax_json(**{"Overall Score": 6.5}), strict=True)
    with pytest.raises(ScoreOutOfRange):
        parse_hmax_scores(hmax_json(**{"Overall Score": 11}))
    with pytest.raises(ScoreOutOfRange):
        parse_hmax_scores(hmax_json(**{"Overall Score": "high"}))
    with pytest.raises(MissingDimension):
        parse_hmax_scores(json.dumps({"Overall Score": 5}))


def test_win_rates_sum_to_one_hundred():
    rng = random.Random(9)
    verdicts = [verdict(rng.choice(list(Winner))) for _ in range(37)]
    for rate in aggregate_win_rates(verdicts).values():
        assert rate.win + rate.lose + rate.tie == Decimal(100)
        assert rate.n == 37


def test_win_rate_row_with_small_tie_share():
    # 987 胜、9 负、4 平
    verdicts = [verdict(Winner.A)] * 987 + [verdict(Winner.B)] * 9 + [verdict(Winner.TIE)] * 4
    rate = aggregate_win_rates(verdicts)[Dimension.TECHNICAL_ACCURACY]
    assert (rate.win, rate.lose, rate.tie) == (Decimal("98.7"), Decimal("0.9"), Decimal("0.4"))
    assert rate.as_floats() == {"win": 98.7, "lose": 0.9, "tie": 0.4}


def test_win_rates_drop_mode_and_empty():
    verdicts = [verdict(Winner.A), verdict(Winner.TIE), verdict(Winner.B), verdict(Winner.A)]
    dropped = aggregate_win_rates(verdicts, tie_mode="drop")[Dimension.OVERALL]
    assert (dropped.win, dropped.lose, dropped.tie, dropped.n) == (Decimal("66.7"), Decimal("33.3"), Decimal("0.0"), 3)
    explicit = aggregate_win_rates(verdicts)[Dimension.OVERALL]
    assert (explicit.win, explicit.lose, explicit.tie) == (Decimal("50.0"), Decimal("25.0"), Decimal("25.0"))
    with pytest.raises(PreconditionError):
        aggregate_win_rates([])


def test_judge_agreement():
    first = [verdict(Winner.A)] * 10
    second = [verdict(Winner.A)] * 8 + [verdict(Winner.B), verdict(Winner.TIE)]
    assert judge_agreement(first, second) == 0.8
    assert judge_agreement(first, first) == 1.0
    with pytest.raises(LengthMismatch):
        judge_agreement(first, second[:9])


def test_tables_and_json():
    rates = aggregate_win_rates([verdict(Winner.A), verdict(Winner.B)])
    table = format_win_rate_table({"System A": rates})
    lines = table.splitlines()
    assert lines[0].split() == ["system", "dimension", "win", "lose", "tie"]
    assert len(lines) == 1 + len(Dimension)
    assert lines[-1].split()[-3:] == ["50.0", "50.0", "0.0"]
    assert win_rates_to_json(rates)["overall"] == {"win": 50.0, "lose": 50.0, "tie": 0.0, "n": 2}

    hmax = aggregate_hmax([parse_hmax_scores(hmax_json()), parse_hmax_scores(hmax_json(**{"Overall Score": 6}))])
    assert hmax[Dimension.OVERALL] == 5.5
    assert format_hmax_table({"System A": hmax}).splitlines()[-1].split()[-1] == "5.50"


def test_human_reviews_and_traces():
    text = format_human_reviews(["First.", "Second."])
    assert text.startswith("---------- Human Review 1 of 2 ----------\nFirst.")
    trace = verdict_trace(verdict(Winner.A, analytical_depth=Winner.TIE), "Agentic", "Baseline")
    assert "Overall: better = Agentic" in trace
    assert "Analytical Depth: better = Tie" in trace


@pytest.mark.asyncio
async def test_sxs_judge_searches_with_cutoff(paper, demo_script):
    backend = MockBackend(demo_script)
    result = await sxs_evaluate(paper, "Review one.", "Review two.", make_judge(backend), rng_seed=3)
    request = backend.requests[0]
    assert request.agent_name == "sxs_judge"
    assert request.enable_search
    assert "2024-05-22" in request.system_prompt
    if result.order_was_swapped:
        assert request.user_prompt.index("Review two.") < request.user_prompt.index("Review one.")
        assert result.winner() is Winner.B
    else:
        assert request.user_prompt.index("Review one.") < request.user_prompt.index("Review two.")
        assert result.winner() is Winner.A
    with pytest.raises(PreconditionError):
        await sxs_evaluate(paper, "", "Review two.", make_judge(backend))


@pytest.mark.asyncio
async def test_sxs_batch_is_reproducible(paper, demo_script):
    items = [SxSItem(paper=paper, review_a=f"A{i}", review_b=f"B{i}", item_id=f"item-{i}") for i in range(12)]
    first = await sxs_evaluate_batch(items, make_judge(MockBackend(demo_script)), base_seed=100)
    second = await sxs_evaluate_batch(items, make_judge(MockBackend(demo_script)), base_seed=100)
    assert [v.item_id for v in first] == [f"item-{i}" for i in range(12)]
    assert [v.model_dump() for v in first] == [v.model_dump() for v in second]
    assert [v.order_was_swapped for v in first] == [presentation_swapped(100 + i) for i in range(12)]


@pytest.mark.asyncio
async def test_hmax_and_gains(paper, demo_script):
    backend = MockBackend(demo_script)
    judge = make_judge(backend)
    scores = await judge.hmax(paper, "An AI review.", ["Human one.", "Human two."])
    assert all(scores.score(d) == 5 for d in Dimension)
    assert backend.requests[-1].enable_search
    assert "Human Review 2 of 2" in backend.requests[-1].user_prompt
    with pytest.raises(PreconditionError):
        await judge.hmax(paper, "An AI review.", [])

    gains = await judge.gains(["trace"], "System A", "System B")
    assert set(gains) == {"System A Gains", "System A Losses"}
    assert not backend.requests[-1].enable_search
    with pytest.raises(SchemaMismatch):
        await judge.gains(["trace"], "Agentic", "Baseline")
