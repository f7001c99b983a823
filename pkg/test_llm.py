import os
import random

import anyio
import pytest

from agentic_review.errors import AuthError, BackendError, BudgetExceeded, EmptyCompletion, RateLimited
from agentic_review.llm import (
    CallLedger,
    CompletionRequest,
    CompletionResponse,
    LLMGateway,
    OpenAIBackend,
    calculate_backoff_delay,
    ledger_total,
)
from agentic_review.mock import MockBackend, MockRule, MockScript


def request(agent: str = "summarizer", system: str = "system prompt", search: bool = False) -> CompletionRequest:
    return CompletionRequest(agent_name=agent, system_prompt=system, user_prompt="user prompt", enable_search=search)


class RecordingSleep:
    def __init__(self):
        self.delays: list[float] = []

    async def __call__(self, delay: float) -> None:
        self.delays.append(delay)


class SlowBackend:
    name = "slow"

    def __init__(self, delay: float):
        self.delay = delay
        self.in_flight = 0
        self.peak = 0

    async def generate(self, request: CompletionRequest) -> CompletionResponse:
        self.in_flight += 1
        self.peak = max(self.peak, self.in_flight)
        try:
            await anyio.sleep(self.delay)
        finally:
            self.in_flight -= 1
        return CompletionResponse(text="done")

    async def close(self) -> None:
        return None


def test_backoff_delay_doubles():
    assert [calculate_backoff_delay(r, jitter=0.0) for r in (1, 2, 3)] == [1.0, 2.0, 4.0]
    rng = random.Random(7)
    for retry in (1, 2, 3):
        delay = calculate_backoff_delay(retry, base_delay=1.0, jitter=0.2, rng=rng)
        nominal = 2 ** (retry - 1)
        assert 0.8 * nominal <= delay <= 1.2 * nominal


@pytest.mark.asyncio
async def test_gateway_records_one_entry_per_call():
    backend = MockBackend(MockScript(rules=(MockRule(match="system", response="hello"),)))
    gateway = LLMGateway(backend)
    first = await gateway.complete(request())
    second = await gateway.complete(request(agent="literature_reviewer", search=True))
    assert first.text == "hello" and not first.search_performed
    assert second.search_performed
    entries = gateway.ledger.entries
    assert [e.sequence_index for e in entries] == [0, 1]
    assert [e.used_search_tool for e in entries] == [False, True]
    assert entries[0].prompt_chars == len("system prompt") + len("user prompt")
    assert entries[0].completion_chars == 5
    assert ledger_total(gateway.ledger) == 2


@pytest.mark.asyncio
async def test_gateway_retries_transient_failures():
    sleep = RecordingSleep()
    backend = MockBackend(MockScript(rules=(MockRule(match="system", response="ok", transient_failures=2),)))
    gateway = LLMGateway(backend, jitter=0.0, sleep=sleep)
    response = await gateway.complete(request())
    assert response.text == "ok"
    assert sleep.delays == [1.0, 2.0]
    assert len(backend.requests) == 3
    assert gateway.ledger.total == 1
    assert gateway.ledger.entries[0].retries == 2


@pytest.mark.asyncio
async def test_gateway_gives_up_after_max_retries():
    sleep = RecordingSleep()
    backend = MockBackend(MockScript(rules=(MockRule(match="system", response="ok", transient_failures=10),)))
    gateway = LLMGateway(backend, max_retries=3, sleep=sleep)
    with pytest.raises(RateLimited) as info:
        await gateway.complete(request())
    assert info.value.attempts == 4
    assert len(backend.requests) == 4
    entry = gateway.ledger.entries[0]
    assert entry.retries == 3
    assert entry.error.startswith("RateLimited")


@pytest.mark.asyncio
async def test_gateway_does_not_retry_permanent_errors():
    sleep = RecordingSleep()
    backend = MockBackend(MockScript(rules=(MockRule(match="system", fail="bad request"),)))
    gateway = LLMGateway(backend, sleep=sleep)
    with pytest.raises(BackendError):
        await gateway.complete(request())
    assert sleep.delays == []
    assert gateway.ledger.total == 1


@pytest.mark.asyncio
async def test_gateway_rejects_empty_completion():
    backend = MockBackend(MockScript(rules=(MockRule(match="system", response="  \n"),)))
    gateway = LLMGateway(backend)
    with pytest.raises(EmptyCompletion):
        await gateway.complete(request())
    assert gateway.ledger.entries[0].error.startswith("EmptyCompletion")


@pytest.mark.asyncio
async def test_gateway_budget_is_checked_before_dispatch():
    backend = MockBackend(MockScript(default_response="x"))
    gateway = LLMGateway(backend, call_budget=2)
    await gateway.complete(request())
    await gateway.complete(request())
    with pytest.raises(BudgetExceeded):
        await gateway.complete(request())
    assert len(backend.requests) == 2
    assert gateway.dispatched == 2
    assert gateway.ledger.total == 2


@pytest.mark.asyncio
async def test_gateway_timeout_counts_as_transient():
    sleep = RecordingSleep()
    gateway = LLMGateway(SlowBackend(delay=5.0), max_retries=1, request_timeout=0.01, sleep=sleep)
    with pytest.raises(RateLimited):
        await gateway.complete(request())
    assert len(sleep.delays) == 1


@pytest.mark.asyncio
async def test_gateway_bounds_in_flight_calls():
    backend = SlowBackend(delay=0.02)
    gateway = LLMGateway(backend, max_in_flight=2)
    async with anyio.create_task_group() as tg:
        for _ in range(6):
            tg.start_soon(gateway.complete, request())
    assert backend.peak == 2
    assert sorted(e.sequence_index for e in gateway.ledger.entries) == list(range(6))


def test_ledger_jsonl_round_trip(tmp_path):
    ledger = CallLedger()
    path = tmp_path / "ledger.jsonl"

    async def run():
        gateway = LLMGateway(MockBackend(MockScript(default_response="x")), ledger=ledger)
        await gateway.complete(request())
        await gateway.complete(request(agent="historian"))

    anyio.run(run)
    ledger.append_to(path, session=1)
    ledger.append_to(path, session=2)
    restored = CallLedger.from_jsonl(path.read_text(encoding="utf-8"))
    assert restored.total == 4
    assert [e.agent_name for e in restored.entries][:2] == ["summarizer", "summarizer"]
    assert '"session": 2' in path.read_text(encoding="utf-8")


def test_request_rejects_empty_prompt():
    with pytest.raises(ValueError):
        CompletionRequest(system_prompt="  ", user_prompt="x")


def test_openai_backend_requires_key():
    with pytest.raises(AuthError):
        OpenAIBackend("")


@pytest.mark.asyncio
async def test_openai_backend_live():
    api_key = os.getenv("OPENAI_API_KEY")
    if not api_key:
        pytest.skip("环境变量中未找到 OPENAI_API_KEY")

    backend = OpenAIBackend(api_key, model=os.getenv("OPENAI_MODEL", "gpt-4o"))
    gateway = LLMGateway(backend)
    try:
        response = await gateway.complete(
            CompletionRequest(
                agent_name="literature_reviewer",
                system_prompt="You answer in one short sentence.",
                user_prompt="Name one paper on dose-response estimation published before 2022-01-01.",
                enable_search=True,
            )
        )
    finally:
        await gateway.close()
    print(f"OpenAI 响应: {response.text[:80]}...")
    assert response.text.strip()
    assert gateway.ledger.entries[0].used_search_tool == response.search_performed
