"""
评审引擎 LLM 网关模块
统一封装聊天补全后端、联网搜索开关、重试退避与调用记账
"""

import json
import logging
import random
import time
from pathlib import Path
from typing import Any, Awaitable, Callable, Iterable, Optional, Protocol, Union

import anyio
import openai
from anyio import move_on_after
from openai import AsyncOpenAI
from pydantic import BaseModel, ConfigDict, Field, field_validator

from .errors import (
    AuthError,
    BackendError,
    BudgetExceeded,
    EmptyCompletion,
    RateLimited,
    TransientBackendError,
)
from .types import CallLedgerEntry

logger = logging.getLogger(__name__)

DEFAULT_TEMPERATURE = 0.7


class CompletionRequest(BaseModel):
    """一次补全请求"""

    model_config = ConfigDict(frozen=True)

    agent_name: str = "anonymous"
    system_prompt: str
    user_prompt: str
    temperature: float = Field(default=DEFAULT_TEMPERATURE, ge=0.0, le=2.0)
    enable_search: bool = False
    max_output: Optional[int] = Field(default=None, gt=0)

    @field_validator("system_prompt", "user_prompt")
    @classmethod
    def _prompt_non_empty(cls, value: str, info) -> str:
        if not value.strip():
            raise ValueError(f"{info.field_name} must be non-empty")
        return value

    @property
    def prompt_chars(self) -> int:
        return len(self.system_prompt) + len(self.user_prompt)


class CompletionResponse(BaseModel):
    model_config = ConfigDict(frozen=True)

    text: str
    search_performed: bool = False
    provider_metadata: dict[str, Any] = Field(default_factory=dict)


class LLMBackend(Protocol):
    """后端只负责单次尝试；重试、记账和并发限制由网关处理"""

    name: str

    async def generate(self, request: CompletionRequest) -> CompletionResponse: ...

    async def close(self) -> None: ...


def calculate_backoff_delay(
    retry: int,
    base_delay: float = 1.0,
    jitter: float = 0.2,
    rng: Optional[random.Random] = None,
) -> float:
    """
    计算指数退避延迟时间

    Args:
        retry: 当前重试次数（从 1 开始）
        base_delay: 基础延迟时间（秒）
        jitter: 随机抖动范围（0-1之间）
        rng: 可选随机数生成器

    Returns:
        float: 延迟时间（秒），依次约为 1s/2s/4s
    """
    delay = base_delay * (2 ** max(0, retry - 1))
    jitter_amount = delay * jitter
    actual_delay = delay + (rng or random).uniform(-jitter_amount, jitter_amount)
    return max(0.0, actual_delay)


class CallLedger:
    """只追加的调用账本，按派发顺序编号"""

    def __init__(self, entries: Iterable[CallLedgerEntry] = ()):
        self._entries: list[CallLedgerEntry] = list(entries)

    def append(self, entry: CallLedgerEntry) -> None:
        self._entries.append(entry)

    @property
    def entries(self) -> list[CallLedgerEntry]:
        return sorted(self._entries, key=lambda entry: entry.sequence_index)

    @property
    def total(self) -> int:
        return len(self._entries)

    @property
    def retries(self) -> int:
        return sum(entry.retries for entry in self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self):
        return iter(self.entries)

    def to_jsonl(self, **extra: Any) -> str:
        lines = []
        for entry in self.entries:
            record = {**extra, **entry.model_dump(mode="json")}
            lines.append(json.dumps(record, ensure_ascii=False, sort_keys=True))
        return "".join(line + "\n" for line in lines)

    def append_to(self, path: Union[str, Path], **extra: Any) -> None:
        with open(path, "a", encoding="utf-8") as handle:
            handle.write(self.to_jsonl(**extra))

    @classmethod
    def from_jsonl(cls, text: str) -> "CallLedger":
        fields = set(CallLedgerEntry.model_fields)
        entries = []
        for line in text.splitlines():
            if line.strip():
                record = json.loads(line)
                entries.append(CallLedgerEntry(**{k: v for k, v in record.items() if k in fields}))
        return cls(entries)


def ledger_total(ledger: Union[CallLedger, Iterable[CallLedgerEntry]]) -> int:
    """账本中记录的逻辑调用次数（重试不计入）"""
    if isinstance(ledger, CallLedger):
        return ledger.total
    return sum(1 for _ in ledger)


class LLMGateway:
    """带重试、并发上限、调用预算和账本的统一补全入口"""

    def __init__(
        self,
        backend: LLMBackend,
        *,
        ledger: Optional[CallLedger] = None,
        max_in_flight: int = 4,
        max_retries: int = 3,
        base_delay: float = 1.0,
        jitter: float = 0.2,
        request_timeout: float = 300.0,
        call_budget: Optional[int] = None,
        rng: Optional[random.Random] = None,
        sleep: Callable[[float], Awaitable[None]] = anyio.sleep,
    ):
        self.backend = backend
        self.ledger = ledger if ledger is not None else CallLedger()
        self.max_in_flight = max_in_flight
        self.max_retries = max_retries
        self.base_delay = base_delay
        self.jitter = jitter
        self.request_timeout = request_timeout
        self.call_budget = call_budget
        self._rng = rng or random.Random()
        self._sleep = sleep
        self._dispatched = 0
        self._limiter: Optional[anyio.CapacityLimiter] = None

    @property
    def dispatched(self) -> int:
        return self._dispatched

    def _reserve(self) -> int:
        # 无 await，预留与编号是原子的
        if self.call_budget is not None and self._dispatched >= self.call_budget:
            logger.error(f"Call budget exhausted ({self.call_budget}), refusing call {self._dispatched + 1}")
            raise BudgetExceeded(self.call_budget)
        index = self._dispatched
        self._dispatched += 1
        return index

    async def complete(self, request: CompletionRequest) -> CompletionResponse:
        """
        执行一次逻辑调用：恰好追加一条账本记录

        Raises:
            AuthError: 凭证错误
            RateLimited: 重试耗尽
            EmptyCompletion: 返回空文本
            BudgetExceeded: 超出调用预算（调用之前抛出）
        """
        index = self._reserve()
        if self._limiter is None:
            self._limiter = anyio.CapacityLimiter(self.max_in_flight)

        started = time.perf_counter()
        retries = 0
        response: Optional[CompletionResponse] = None
        error: Optional[BaseException] = None
        async with self._limiter:
            try:
                response, retries = await self._complete_with_retry(request)
            except RateLimited as e:
                error = e
                retries = e.attempts - 1
            except Exception as e:
                error = e

        if response is not None and not response.text.strip():
            error = EmptyCompletion(f"{request.agent_name}: backend returned an empty completion")

        self.ledger.append(
            CallLedgerEntry(
                agent_name=request.agent_name,
                prompt_chars=request.prompt_chars,
                completion_chars=len(response.text) if response else 0,
                used_search_tool=bool(response and response.search_performed),
                wall_time=time.perf_counter() - started,
                sequence_index=index,
                retries=max(0, retries),
                error=f"{type(error).__name__}: {error}" if error else None,
            )
        )
        if error is not None:
            logger.error(f"Call #{index} ({request.agent_name}) failed: {error}")
            raise error
        logger.debug(
            f"Call #{index} ({request.agent_name}) ok: {len(response.text)} chars, "
            f"search={response.search_performed}, retries={retries}"
        )
        return response

    async def _complete_with_retry(self, request: CompletionRequest) -> tuple[CompletionResponse, int]:
        current_retry = 0
        last_error: Optional[BaseException] = None

        while current_retry <= self.max_retries:
            with move_on_after(self.request_timeout) as scope:
                try:
                    response = await self.backend.generate(request)
                    if current_retry > 0:
                        logger.info(f"{request.agent_name}: succeeded after {current_retry} retries")
                    return response, current_retry
                except TransientBackendError as e:
                    last_error = e

            if scope.cancelled_caught:
                last_error = TimeoutError(f"request timed out after {self.request_timeout}s")

            current_retry += 1
            if current_retry > self.max_retries:
                break
            delay = calculate_backoff_delay(current_retry, self.base_delay, self.jitter, self._rng)
            logger.warning(
                f"{request.agent_name}: transient failure ({last_error}), "
                f"retry {current_retry}/{self.max_retries} in {delay:.2f}s"
            )
            await self._sleep(delay)

        raise RateLimited(
            f"{request.agent_name}: giving up after {self.max_retries + 1} attempts, last error: {last_error}",
            attempts=self.max_retries + 1,
        )

    async def close(self) -> None:
        await self.backend.close()


class OpenAIBackend:
    """OpenAI Responses API 后端，联网搜索使用 web_search_preview 工具"""

    name = "openai"

    def __init__(self, api_key: str, model: str = "gpt-4o", base_url: Optional[str] = None):
        """初始化连接器"""
        if not api_key:
            raise AuthError("empty API key")
        self.model = model
        self.client = AsyncOpenAI(api_key=api_key, base_url=base_url, max_retries=0)
        self._closed = False
        self._closing = False

    async def generate(self, request: CompletionRequest) -> CompletionResponse:
        if self._closed:
            raise RuntimeError("Connector is closed")

        kwargs: dict[str, Any] = {
            "model": self.model,
            "instructions": request.system_prompt,
            "input": request.user_prompt,
            "temperature": request.temperature,
        }
        if request.max_output:
            kwargs["max_output_tokens"] = request.max_output
        if request.enable_search:
            kwargs["tools"] = [{"type": "web_search_preview"}]

        try:
            response = await self.client.responses.create(**kwargs)
        except (openai.AuthenticationError, openai.PermissionDeniedError) as e:
            raise AuthError(str(e)) from e
        except (openai.RateLimitError, openai.APIConnectionError, openai.InternalServerError) as e:
            raise TransientBackendError(str(e)) from e
        except openai.APIStatusError as e:
            logger.error(f"OpenAI request rejected: {e}")
            raise BackendError(str(e)) from e

        searched = any(getattr(item, "type", None) == "web_search_call" for item in response.output)
        usage = response.usage.model_dump() if response.usage is not None else {}
        return CompletionResponse(
            text=response.output_text or "",
            search_performed=searched,
            provider_metadata={"model": response.model, "response_id": response.id, "usage": usage},
        )

    async def close(self, timeout: float = 10.0) -> None:
        """关闭连接器"""
        if self._closed or self._closing:
            logger.debug("Connector already closed or closing")
            return

        self._closing = True
        logger.info("Closing LLM connector...")
        try:
            with move_on_after(timeout) as scope:
                await self.client.close()
            if scope.cancelled_caught:
                logger.error(f"Connector close timed out after {timeout} seconds")
                raise TimeoutError("Failed to close connector within timeout period")
        finally:
            self._closed = True
            self._closing = False
            logger.info("LLM connector closed")
