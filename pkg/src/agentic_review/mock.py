"""
确定性脚本化 Mock 后端
按顺序匹配请求中的子串或正则，返回预置文本，用于离线测试和演示
"""

import json
import logging
import re
from collections import defaultdict
from importlib import resources
from pathlib import Path
from typing import Literal, Optional, Union

import anyio
from pydantic import BaseModel, ConfigDict, model_validator

from .errors import BackendError, TransientBackendError
from .llm import CompletionRequest, CompletionResponse

logger = logging.getLogger(__name__)


class MockRule(BaseModel):
    """一条匹配规则；responses 按命中次数循环"""

    model_config = ConfigDict(frozen=True)

    match: str
    regex: bool = False
    field: Literal["system", "user", "any"] = "any"
    response: Optional[str] = None
    responses: tuple[str, ...] = ()
    transient_failures: int = 0
    fail: Optional[str] = None

    @model_validator(mode="after")
    def _has_output(self) -> "MockRule":
        if self.fail is None and self.response is None and not self.responses:
            raise ValueError(f"rule {self.match!r} needs response, responses or fail")
        return self

    def matches(self, request: CompletionRequest) -> bool:
        if self.field == "system":
            haystack = request.system_prompt
        elif self.field == "user":
            haystack = request.user_prompt
        else:
            haystack = request.system_prompt + "\n\n" + request.user_prompt
        if self.regex:
            return re.search(self.match, haystack) is not None
        return self.match in haystack

    def output(self, hit: int) -> str:
        if self.responses:
            return self.responses[hit % len(self.responses)]
        return self.response or ""


class MockScript(BaseModel):
    model_config = ConfigDict(frozen=True)

    rules: tuple[MockRule, ...] = ()
    default_response: str = "MOCK RESPONSE"

    def find(self, request: CompletionRequest) -> Optional[int]:
        for index, rule in enumerate(self.rules):
            if rule.matches(request):
                return index
        return None

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "MockScript":
        return cls.model_validate_json(Path(path).read_text(encoding="utf-8"))

    @classmethod
    def demo(cls) -> "MockScript":
        """覆盖每个智能体和评估提示词的内置脚本"""
        text = resources.files("agentic_review").joinpath("data/demo_script.json").read_text(encoding="utf-8")
        return cls.model_validate(json.loads(text))


class MockBackend:
    """脚本化后端：同样的脚本和请求序列总是得到同样的响应"""

    name = "mock"

    def __init__(self, script: Optional[MockScript] = None):
        self.script = script or MockScript()
        self.requests: list[CompletionRequest] = []
        self._hits: defaultdict[int, int] = defaultdict(int)

    async def generate(self, request: CompletionRequest) -> CompletionResponse:
        await anyio.sleep(0)
        self.requests.append(request)

        index = self.script.find(request)
        if index is None:
            logger.debug(f"Mock: no rule matched {request.agent_name}, using default response")
            return CompletionResponse(
                text=self.script.default_response,
                search_performed=request.enable_search,
                provider_metadata={"rule": None},
            )

        rule = self.script.rules[index]
        hit = self._hits[index]
        self._hits[index] += 1
        if rule.fail is not None:
            raise BackendError(rule.fail)
        if hit < rule.transient_failures:
            raise TransientBackendError(f"mock transient failure {hit + 1}/{rule.transient_failures}")
        return CompletionResponse(
            text=rule.output(hit - rule.transient_failures),
            search_performed=request.enable_search,
            provider_metadata={"rule": index},
        )

    async def close(self) -> None:
        return None
