"""
配置模块
流水线、后端与嵌入服务的类型化配置，可从单个 JSON 文件加载；
密钥只从环境变量 <PROVIDER>_API_KEY 读取
"""

import logging
import math
import os
from pathlib import Path
from typing import Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, model_validator

from .embeddings import (
    DEFAULT_HF_MODEL,
    EmbeddingProvider,
    HashingEmbedder,
    HuggingFaceEmbedder,
    OpenAIEmbedder,
)
from .errors import AuthError, PreconditionError
from .llm import DEFAULT_TEMPERATURE, LLMBackend, OpenAIBackend
from .mock import MockBackend, MockScript
from .types import Aspect, canonical_dumps, content_hash

logger = logging.getLogger(__name__)

# 摘要、初始检索、史学家、基线侦察、两次提问、评审生成
FIXED_CALLS = 7


def allocate_questions(
    num_qa: int, allocation: Optional[dict[Aspect, int]] = None
) -> dict[Aspect, int]:
    """
    在三个评审维度之间分配问题数

    缺省时新颖性取 ceil(N/2)，剩余部分按 ceil 分给技术可靠性，余下给清晰度，
    N=10 时为 5/3/2
    """
    if num_qa < 1:
        raise PreconditionError("num_qa must be at least 1")
    if allocation is not None:
        counts = {aspect: allocation.get(aspect, 0) for aspect in Aspect}
        if sum(counts.values()) != num_qa or any(n < 0 for n in counts.values()):
            raise PreconditionError(f"question allocation {counts} does not sum to num_qa={num_qa}")
        return counts
    novelty = math.ceil(num_qa / 2)
    rest = num_qa - novelty
    soundness = math.ceil(rest / 2)
    return {
        Aspect.NOVELTY_SIGNIFICANCE: novelty,
        Aspect.TECHNICAL_SOUNDNESS: soundness,
        Aspect.CLARITY_PRESENTATION: rest - soundness,
    }


class PipelineConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    k_expansion_rounds: int = Field(default=3, ge=0)
    num_qa: int = Field(default=10, ge=1)
    temperature: float = Field(default=DEFAULT_TEMPERATURE, ge=0.0, le=2.0)
    max_in_flight: int = Field(default=4, ge=1)
    strict_parsing: bool = False
    artifact_dir: Optional[Path] = None
    call_budget: Optional[int] = Field(default=None, ge=1)
    question_allocation: Optional[dict[Aspect, int]] = None
    paper_char_budget: int = Field(default=200_000, ge=1000)
    templates_dir: Optional[Path] = None
    max_retries: int = Field(default=3, ge=0)
    request_timeout: float = Field(default=300.0, gt=0)

    @model_validator(mode="after")
    def _check(self) -> "PipelineConfig":
        allocate_questions(self.num_qa, self.question_allocation)
        if self.call_budget is not None and self.call_budget < self.required_calls:
            logger.warning(
                f"call_budget={self.call_budget} is below the {self.required_calls} calls "
                f"a full run needs; the run will stop with BudgetExceeded"
            )
        return self

    @property
    def required_calls(self) -> int:
        return FIXED_CALLS + self.k_expansion_rounds + self.num_qa

    @property
    def allocation(self) -> dict[Aspect, int]:
        return allocate_questions(self.num_qa, self.question_allocation)

    def fingerprint(self) -> str:
        """影响产物内容的配置项的哈希；目录、并发与预算不参与"""
        relevant = self.model_dump(
            mode="json",
            include={
                "k_expansion_rounds", "num_qa", "temperature", "strict_parsing",
                "question_allocation", "paper_char_budget", "templates_dir",
            },
        )
        return content_hash(canonical_dumps(relevant))


class BackendSettings(BaseModel):
    """provider 为 mock 时使用脚本后端，其余按 OpenAI 兼容接口处理"""

    model_config = ConfigDict(frozen=True)

    provider: str = "openai"
    model: str = "gpt-4o"
    base_url: Optional[str] = None
    mock_script: Optional[Path] = None


class EmbedderSettings(BaseModel):
    model_config = ConfigDict(frozen=True)

    provider: Literal["hashing", "huggingface", "openai"] = "hashing"
    model: Optional[str] = None
    dimensions: int = Field(default=256, ge=1)
    seed: int = 0


class AppConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    pipeline: PipelineConfig = Field(default_factory=PipelineConfig)
    backend: BackendSettings = Field(default_factory=BackendSettings)
    judge: Optional[BackendSettings] = None
    embedder: EmbedderSettings = Field(default_factory=EmbedderSettings)
    seed: int = 0

    @property
    def judge_backend(self) -> BackendSettings:
        return self.judge or self.backend


def load_config_file(path: Union[str, Path]) -> AppConfig:
    logger.info(f"Loading config from {path}")
    return AppConfig.model_validate_json(Path(path).read_text(encoding="utf-8"))


def api_key_for(provider: str) -> str:
    """读取 <PROVIDER>_API_KEY"""
    name = f"{provider.upper().replace('-', '_')}_API_KEY"
    api_key = os.environ.get(name)
    if not api_key:
        raise AuthError(f"{name} is not set")
    return api_key


def create_backend(settings: BackendSettings) -> LLMBackend:
    if settings.provider == "mock":
        script = MockScript.from_file(settings.mock_script) if settings.mock_script else MockScript.demo()
        logger.info(f"Using mock backend ({len(script.rules)} rules)")
        return MockBackend(script)
    logger.info(f"Using {settings.provider} backend, model {settings.model}")
    return OpenAIBackend(api_key_for(settings.provider), model=settings.model, base_url=settings.base_url)


def create_embedder(settings: EmbedderSettings) -> EmbeddingProvider:
    if settings.provider == "hashing":
        return HashingEmbedder(dimensions=settings.dimensions, seed=settings.seed)
    if settings.provider == "huggingface":
        return HuggingFaceEmbedder(api_key_for("huggingface"), model=settings.model or DEFAULT_HF_MODEL)
    return OpenAIEmbedder(api_key_for("openai"), model=settings.model or "text-embedding-3-small")
