"""
文本嵌入模块
评审多样性指标使用的嵌入服务：测试用的特征哈希嵌入、注入向量嵌入，
以及 HuggingFace / OpenAI 远程嵌入
"""

import hashlib
import logging
import re
from typing import Mapping, Optional, Protocol, Sequence

import aiohttp
import numpy as np
import openai
from openai import AsyncOpenAI
from pydantic import field_validator

from .errors import DegenerateEmbedding, PreconditionError, ProviderUnavailable
from .types import FrozenModel

logger = logging.getLogger(__name__)

DEFAULT_HF_MODEL = "sentence-transformers/all-distilroberta-v1"
HF_INFERENCE_URL = "https://api-inference.huggingface.co/pipeline/feature-extraction"
_TOKEN = re.compile(r"\w+", re.UNICODE)


class EmbeddingVector(FrozenModel):
    values: tuple[float, ...]
    model_id: str

    @field_validator("values")
    @classmethod
    def _non_empty(cls, value: tuple[float, ...]) -> tuple[float, ...]:
        if not value:
            raise ValueError("embedding must have at least one dimension")
        return value

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.float64)


class EmbeddingProvider(Protocol):
    model_id: str

    async def embed(self, text: str) -> EmbeddingVector: ...

    async def close(self) -> None: ...


async def embed(text: str, provider: EmbeddingProvider) -> EmbeddingVector:
    """
    计算文本嵌入

    Raises:
        PreconditionError: 文本为空
        ProviderUnavailable: 嵌入服务不可用
        DegenerateEmbedding: 服务对非空文本返回了零向量
    """
    if not text or not text.strip():
        raise PreconditionError("cannot embed empty text")
    vector = await provider.embed(text)
    if not any(vector.values):
        raise DegenerateEmbedding(f"provider {provider.model_id} returned an all-zero embedding")
    return vector


def _features(text: str) -> list[str]:
    words = _TOKEN.findall(text.lower())
    if not words:
        # 纯标点或符号：退回到整段文本（去掉空白）的字符三元组
        padded = "<" + "".join(text.split()) + ">"
        return [f"c:{padded[i:i + 3]}" for i in range(len(padded) - 2)]
    features = [f"w:{word}" for word in words]
    for word in words:
        padded = f"<{word}>"
        features.extend(f"c:{padded[i:i + 3]}" for i in range(len(padded) - 2))
    return features


class HashingEmbedder:
    """
    带种子的特征哈希嵌入（词 + 字符三元组计数）

    向量分量非负，因此任意两条评审的余弦相似度落在 [0, 1]
    """

    def __init__(self, dimensions: int = 256, seed: int = 0):
        if dimensions < 1:
            raise PreconditionError("dimensions must be positive")
        self.dimensions = dimensions
        self.seed = seed
        self.model_id = f"hashing-{dimensions}-seed{seed}"

    def _bucket(self, feature: str) -> int:
        digest = hashlib.blake2b(f"{self.seed}:{feature}".encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "big") % self.dimensions

    def vectorize(self, text: str) -> np.ndarray:
        vector = np.zeros(self.dimensions, dtype=np.float64)
        for feature in _features(text):
            vector[self._bucket(feature)] += 1.0
        return vector

    async def embed(self, text: str) -> EmbeddingVector:
        return EmbeddingVector(values=tuple(self.vectorize(text).tolist()), model_id=self.model_id)

    async def close(self) -> None:
        return None


class StaticEmbedder:
    """按文本查表返回预置向量"""

    model_id = "static"

    def __init__(self, vectors: Mapping[str, Sequence[float]]):
        self._vectors = {text: tuple(float(v) for v in values) for text, values in vectors.items()}

    async def embed(self, text: str) -> EmbeddingVector:
        if text not in self._vectors:
            raise ProviderUnavailable(f"no static vector registered for text {text[:40]!r}")
        return EmbeddingVector(values=self._vectors[text], model_id=self.model_id)

    async def close(self) -> None:
        return None


class HuggingFaceEmbedder:
    """HuggingFace 推理接口的 feature-extraction 管线"""

    def __init__(
        self,
        api_key: str,
        model: str = DEFAULT_HF_MODEL,
        base_url: str = HF_INFERENCE_URL,
        timeout: float = 60.0,
    ):
        self.api_key = api_key
        self.model_id = model
        self.url = f"{base_url.rstrip('/')}/{model}"
        self.timeout = aiohttp.ClientTimeout(total=timeout)
        self._session: Optional[aiohttp.ClientSession] = None

    def _get_session(self) -> aiohttp.ClientSession:
        if self._session is None or self._session.closed:
            self._session = aiohttp.ClientSession(
                timeout=self.timeout,
                headers={"Authorization": f"Bearer {self.api_key}"},
            )
        return self._session

    async def embed(self, text: str) -> EmbeddingVector:
        payload = {"inputs": text, "options": {"wait_for_model": True}}
        try:
            async with self._get_session().post(self.url, json=payload) as response:
                if response.status != 200:
                    body = await response.text()
                    raise ProviderUnavailable(f"HuggingFace returned {response.status}: {body[:200]}")
                data = await response.json()
        except aiohttp.ClientError as e:
            logger.error(f"HuggingFace embedding request failed: {e}", exc_info=True)
            raise ProviderUnavailable(str(e)) from e

        array = np.asarray(data, dtype=np.float64)
        # 部分模型返回逐 token 向量，做均值池化
        while array.ndim > 1:
            array = array.mean(axis=0)
        return EmbeddingVector(values=tuple(array.tolist()), model_id=self.model_id)

    async def close(self) -> None:
        if self._session is not None and not self._session.closed:
            await self._session.close()
            logger.debug("Closed aiohttp session")


class OpenAIEmbedder:
    def __init__(self, api_key: str, model: str = "text-embedding-3-small", base_url: Optional[str] = None):
        self.model_id = model
        self.client = AsyncOpenAI(api_key=api_key, base_url=base_url)

    async def embed(self, text: str) -> EmbeddingVector:
        try:
            response = await self.client.embeddings.create(model=self.model_id, input=text)
        except openai.OpenAIError as e:
            logger.error(f"OpenAI embedding request failed: {e}", exc_info=True)
            raise ProviderUnavailable(str(e)) from e
        return EmbeddingVector(values=tuple(response.data[0].embedding), model_id=self.model_id)

    async def close(self) -> None:
        await self.client.close()
