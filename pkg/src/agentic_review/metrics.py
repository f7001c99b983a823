"""
评审指标模块
评审间相似度、多样性分数以及 Pearson / Spearman 相关系数
"""

import logging
import math
from typing import Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from .embeddings import EmbeddingProvider, EmbeddingVector, embed
from .errors import DegenerateEmbedding, DegenerateInput, LengthMismatch, PreconditionError

logger = logging.getLogger(__name__)

VectorLike = Sequence[float] | np.ndarray | EmbeddingVector


def _as_array(vector: VectorLike) -> np.ndarray:
    if isinstance(vector, EmbeddingVector):
        return vector.as_array()
    return np.asarray(vector, dtype=np.float64)


def cosine_similarity(a: VectorLike, b: VectorLike) -> float:
    """
    两个向量的余弦相似度

    Raises:
        DegenerateEmbedding: 任一向量为零向量
        LengthMismatch: 维度不同
    """
    va, vb = _as_array(a), _as_array(b)
    if va.shape != vb.shape:
        raise LengthMismatch(f"vector dimensions differ: {va.shape} vs {vb.shape}")
    aa = float(np.dot(va, va))
    bb = float(np.dot(vb, vb))
    if aa == 0.0 or bb == 0.0:
        raise DegenerateEmbedding("cosine similarity is undefined for a zero vector")
    # sqrt(aa * bb) 而非两个范数相乘，相同向量时结果恰好为 1
    value = float(np.dot(va, vb)) / math.sqrt(aa * bb)
    return max(-1.0, min(1.0, value))


def inter_review_similarity_from_vectors(vectors: Sequence[VectorLike]) -> float:
    """所有有序对 i != j 的平均余弦相似度；由对称性等于无序对的平均"""
    n = len(vectors)
    if n < 2:
        raise PreconditionError("inter-review similarity needs at least 2 reviews")
    total = 0.0
    for i in range(n):
        for j in range(i + 1, n):
            total += cosine_similarity(vectors[i], vectors[j])
    return 2.0 * total / (n * (n - 1))


def review_diversity_from_vectors(vectors: Sequence[VectorLike]) -> float:
    return 1.0 - inter_review_similarity_from_vectors(vectors)


async def embed_reviews(reviews: Sequence[str], provider: EmbeddingProvider) -> list[EmbeddingVector]:
    if len(reviews) < 2:
        raise PreconditionError("inter-review similarity needs at least 2 reviews")
    vectors = [await embed(text, provider) for text in reviews]
    dims = {len(vector.values) for vector in vectors}
    if len(dims) != 1:
        raise LengthMismatch(f"provider {provider.model_id} returned mixed dimensions {sorted(dims)}")
    return vectors


async def inter_review_similarity(reviews: Sequence[str], provider: EmbeddingProvider) -> float:
    return inter_review_similarity_from_vectors(await embed_reviews(reviews, provider))


async def review_diversity_score(reviews: Sequence[str], provider: EmbeddingProvider) -> float:
    """RDS = 1 - 评审间平均相似度"""
    score = 1.0 - await inter_review_similarity(reviews, provider)
    logger.info(f"Review diversity over {len(reviews)} reviews ({provider.model_id}): {score:.4f}")
    return score


def _paired(x: Sequence[float], y: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    if len(x) != len(y):
        raise LengthMismatch(f"paired inputs differ in length: {len(x)} vs {len(y)}")
    if len(x) < 2:
        raise PreconditionError("correlation needs at least 2 pairs")
    return np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)


def _pearson(xa: np.ndarray, ya: np.ndarray) -> float:
    xm = xa - xa.mean()
    ym = ya - ya.mean()
    sxx = float(np.dot(xm, xm))
    syy = float(np.dot(ym, ym))
    if sxx == 0.0 or syy == 0.0:
        raise DegenerateInput("correlation is undefined for a constant vector")
    value = float(np.dot(xm, ym)) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, value))


def pearson_r(x: Sequence[float], y: Sequence[float]) -> float:
    return _pearson(*_paired(x, y))


def spearman_rho(x: Sequence[float], y: Sequence[float]) -> float:
    """秩的 Pearson 相关；并列值取平均秩"""
    xa, ya = _paired(x, y)
    return _pearson(rankdata(xa, method="average"), rankdata(ya, method="average"))


def decision_score_alignment(
    model_scores: Sequence[Optional[float]], human_scores: Sequence[float]
) -> float:
    """模型决策分与人类平均分的 Spearman 相关；模型未给分的条目被排除"""
    if len(model_scores) != len(human_scores):
        raise LengthMismatch(f"{len(model_scores)} model scores vs {len(human_scores)} human scores")
    pairs = [(m, h) for m, h in zip(model_scores, human_scores) if m is not None]
    excluded = len(model_scores) - len(pairs)
    if excluded:
        logger.warning(f"Excluding {excluded} item(s) without a model decision score")
    return spearman_rho([m for m, _ in pairs], [h for _, h in pairs])


def judge_calibration(judge_scores: Sequence[float], human_scores: Sequence[float]) -> float:
    """评审员打分与人类打分的 Pearson 相关"""
    return pearson_r(judge_scores, human_scores)
