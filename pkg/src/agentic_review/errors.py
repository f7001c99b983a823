"""
评审引擎异常模块
定义流水线、网关、解析与评估使用的异常层次
"""

from typing import Optional


class ReviewEngineError(Exception):
    """所有引擎异常的基类"""


class PreconditionError(ReviewEngineError, ValueError):
    """调用前置条件不满足"""


class TemplateError(ReviewEngineError):
    """提示词模板渲染失败（缺少占位符等）"""


# 网关错误

class GatewayError(ReviewEngineError):
    """LLM 网关错误基类"""


class AuthError(GatewayError):
    """凭证缺失或无效"""


class RateLimited(GatewayError):
    """重试次数耗尽后仍然失败"""

    def __init__(self, message: str, attempts: int = 0):
        super().__init__(message)
        self.attempts = attempts


class EmptyCompletion(GatewayError):
    """后端返回空文本"""


class BudgetExceeded(GatewayError):
    """调用预算已用尽，在越界调用之前中止"""

    def __init__(self, budget: int):
        super().__init__(f"call budget of {budget} exhausted")
        self.budget = budget


class TransientBackendError(GatewayError):
    """可重试的后端错误（限流、超时、连接、5xx）"""


class BackendError(GatewayError):
    """不可重试的后端错误"""


# 解析错误

class ParseError(ReviewEngineError):
    """模型输出解析错误基类"""


class NoJsonFound(ParseError):
    """文本中没有 JSON 候选"""


class MalformedJson(ParseError):
    """找到了 JSON 候选但无法解析"""

    def __init__(self, message: str, candidate: str):
        super().__init__(message)
        self.candidate = candidate


class SchemaMismatch(ParseError):
    """JSON 结构与期望的模式不符"""

    def __init__(self, message: str, path: str = "$"):
        super().__init__(f"{path}: {message}")
        self.path = path


class CountMismatch(ParseError):
    """返回的问题数量与请求不一致"""

    def __init__(self, expected: int, actual: int):
        super().__init__(f"expected {expected} questions, got {actual}")
        self.expected = expected
        self.actual = actual


class MissingDimension(ParseError):
    """评审裁决缺少某个维度"""

    def __init__(self, key: str):
        super().__init__(f"judge output is missing {key!r}")
        self.key = key


class ScoreOutOfRange(ParseError):
    """分数不是 1-10 的整数"""

    def __init__(self, key: str, value: object):
        super().__init__(f"{key!r} must be an integer in [1, 10], got {value!r}")
        self.key = key
        self.value = value


# 编排错误

class StageFailed(ReviewEngineError):
    """流水线某个阶段失败"""

    def __init__(self, stage: str, cause: Optional[BaseException] = None):
        detail = f"{type(cause).__name__}: {cause}" if cause else "unknown error"
        super().__init__(f"stage {stage!r} failed: {detail}")
        self.stage = stage
        self.cause = cause


class ManifestCorrupt(ReviewEngineError):
    """产物目录缺少或含有无法读取的 manifest"""


class InputDrift(ReviewEngineError):
    """恢复时论文或配置的哈希与 manifest 不一致"""


# 评估错误

class DegenerateEmbedding(ReviewEngineError):
    """零向量无法计算余弦相似度"""


class DegenerateInput(ReviewEngineError):
    """常量向量无法计算相关系数"""


class LengthMismatch(ReviewEngineError):
    """成对输入长度不一致"""


class ProviderUnavailable(ReviewEngineError):
    """嵌入服务不可用"""
