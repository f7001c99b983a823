"""
提示词模板模块
模板以文本资源形式随包发布（prompts/<name>.system.txt 与 <name>.user.txt），
使用 str.format 语法，字面量花括号写作 {{ 和 }}
"""

import logging
import string
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Optional, Union

from .errors import TemplateError
from .types import ReviewGuidelines

logger = logging.getLogger(__name__)

AGENT_TEMPLATES = (
    "summarizer",
    "literature_reviewer",
    "literature_expander",
    "historian",
    "baseline_scout",
    "novelty_questions",
    "aspect_questions",
    "novelty_answer",
    "aspect_answer",
    "review_generator",
)
EVALUATION_TEMPLATES = ("sxs_judge", "hmax_judge", "gains_summary")
ALL_TEMPLATES = AGENT_TEMPLATES + EVALUATION_TEMPLATES

_formatter = string.Formatter()


def placeholders_of(text: str) -> frozenset[str]:
    """返回模板文本中的全部占位符名"""
    names = set()
    try:
        for _, field_name, _, _ in _formatter.parse(text):
            if field_name is not None:
                names.add(field_name)
    except ValueError as e:
        raise TemplateError(f"unbalanced braces in template: {e}") from e
    return frozenset(names)


@dataclass(frozen=True)
class PromptTemplate:
    """一个智能体或评审员的系统/用户提示词对"""

    name: str
    system_text: str
    user_text: str
    placeholders: frozenset[str] = field(init=False)

    def __post_init__(self):
        object.__setattr__(
            self, "placeholders", placeholders_of(self.system_text) | placeholders_of(self.user_text)
        )

    def render(self, **values: Any) -> tuple[str, str]:
        """
        渲染模板

        Args:
            **values: 占位符取值，多余的键被忽略

        Returns:
            tuple[str, str]: (system_prompt, user_prompt)

        Raises:
            TemplateError: 缺少占位符取值
        """
        missing = sorted(self.placeholders - values.keys())
        if missing:
            raise TemplateError(f"template {self.name!r} is missing values for: {', '.join(missing)}")
        used = {key: values[key] for key in self.placeholders}
        return self.system_text.format(**used), self.user_text.format(**used)


def _strip_final_newline(text: str) -> str:
    return text[:-1] if text.endswith("\n") else text


def _read_asset(filename: str, templates_dir: Optional[Union[str, Path]]) -> str:
    if templates_dir is not None:
        candidate = Path(templates_dir) / filename
        if candidate.is_file():
            logger.debug(f"Using template override {candidate}")
            return candidate.read_text(encoding="utf-8")
    resource = resources.files("agentic_review").joinpath("prompts", filename)
    try:
        return resource.read_text(encoding="utf-8")
    except FileNotFoundError as e:
        raise TemplateError(f"no template asset named {filename!r}") from e


def load_template(name: str, templates_dir: Optional[Union[str, Path]] = None) -> PromptTemplate:
    """加载模板；templates_dir 中存在的文件优先于内置资源"""
    system_text = _read_asset(f"{name}.system.txt", templates_dir)
    user_text = _read_asset(f"{name}.user.txt", templates_dir)
    return PromptTemplate(
        name=name,
        system_text=_strip_final_newline(system_text),
        user_text=_strip_final_newline(user_text),
    )


class TemplateLibrary:
    """按名称缓存已加载的模板"""

    def __init__(self, templates_dir: Optional[Union[str, Path]] = None):
        self.templates_dir = templates_dir
        self._cache: dict[str, PromptTemplate] = {}

    def get(self, name: str) -> PromptTemplate:
        if name not in self._cache:
            self._cache[name] = load_template(name, self.templates_dir)
        return self._cache[name]


def default_guidelines_text() -> str:
    return _strip_final_newline(_read_asset("default_guidelines.txt", None))


def default_guidelines() -> ReviewGuidelines:
    """内置的 ICLR 风格评审指南，要求 JSON 输出并给出整数 rating"""
    return ReviewGuidelines(venue_name="ICLR", guideline_text=default_guidelines_text())
