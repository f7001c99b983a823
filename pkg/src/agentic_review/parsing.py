"""
模型输出解析模块
从自由文本中抽取 JSON、分节标题与列表项
"""

import json
import logging
import re
from dataclasses import dataclass, field
from typing import Any, Iterator

from .errors import MalformedJson, NoJsonFound, SchemaMismatch

logger = logging.getLogger(__name__)

_JSON_FENCE = re.compile(r"```json[ \t]*\n?(.*?)(?:```|\Z)", re.DOTALL | re.IGNORECASE)
_PLAIN_FENCE = re.compile(r"```(?!json)[A-Za-z0-9_+-]*[ \t]*\n(.*?)```", re.DOTALL | re.IGNORECASE)
_BULLET = re.compile(r"^\s*(?:[-*•]|\d+[.)])\s+(.*\S)\s*$")
_HEADING = re.compile(
    r"^\s*(?:#{1,6}\s*|\d+\.\s+|[A-Z]\.\s+)?\**\s*(?P<title>[^*:\n]{2,80}?)\s*\**\s*:?\s*\**\s*$"
)
_HEADING_MARKER = re.compile(r"^\s*(?:#{1,6}\s|\d+\.\s|[A-Z]\.\s|\*\*)")
_CLOSERS = {"{": "}", "[": "]"}


def extract_json(text: str) -> Any:
    """
    返回文本中第一个合法的 JSON 值

    依次搜索: (a) 标注 json 的代码块, (b) 未标注的代码块, (c) 最大的平衡括号片段

    Args:
        text: 模型输出

    Returns:
        Any: 解析得到的 JSON 值

    Raises:
        NoJsonFound: 没有任何候选
        MalformedJson: 有候选但都无法解析
    """
    candidates: list[str] = []
    for pattern in (_JSON_FENCE, _PLAIN_FENCE):
        for match in pattern.finditer(text):
            block = match.group(1).strip()
            if not block:
                continue
            try:
                return json.loads(block)
            except json.JSONDecodeError:
                candidates.append(block)
                spans = sorted(balanced_spans(block), key=len, reverse=True)
                for span in spans:
                    try:
                        return json.loads(span)
                    except json.JSONDecodeError:
                        continue

    spans = sorted(balanced_spans(text), key=len, reverse=True)
    for span in spans:
        try:
            return json.loads(span)
        except json.JSONDecodeError:
            continue
    candidates.extend(spans)

    if not candidates:
        raise NoJsonFound("no JSON object or array found in model output")
    largest = max(candidates, key=len)
    raise MalformedJson(f"found {len(candidates)} JSON candidate(s), none parse", candidate=largest)


def balanced_spans(text: str) -> Iterator[str]:
    """枚举所有括号平衡的 {...} 与 [...] 片段（忽略字符串内部的括号）"""
    for start, char in enumerate(text):
        if char not in _CLOSERS:
            continue
        end = _match_closing(text, start)
        if end is not None:
            yield text[start : end + 1]


def _match_closing(text: str, start: int) -> int | None:
    stack = []
    in_string = False
    escaped = False
    for index in range(start, len(text)):
        char = text[index]
        if in_string:
            if escaped:
                escaped = False
            elif char == "\\":
                escaped = True
            elif char == '"':
                in_string = False
            continue
        if char == '"':
            in_string = True
        elif char in _CLOSERS:
            stack.append(_CLOSERS[char])
        elif char in "}]":
            if not stack or stack.pop() != char:
                return None
            if not stack:
                return index
    return None


def require_keys(obj: Any, keys: tuple[str, ...], path: str = "$") -> dict[str, Any]:
    """确认 obj 是包含全部 keys 的对象，否则抛出带路径的 SchemaMismatch"""
    if not isinstance(obj, dict):
        raise SchemaMismatch(f"expected an object, got {type(obj).__name__}", path)
    for key in keys:
        if key not in obj:
            raise SchemaMismatch(f"missing key {key!r}", f"{path}.{key}")
    return obj


def require_list(obj: Any, path: str) -> list[Any]:
    if not isinstance(obj, list):
        raise SchemaMismatch(f"expected a list, got {type(obj).__name__}", path)
    return obj


def bullet_items(text: str) -> list[str]:
    items = []
    for line in text.splitlines():
        match = _BULLET.match(line)
        if match:
            items.append(match.group(1).strip())
    return items


def strip_markup(text: str) -> str:
    return re.sub(r"[*_`]+", "", text).strip()


_YEAR = re.compile(r"\b(?:19|20)\d{2}\b")
_PAPER_LIST_WORDS = ("paper", "reference", "prior art", "related work", "citation")


def _is_paper_list_heading(line: str) -> bool:
    if _BULLET.match(line) and not _HEADING_MARKER.match(line):
        return False
    plain = strip_markup(line).lstrip("#").strip()
    if not (plain.endswith(":") or line.lstrip().startswith("#")) or len(plain.split()) > 10:
        return False
    return any(word in plain.lower() for word in _PAPER_LIST_WORDS)


def cited_papers(text: str) -> list[str]:
    """
    取出回答中的文献列表条目

    有 "Relevant papers:" 一类标题时取其后的列表，否则取最后一段连续列表；
    只保留带年份的条目，推理过程中的要点不算文献
    """
    lines = text.splitlines()
    headings = [i for i, line in enumerate(lines) if _is_paper_list_heading(line)]
    if headings:
        items = bullet_items("\n".join(lines[headings[-1] + 1 :]))
    else:
        items = []
        for line in reversed(lines):
            match = _BULLET.match(line)
            if match:
                items.insert(0, match.group(1).strip())
            elif line.strip() and items:
                break
    return [strip_markup(item) for item in items if _YEAR.search(item)]


@dataclass
class SummarySections:
    claims: list[str] = field(default_factory=list)
    method: str = ""
    evidence: list[str] = field(default_factory=list)


_CLAIM_WORDS = ("contribution", "claim")
_METHOD_WORDS = ("method", "approach", "architecture", "model")
_EVIDENCE_WORDS = ("result", "experiment", "evidence", "evaluation", "finding")


def split_sections(text: str) -> list[tuple[str, list[str]]]:
    """按短标题行切分文本，返回 (标题, 正文行) 列表；标题前的内容标题为空"""
    sections: list[tuple[str, list[str]]] = [("", [])]
    for line in text.splitlines():
        title = heading_title(line)
        if title is not None:
            sections.append((title, []))
        else:
            sections[-1][1].append(line)
    return sections


def heading_title(line: str) -> str | None:
    stripped = line.strip()
    if not stripped or _BULLET.match(line) and not re.match(r"^\s*\d+\.\s", line):
        return None
    if not (_HEADING_MARKER.match(line) or stripped.endswith(":")):
        return None
    match = _HEADING.match(line)
    if not match:
        return None
    title = strip_markup(match.group("title"))
    if not title or len(title.split()) > 8 or title.endswith("."):
        return None
    return title


def parse_summary_sections(text: str) -> SummarySections:
    """
    从摘要文本中粗略拆出核心主张、方法与证据

    只做标题+列表的启发式抽取，识别不到时对应字段为空
    """
    result = SummarySections()
    method_lines: list[str] = []
    for title, body in split_sections(text):
        lowered = title.lower()
        if not lowered:
            continue
        body_text = "\n".join(body)
        if any(word in lowered for word in _CLAIM_WORDS):
            result.claims.extend(strip_markup(item) for item in bullet_items(body_text))
        elif any(word in lowered for word in _EVIDENCE_WORDS):
            result.evidence.extend(strip_markup(item) for item in bullet_items(body_text))
        elif any(word in lowered for word in _METHOD_WORDS):
            method_lines.extend(strip_markup(line) for line in body if line.strip())
    result.method = "\n".join(line for line in method_lines if line)
    return result
