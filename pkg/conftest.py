from datetime import date

import pytest

from agentic_review.config import PipelineConfig
from agentic_review.mock import MockBackend, MockScript
from agentic_review.prompts import default_guidelines
from agentic_review.types import PaperArtifact

CUTOFF = date(2024, 5, 22)

PAPER_TEXT = """DBRNet: Disentangled Balancing Representations for Dose-Response Estimation
Anonymous Authors

Abstract
We study dose-response curve estimation from observational data with continuous treatments.
We propose DBRNet, which disentangles instrumental, confounding and adjustment factors and
re-weights samples using the confounding representation only.

1 Introduction
Estimating the effect of a continuous treatment is central to dosing decisions.

2 Method
DBRNet learns three encoders and a varying-coefficient head.

3 Experiments
DBRNet reduces MISE against VCNet and DRNet on synthetic, IHDP and News data.
"""


@pytest.fixture
def paper() -> PaperArtifact:
    return PaperArtifact.from_text(PAPER_TEXT, CUTOFF, paper_id="dbrnet")


@pytest.fixture
def guidelines():
    return default_guidelines()


@pytest.fixture
def demo_script() -> MockScript:
    return MockScript.demo()


@pytest.fixture
def demo_backend(demo_script) -> MockBackend:
    return MockBackend(demo_script)


@pytest.fixture
def config() -> PipelineConfig:
    return PipelineConfig()


def script_with(script: MockScript, match: str, **update) -> MockScript:
    """返回把 match 对应规则替换后的脚本副本"""
    rules = tuple(rule.model_copy(update=update) if rule.match == match else rule for rule in script.rules)
    return script.model_copy(update={"rules": rules})
