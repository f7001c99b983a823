"""
Agentic Review package
多智能体论文评审流水线与评估工具
"""

from .config import AppConfig, PipelineConfig
from .errors import ReviewEngineError
from .pipeline import ReviewBundle, resume_pipeline, run_diversity_batch, run_pipeline
from .types import PaperArtifact, Review, ReviewGuidelines

__version__ = "0.1.0"

__all__ = [
    "AppConfig",
    "PaperArtifact",
    "PipelineConfig",
    "Review",
    "ReviewBundle",
    "ReviewEngineError",
    "ReviewGuidelines",
    "resume_pipeline",
    "run_diversity_batch",
    "run_pipeline",
]


def get_version():
    return __version__
