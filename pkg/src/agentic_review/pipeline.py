"""
评审流水线编排模块
按依赖顺序执行各智能体，逐阶段原子落盘，支持调用预算与断点续跑
"""

import contextlib
import json
import logging
import os
import tempfile
import time
from pathlib import Path
from typing import Any, Awaitable, Callable, Optional, Sequence, TypeVar, Union

import anyio
from pydantic import Field, ValidationError

from .agents import Agents
from .config import PipelineConfig
from .errors import BudgetExceeded, InputDrift, ManifestCorrupt, PreconditionError, StageFailed
from .llm import CallLedger, LLMBackend, LLMGateway
from .progress import ProgressReporter, StageEvent
from .prompts import TemplateLibrary
from .types import (
    SCHEMA_VERSION,
    Aspect,
    CallLedgerEntry,
    FrozenModel,
    InterrogationLog,
    LiteratureContext,
    MissingItem,
    PaperArtifact,
    Review,
    ReviewGuidelines,
    StructuredSummary,
    canonical_dumps,
    canonical_json,
    content_hash,
)

logger = logging.getLogger(__name__)

T = TypeVar("T")

MANIFEST_FILE = "manifest.json"
LEDGER_FILE = "ledger.jsonl"
STAGE_FILES = {
    "summary": "01_summary.json",
    "literature": "02_literature.json",
    "narrative": "03_narrative.json",
    "scout": "04_scout.json",
    "qa_log": "05_qa_log.json",
    "review": "06_review.json",
}
GROUNDED_ASPECTS = (Aspect.TECHNICAL_SOUNDNESS, Aspect.CLARITY_PRESENTATION)


def paper_hash(paper: PaperArtifact) -> str:
    return content_hash(canonical_json(paper))


def write_json_atomic(path: Path, value: Any) -> None:
    """先写临时文件再 os.replace，崩溃时不会留下半个文件"""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as handle:
            json.dump(value, handle, indent=2, sort_keys=True, ensure_ascii=False)
            handle.write("\n")
            handle.flush()
            os.fsync(handle.fileno())
        os.replace(tmp_name, path)
    except BaseException:
        with contextlib.suppress(OSError):
            os.unlink(tmp_name)
        raise


class ArtifactStore:
    """
    产物目录

    目录结构: manifest.json、01_summary.json ... 06_review.json、ledger.jsonl；
    每个阶段文件是 {schema_version, stage, input_hash, payload} 信封
    """

    def __init__(self, root: Union[str, Path]):
        self.root = Path(root)
        self.manifest: dict[str, Any] = {}

    @property
    def manifest_path(self) -> Path:
        return self.root / MANIFEST_FILE

    @property
    def ledger_path(self) -> Path:
        return self.root / LEDGER_FILE

    def stage_path(self, stage: str) -> Path:
        return self.root / STAGE_FILES[stage]

    def create(self, paper_id: str, paper_digest: str, config_digest: str) -> None:
        """开始一次全新运行，覆盖已有 manifest"""
        self.root.mkdir(parents=True, exist_ok=True)
        self.manifest = {
            "schema_version": SCHEMA_VERSION,
            "paper_id": paper_id,
            "paper_hash": paper_digest,
            "config_hash": config_digest,
            "sessions": 1,
            "stages": {},
        }
        write_json_atomic(self.manifest_path, self.manifest)
        logger.info(f"Created artifact directory {self.root}")

    def open(self, paper_digest: str, config_digest: str) -> None:
        """
        打开已有目录准备续跑

        Raises:
            ManifestCorrupt: manifest 缺失或无法解析
            InputDrift: 论文或配置与 manifest 记录不一致
        """
        try:
            manifest = json.loads(self.manifest_path.read_text(encoding="utf-8"))
        except FileNotFoundError as e:
            raise ManifestCorrupt(f"{self.manifest_path} does not exist") from e
        except (OSError, json.JSONDecodeError) as e:
            raise ManifestCorrupt(f"{self.manifest_path} is unreadable: {e}") from e
        if not isinstance(manifest, dict) or not isinstance(manifest.get("stages"), dict):
            raise ManifestCorrupt(f"{self.manifest_path} has no stage table")
        if manifest.get("schema_version") != SCHEMA_VERSION:
            raise ManifestCorrupt(f"unsupported schema_version {manifest.get('schema_version')!r}")
        if manifest.get("paper_hash") != paper_digest:
            raise InputDrift("paper content differs from the one recorded in the manifest")
        if manifest.get("config_hash") != config_digest:
            raise InputDrift("pipeline configuration differs from the one recorded in the manifest")
        manifest["sessions"] = int(manifest.get("sessions", 0)) + 1
        self.manifest = manifest
        write_json_atomic(self.manifest_path, self.manifest)
        logger.info(f"Resuming artifact directory {self.root} (session {manifest['sessions']})")

    def save_stage(self, stage: str, input_hash: str, payload: Any, **extra: Any) -> None:
        envelope = {
            "schema_version": SCHEMA_VERSION,
            "stage": stage,
            "input_hash": input_hash,
            "payload": payload,
            **extra,
        }
        write_json_atomic(self.stage_path(stage), envelope)
        self.manifest["stages"][stage] = {"file": STAGE_FILES[stage], "input_hash": input_hash, **extra}
        write_json_atomic(self.manifest_path, self.manifest)

    def load_stage(self, stage: str, input_hash: str) -> Optional[Any]:
        """输入哈希一致时返回已保存的 payload，否则返回 None"""
        record = self.manifest.get("stages", {}).get(stage)
        if not record or record.get("input_hash") != input_hash:
            return None
        try:
            envelope = json.loads(self.stage_path(stage).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            logger.warning(f"Ignoring unreadable artifact for stage {stage}: {e}")
            return None
        if envelope.get("input_hash") != input_hash:
            return None
        return envelope.get("payload")

    def append_ledger(self, entries: Sequence[CallLedgerEntry]) -> None:
        if entries:
            CallLedger(entries).append_to(self.ledger_path, session=self.manifest.get("sessions", 1))


class ReviewBundle(FrozenModel):
    paper_id: str
    summary: StructuredSummary
    literature_context: LiteratureContext
    interrogation_log: InterrogationLog
    review: Review
    ledger: tuple[CallLedgerEntry, ...] = ()
    timings: dict[str, float] = Field(default_factory=dict)

    @property
    def ledger_total(self) -> int:
        return len(self.ledger)


async def gather_settled(*thunks: Callable[[], Awaitable[Any]]) -> list[Any]:
    """
    并发运行全部任务并等待它们结束，然后按位置抛出第一个失败

    预算耗尽优先于其他失败
    """
    results: list[Any] = [None] * len(thunks)
    errors: list[Optional[Exception]] = [None] * len(thunks)

    async def _run(index: int, thunk: Callable[[], Awaitable[Any]]) -> None:
        try:
            results[index] = await thunk()
        except Exception as e:
            errors[index] = e

    async with anyio.create_task_group() as tg:
        for index, thunk in enumerate(thunks):
            tg.start_soon(_run, index, thunk)

    failures = [e for e in errors if e is not None]
    for error in failures:
        if isinstance(error, BudgetExceeded):
            raise error
    if failures:
        raise failures[0]
    return results


class ReviewPipeline:
    """单篇论文的一次评审运行"""

    def __init__(
        self,
        backend: LLMBackend,
        config: Optional[PipelineConfig] = None,
        *,
        reporter: Optional[ProgressReporter] = None,
        store: Optional[ArtifactStore] = None,
    ):
        self.config = config or PipelineConfig()
        self.ledger = CallLedger()
        self.gateway = LLMGateway(
            backend,
            ledger=self.ledger,
            max_in_flight=self.config.max_in_flight,
            max_retries=self.config.max_retries,
            request_timeout=self.config.request_timeout,
            call_budget=self.config.call_budget,
        )
        self.agents = Agents(
            self.gateway,
            templates=TemplateLibrary(self.config.templates_dir),
            temperature=self.config.temperature,
            strict=self.config.strict_parsing,
            paper_char_budget=self.config.paper_char_budget,
        )
        self.reporter = reporter or ProgressReporter()
        self.store = store
        self.timings: dict[str, float] = {}

    async def _stage(
        self,
        name: str,
        input_hash: str,
        compute: Callable[[], Awaitable[T]],
        dump: Callable[[T], Any],
        load: Callable[[Any], T],
        *,
        use_cache: bool = True,
    ) -> T:
        if self.store is not None and use_cache:
            cached = self.store.load_stage(name, input_hash)
            if cached is not None:
                try:
                    value = load(cached)
                except (ValidationError, KeyError, TypeError) as e:
                    logger.warning(f"Cached {name} artifact does not validate, recomputing: {e}")
                else:
                    await self.reporter.notify(StageEvent(stage=name, status="loaded"))
                    return value

        await self.reporter.notify(StageEvent(stage=name, status="started"))
        started = time.perf_counter()
        try:
            value = await compute()
        except BudgetExceeded as e:
            await self.reporter.notify(StageEvent(stage=name, status="failed", detail=str(e)))
            raise
        except Exception as e:
            logger.error(f"Stage {name} failed: {e}", exc_info=True)
            await self.reporter.notify(StageEvent(stage=name, status="failed", detail=str(e)))
            raise StageFailed(name, e) from e

        elapsed = time.perf_counter() - started
        self.timings[name] = self.timings.get(name, 0.0) + elapsed
        if self.store is not None:
            self.store.save_stage(name, input_hash, dump(value))
        await self.reporter.notify(StageEvent(stage=name, status="completed", elapsed=elapsed))
        return value

    async def _initial_literature(self, paper: PaperArtifact, input_hash: str) -> LiteratureContext:
        """初始检索；续跑时可能载入已完成若干轮扩展的文献"""

        async def initial() -> LiteratureContext:
            analysis, references = await self.agents.initial_literature_review(paper)
            return LiteratureContext(domain_analysis=analysis, references=tuple(references))

        context = await self._stage(
            "literature", input_hash, initial, _dump_literature, LiteratureContext.model_validate
        )
        if context.expansion_rounds_completed:
            logger.info(
                f"Loaded literature after round {context.expansion_rounds_completed}/{self.config.k_expansion_rounds}"
            )
        return context

    async def _expand_literature(
        self, context: LiteratureContext, paper: PaperArtifact, input_hash: str
    ) -> LiteratureContext:
        """k 轮扩展依次进行，每轮结束都落盘，续跑时从下一轮继续"""
        k = self.config.k_expansion_rounds
        for round_index in range(context.expansion_rounds_completed + 1, k + 1):
            current = context

            async def expand() -> LiteratureContext:
                new = await self.agents.expand_literature(current.references, paper)
                return current.model_copy(
                    update={
                        "references": current.references + tuple(new),
                        "expansion_rounds_completed": round_index,
                    }
                )

            context = await self._stage(
                "literature", input_hash, expand, _dump_literature, LiteratureContext.model_validate,
                use_cache=False,
            )
            logger.info(f"Expansion round {round_index}/{k}: {len(context.references)} references")
        return context

    async def _interrogate(
        self, summary: StructuredSummary, context: LiteratureContext, paper: PaperArtifact
    ) -> InterrogationLog:
        allocation = self.config.allocation
        novelty_n = allocation[Aspect.NOVELTY_SIGNIFICANCE]
        grounded_counts = [allocation[aspect] for aspect in GROUNDED_ASPECTS]
        grounded_n = sum(grounded_counts)

        novelty_questions, grounded_questions = await gather_settled(
            lambda: self.agents.generate_questions(
                Aspect.NOVELTY_SIGNIFICANCE, summary, context, paper, max(novelty_n, 1)
            ),
            lambda: self.agents.generate_questions(GROUNDED_ASPECTS, summary, context, paper, max(grounded_n, 1)),
        )

        plan: list[tuple[Aspect, str]] = [
            (Aspect.NOVELTY_SIGNIFICANCE, q) for q in novelty_questions[:novelty_n]
        ]
        offset = 0
        for aspect, count in zip(GROUNDED_ASPECTS, grounded_counts):
            plan.extend((aspect, q) for q in grounded_questions[offset : offset + count])
            offset += count

        pairs = await gather_settled(
            *(
                (lambda a=aspect, q=question: self.agents.answer_question(a, q, summary, context, paper))
                for aspect, question in plan
            )
        )
        return InterrogationLog(pairs=tuple(pairs))

    async def run(self, paper: PaperArtifact, guidelines: ReviewGuidelines) -> ReviewBundle:
        digest = paper_hash(paper)
        fingerprint = self.config.fingerprint()
        base = (digest, fingerprint)
        logger.info(
            f"Reviewing {paper.paper_id}: k={self.config.k_expansion_rounds}, "
            f"num_qa={self.config.num_qa}, expected calls={self.config.required_calls}"
        )

        try:
            literature_key = content_hash("literature", *base)
            summary, context = await gather_settled(
                lambda: self._stage(
                    "summary",
                    content_hash("summary", *base),
                    lambda: self.agents.summarize(paper),
                    lambda value: value.model_dump(mode="json"),
                    StructuredSummary.model_validate,
                ),
                lambda: self._initial_literature(paper, literature_key),
            )
            # 扩展只在摘要和初始检索都落盘后开始
            context = await self._expand_literature(context, paper, literature_key)

            literature_hash = content_hash("narrative", canonical_dumps(_dump_literature(context)))
            narrative, (baselines, datasets) = await gather_settled(
                lambda: self._stage(
                    "narrative",
                    literature_hash,
                    lambda: self.agents.build_domain_narrative(context),
                    lambda value: {"domain_narrative": value},
                    lambda payload: str(payload["domain_narrative"]),
                ),
                lambda: self._stage(
                    "scout",
                    content_hash("scout", *base),
                    lambda: self.agents.scout_baselines(paper),
                    _dump_scout,
                    _load_scout,
                ),
            )
            context = context.model_copy(
                update={
                    "domain_narrative": narrative,
                    "missing_baselines": tuple(baselines),
                    "missing_datasets": tuple(datasets),
                }
            )

            log = await self._stage(
                "qa_log",
                content_hash("qa_log", canonical_json(summary), canonical_json(context), fingerprint),
                lambda: self._interrogate(summary, context, paper),
                lambda value: value.model_dump(mode="json"),
                InterrogationLog.model_validate,
            )

            review = await self._stage(
                "review",
                content_hash("review", canonical_json(summary), canonical_json(log), canonical_json(guidelines), fingerprint),
                lambda: self.agents.generate_review(summary, log, paper, guidelines),
                lambda value: value.model_dump(mode="json"),
                Review.model_validate,
            )
        finally:
            if self.store is not None:
                self.store.append_ledger(self.ledger.entries)

        logger.info(f"Review of {paper.paper_id} finished with {self.ledger.total} calls ({self.ledger.retries} retries)")
        return ReviewBundle(
            paper_id=paper.paper_id,
            summary=summary,
            literature_context=context,
            interrogation_log=log,
            review=review,
            ledger=tuple(self.ledger.entries),
            timings=dict(self.timings),
        )


def _dump_literature(context: LiteratureContext) -> dict[str, Any]:
    return context.model_dump(
        mode="json",
        include={"domain_analysis", "references", "expansion_rounds_completed"},
    )


def _dump_scout(value: tuple[list[MissingItem], list[MissingItem]]) -> dict[str, Any]:
    baselines, datasets = value
    return {
        "missing_baselines": [item.model_dump(mode="json") for item in baselines],
        "missing_datasets": [item.model_dump(mode="json") for item in datasets],
    }


def _load_scout(payload: dict[str, Any]) -> tuple[list[MissingItem], list[MissingItem]]:
    return (
        [MissingItem.model_validate(item) for item in payload["missing_baselines"]],
        [MissingItem.model_validate(item) for item in payload["missing_datasets"]],
    )


async def run_pipeline(
    paper: PaperArtifact,
    guidelines: ReviewGuidelines,
    config: PipelineConfig,
    backend: LLMBackend,
    *,
    reporter: Optional[ProgressReporter] = None,
) -> ReviewBundle:
    """
    全新运行一次评审流水线

    Raises:
        StageFailed: 某阶段失败（已完成的阶段仍然落盘）
        BudgetExceeded: 超出调用预算
    """
    store = None
    if config.artifact_dir is not None:
        store = ArtifactStore(config.artifact_dir)
        store.create(paper.paper_id, paper_hash(paper), config.fingerprint())
    return await ReviewPipeline(backend, config, reporter=reporter, store=store).run(paper, guidelines)


async def resume_pipeline(
    artifact_dir: Union[str, Path],
    paper: PaperArtifact,
    guidelines: ReviewGuidelines,
    config: PipelineConfig,
    backend: LLMBackend,
    *,
    reporter: Optional[ProgressReporter] = None,
) -> ReviewBundle:
    """
    从产物目录续跑；输入哈希一致的阶段直接加载，账本只记录新调用

    Raises:
        ManifestCorrupt: manifest 缺失或损坏
        InputDrift: 论文或配置已变化
    """
    store = ArtifactStore(artifact_dir)
    store.open(paper_hash(paper), config.fingerprint())
    config = config.model_copy(update={"artifact_dir": Path(artifact_dir)})
    return await ReviewPipeline(backend, config, reporter=reporter, store=store).run(paper, guidelines)


async def run_diversity_bundles(
    paper: PaperArtifact,
    guidelines: ReviewGuidelines,
    config: PipelineConfig,
    backend: LLMBackend,
    n_runs: int,
    *,
    reporter: Optional[ProgressReporter] = None,
) -> list[ReviewBundle]:
    """独立运行 n_runs 次，互不共享缓存；任一运行失败立即中止"""
    if n_runs < 2:
        raise PreconditionError("a diversity batch needs at least 2 runs")
    bundles = []
    for index in range(n_runs):
        run_config = config
        if config.artifact_dir is not None:
            run_config = config.model_copy(update={"artifact_dir": Path(config.artifact_dir) / f"run_{index:02d}"})
        logger.info(f"Diversity run {index + 1}/{n_runs}")
        bundles.append(await run_pipeline(paper, guidelines, run_config, backend, reporter=reporter))
    return bundles


async def run_diversity_batch(
    paper: PaperArtifact,
    guidelines: ReviewGuidelines,
    config: PipelineConfig,
    backend: LLMBackend,
    n_runs: int,
) -> list[Review]:
    bundles = await run_diversity_bundles(paper, guidelines, config, backend, n_runs)
    return [bundle.review for bundle in bundles]
