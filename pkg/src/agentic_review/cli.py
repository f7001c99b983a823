"""
Agentic Review 命令行入口
review / diversity / evaluate 子命令；退出码 0 成功，1 运行失败，2 用法错误
"""

import contextlib
import json
import logging
import random
import sys
from datetime import date, datetime, timezone
from pathlib import Path
from typing import Any, Awaitable, Callable, Optional, Sequence

import anyio
import click
from pydantic import BaseModel, ConfigDict, ValidationError

from .config import AppConfig, BackendSettings, create_backend, create_embedder, load_config_file
from .errors import ReviewEngineError, SchemaMismatch
from .evaluation import (
    Judge,
    SxSItem,
    SxSVerdict,
    aggregate_hmax,
    aggregate_win_rates,
    format_hmax_table,
    format_win_rate_table,
    judge_agreement,
    sxs_evaluate_batch,
    verdict_trace,
    win_rates_to_json,
)
from .llm import LLMGateway
from .metrics import decision_score_alignment, judge_calibration, review_diversity_score
from .pipeline import resume_pipeline, run_diversity_bundles, run_pipeline, write_json_atomic
from .prompts import TemplateLibrary, default_guidelines
from .types import PaperArtifact, ReviewGuidelines

logger = logging.getLogger(__name__)

RUN_LOG = "runs.jsonl"


class RunManifestRecord(BaseModel):
    """每次命令调用向 <out-dir>/runs.jsonl 追加一条"""

    model_config = ConfigDict(frozen=True)

    command: str
    config: dict[str, Any]
    started_at: datetime
    finished_at: datetime
    artifact_dir: str
    exit_status: int
    error: Optional[str] = None


def setup_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s [%(levelname)s] %(name)s: %(message)s",
        stream=sys.stderr,
    )
    for name in ("openai", "httpx", "httpcore", "aiohttp"):
        logging.getLogger(name).setLevel(logging.WARNING)


def _append_run_record(out_dir: Path, record: RunManifestRecord) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / RUN_LOG, "a", encoding="utf-8") as handle:
        handle.write(record.model_dump_json() + "\n")


def _execute(
    command: str,
    out_dir: Path,
    build_config: Callable[[], AppConfig],
    work: Callable[[AppConfig], Awaitable[None]],
) -> None:
    """加载配置并运行一个异步命令体，记录运行日志；运行期错误（含配置错误）以退出码 1 结束"""
    started = datetime.now(timezone.utc)
    status, error = 0, None
    config: Optional[AppConfig] = None
    try:
        config = build_config()
        anyio.run(work, config)
    except (ReviewEngineError, ValidationError, OSError, KeyError, TypeError, json.JSONDecodeError) as e:
        status, error = 1, f"{type(e).__name__}: {e}"
        logger.error(f"{command} failed: {error}")
        click.echo(f"Error: {error}", err=True)
    finally:
        _append_run_record(
            out_dir,
            RunManifestRecord(
                command=command,
                config=config.model_dump(mode="json") if config is not None else {},
                started_at=started,
                finished_at=datetime.now(timezone.utc),
                artifact_dir=str(out_dir),
                exit_status=status,
                error=error,
            ),
        )
    if status:
        sys.exit(status)


def _usage_error_target(args: Sequence[str]) -> tuple[str, Path]:
    """从原始参数中找出子命令名和 --out-dir；用法错误发生时参数尚未解析"""
    words = [arg for arg in args if not arg.startswith("-")]
    command = " ".join(words[:2]) if words[:1] == ["evaluate"] else " ".join(words[:1])
    out_dir = Path("eval_out") if command.startswith("evaluate") else Path("review_out")
    for index, arg in enumerate(args):
        if arg == "--out-dir" and index + 1 < len(args):
            out_dir = Path(args[index + 1])
        elif arg.startswith("--out-dir="):
            out_dir = Path(arg.split("=", 1)[1])
    return command, out_dir


class RecordingGroup(click.Group):
    """用法错误（退出码 2）同样在 runs.jsonl 中留下一条记录"""

    def parse_args(self, ctx: click.Context, args: list[str]) -> list[str]:
        ctx.meta.setdefault("agentic_review.raw_args", list(args))
        return super().parse_args(ctx, args)

    def invoke(self, ctx: click.Context) -> Any:
        try:
            return super().invoke(ctx)
        except click.UsageError as e:
            if ctx.parent is None:
                command, out_dir = _usage_error_target(ctx.meta.get("agentic_review.raw_args", []))
                now = datetime.now(timezone.utc)
                with contextlib.suppress(OSError):
                    _append_run_record(
                        out_dir,
                        RunManifestRecord(
                            command=command,
                            config={},
                            started_at=now,
                            finished_at=now,
                            artifact_dir=str(out_dir),
                            exit_status=e.exit_code,
                            error=e.format_message(),
                        ),
                    )
            raise


def _load_config(config_path: Optional[Path]) -> AppConfig:
    return load_config_file(config_path) if config_path else AppConfig()


def _with_overrides(model: BaseModel, /, **overrides: Any) -> Any:
    """flag 覆盖配置文件，未给出的 flag 保留文件中的值"""
    updates = {key: value for key, value in overrides.items() if value is not None}
    return type(model).model_validate({**model.model_dump(), **updates})


def _backend_settings(base: BackendSettings, backend: Optional[str], model: Optional[str], mock_script: Optional[Path]) -> BackendSettings:
    if mock_script is not None:
        backend = "mock"
    return _with_overrides(base, provider=backend, model=model, mock_script=mock_script)


def _read_paper(path: Path, cutoff: date) -> PaperArtifact:
    return PaperArtifact.from_text(path.read_text(encoding="utf-8"), cutoff, paper_id=path.stem)


def _read_guidelines(path: Optional[Path]) -> ReviewGuidelines:
    if path is None:
        return default_guidelines()
    text = path.read_text(encoding="utf-8")
    if path.suffix == ".json":
        return ReviewGuidelines.model_validate_json(text)
    return ReviewGuidelines(venue_name=path.stem, guideline_text=text)


def _read_json(path: Path) -> Any:
    return json.loads(path.read_text(encoding="utf-8"))


def _format_scalar(value: float) -> str:
    return repr(round(value, 10))


def _judge(config: AppConfig, seed: int) -> tuple[Judge, LLMGateway]:
    gateway = LLMGateway(
        create_backend(config.judge_backend),
        max_in_flight=config.pipeline.max_in_flight,
        max_retries=config.pipeline.max_retries,
        request_timeout=config.pipeline.request_timeout,
        rng=random.Random(seed),
    )
    judge = Judge(
        gateway,
        templates=TemplateLibrary(config.pipeline.templates_dir),
        temperature=config.pipeline.temperature,
        paper_char_budget=config.pipeline.paper_char_budget,
        strict=config.pipeline.strict_parsing,
    )
    return judge, gateway


paper_option = click.option("--paper", "paper_path", required=True, type=click.Path(exists=True, dir_okay=False, path_type=Path), help="Pre-extracted paper text")
cutoff_option = click.option("--cutoff-date", required=True, type=click.DateTime(formats=["%Y-%m-%d"]), help="Submission date bounding all retrieval")
config_option = click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False, path_type=Path), help="JSON config file")
backend_option = click.option("--backend", default=None, help="Backend provider (openai, mock, or an OpenAI-compatible provider name)")
model_option = click.option("--model", default=None, help="Model name for the backend")
mock_option = click.option("--mock-script", type=click.Path(exists=True, dir_okay=False, path_type=Path), default=None, help="Scripted mock responses (implies --backend mock)")
seed_option = click.option("--seed", type=int, default=None, help="Seed for presentation order and retry jitter")


def _review_options(func):
    for option in reversed(
        [
            paper_option,
            cutoff_option,
            click.option("--guidelines", "guidelines_path", type=click.Path(exists=True, dir_okay=False, path_type=Path), default=None, help="Review guidelines (.json or plain text)"),
            click.option("--k-rounds", type=click.IntRange(min=0), default=None, help="Literature expansion rounds (default 3)"),
            click.option("--num-qa", type=click.IntRange(min=1), default=None, help="Question/answer pairs (default 10)"),
            click.option("--call-budget", type=click.IntRange(min=1), default=None, help="Abort before exceeding this many calls"),
            click.option("--strict", is_flag=True, default=False, help="Strict parsing of model output"),
            click.option("--out-dir", type=click.Path(file_okay=False, path_type=Path), default=Path("review_out"), show_default=True),
            config_option,
            backend_option,
            model_option,
            mock_option,
            seed_option,
        ]
    ):
        func = option(func)
    return func


def _app_config(config_path, backend, model, mock_script, seed, **pipeline_overrides) -> AppConfig:
    config = _load_config(config_path)
    return AppConfig(
        pipeline=_with_overrides(config.pipeline, **pipeline_overrides),
        backend=_backend_settings(config.backend, backend, model, mock_script),
        judge=_backend_settings(config.judge, backend, model, mock_script) if config.judge else None,
        embedder=config.embedder,
        seed=config.seed if seed is None else seed,
    )


@click.group(cls=RecordingGroup)
@click.option("--verbose", "-v", is_flag=True, help="Enable DEBUG logging")
@click.version_option(package_name="agentic-review")
def main(verbose: bool):
    """Agentic peer-review pipeline and evaluation suite."""
    setup_logging(verbose)


@main.command()
@_review_options
@click.option("--resume", is_flag=True, help="Resume from the artifacts in --out-dir")
def review(paper_path, cutoff_date, guidelines_path, k_rounds, num_qa, call_budget, strict, out_dir, config_path, backend, model, mock_script, seed, resume):
    """Review one paper and write its artifacts to --out-dir."""

    def build_config() -> AppConfig:
        return _app_config(
            config_path, backend, model, mock_script, seed,
            k_expansion_rounds=k_rounds, num_qa=num_qa, call_budget=call_budget,
            strict_parsing=strict or None, artifact_dir=out_dir,
        )

    async def work(config: AppConfig):
        paper = _read_paper(paper_path, cutoff_date.date())
        guidelines = _read_guidelines(guidelines_path)
        llm = create_backend(config.backend)
        try:
            if resume:
                bundle = await resume_pipeline(out_dir, paper, guidelines, config.pipeline, llm)
            else:
                bundle = await run_pipeline(paper, guidelines, config.pipeline, llm)
        finally:
            await llm.close()
        logger.info(f"{bundle.ledger_total} calls this session, decision score {bundle.review.decision_score}")
        click.echo(str(out_dir / "06_review.json"))

    _execute("review", out_dir, build_config, work)


@main.command()
@_review_options
@click.option("--runs", type=click.IntRange(min=2), default=3, show_default=True, help="Independent pipeline runs")
@click.option("--embedder", type=click.Choice(["hashing", "huggingface", "openai"]), default=None, help="Embedding provider")
def diversity(paper_path, cutoff_date, guidelines_path, k_rounds, num_qa, call_budget, strict, out_dir, config_path, backend, model, mock_script, seed, runs, embedder):
    """Run the pipeline several times and print the review diversity score."""

    def build_config() -> AppConfig:
        config = _app_config(
            config_path, backend, model, mock_script, seed,
            k_expansion_rounds=k_rounds, num_qa=num_qa, call_budget=call_budget,
            strict_parsing=strict or None, artifact_dir=out_dir,
        )
        return config.model_copy(update={"embedder": _with_overrides(config.embedder, provider=embedder)})

    async def work(config: AppConfig):
        paper = _read_paper(paper_path, cutoff_date.date())
        guidelines = _read_guidelines(guidelines_path)
        llm = create_backend(config.backend)
        try:
            bundles = await run_diversity_bundles(paper, guidelines, config.pipeline, llm, runs)
        finally:
            await llm.close()
        provider = create_embedder(config.embedder)
        try:
            score = await review_diversity_score([b.review.raw_text for b in bundles], provider)
        finally:
            await provider.close()
        write_json_atomic(
            out_dir / "diversity.json",
            {
                "runs": runs,
                "embedder": provider.model_id,
                "review_diversity_score": score,
                "calls": sum(b.ledger_total for b in bundles),
            },
        )
        click.echo(_format_scalar(score))

    _execute("diversity", out_dir, build_config, work)


@main.group()
def evaluate():
    """Judge-based and statistical evaluation protocols."""


_eval_out = click.option("--out-dir", type=click.Path(file_okay=False, path_type=Path), default=Path("eval_out"), show_default=True)


def _sxs_items(raw: Any, paper: PaperArtifact) -> list[SxSItem]:
    entries = raw if isinstance(raw, list) else [raw]
    items = []
    for index, entry in enumerate(entries):
        path = f"$[{index}]"
        if not isinstance(entry, dict):
            raise SchemaMismatch(f"expected an object, got {type(entry).__name__}", path)
        for key in ("review_a", "review_b"):
            if not isinstance(entry.get(key), str):
                raise SchemaMismatch(f"{key!r} must be a string", path)
        items.append(
            SxSItem(paper=paper, review_a=entry["review_a"], review_b=entry["review_b"], item_id=str(entry.get("id", index)))
        )
    return items


@evaluate.command()
@paper_option
@cutoff_option
@click.option("--reviews", "reviews_path", required=True, type=click.Path(exists=True, dir_okay=False, path_type=Path), help='JSON list of {"id", "review_a", "review_b"}')
@click.option("--system-name", default="System A", show_default=True)
@click.option("--tie-mode", type=click.Choice(["explicit", "drop"]), default="explicit", show_default=True)
@_eval_out
@config_option
@backend_option
@model_option
@mock_option
@seed_option
def sxs(paper_path, cutoff_date, reviews_path, system_name, tie_mode, out_dir, config_path, backend, model, mock_script, seed):
    """Side-by-side comparison of review pairs; A is the system under test."""

    async def work(config: AppConfig):
        paper = _read_paper(paper_path, cutoff_date.date())
        items = _sxs_items(_read_json(reviews_path), paper)
        judge, gateway = _judge(config, config.seed)
        try:
            verdicts = await sxs_evaluate_batch(items, judge, base_seed=config.seed)
        finally:
            await gateway.close()
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "verdicts.jsonl").write_text(
            "".join(json.dumps(v.model_dump(mode="json"), sort_keys=True, ensure_ascii=False) + "\n" for v in verdicts),
            encoding="utf-8",
        )
        rates = aggregate_win_rates(verdicts, tie_mode=tie_mode)
        write_json_atomic(out_dir / "win_rates.json", {system_name: win_rates_to_json(rates)})
        click.echo(format_win_rate_table({system_name: rates}))

    _execute("evaluate sxs", out_dir, lambda: _app_config(config_path, backend, model, mock_script, seed), work)


@evaluate.command()
@paper_option
@cutoff_option
@click.option("--ai-review", "ai_review_path", required=True, type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--human-reviews", "human_path", required=True, type=click.Path(exists=True, dir_okay=False, path_type=Path), help="JSON list of human review texts")
@click.option("--system-name", default="System A", show_default=True)
@_eval_out
@config_option
@backend_option
@model_option
@mock_option
@seed_option
def hmax(paper_path, cutoff_date, ai_review_path, human_path, system_name, out_dir, config_path, backend, model, mock_script, seed):
    """Score an AI review against the collective human reviews (5 = human level)."""

    async def work(config: AppConfig):
        paper = _read_paper(paper_path, cutoff_date.date())
        human_reviews = [str(r) for r in _read_json(human_path)]
        judge, gateway = _judge(config, config.seed)
        try:
            scores = await judge.hmax(paper, ai_review_path.read_text(encoding="utf-8"), human_reviews)
        finally:
            await gateway.close()
        write_json_atomic(out_dir / "hmax.json", scores.model_dump(mode="json"))
        click.echo(format_hmax_table({system_name: aggregate_hmax([scores])}))

    _execute("evaluate hmax", out_dir, lambda: _app_config(config_path, backend, model, mock_script, seed), work)


@evaluate.command()
@click.option("--model-scores", "model_path", required=True, type=click.Path(exists=True, dir_okay=False, path_type=Path), help="JSON list; null marks a missing score")
@click.option("--human-scores", "human_path", required=True, type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--method", type=click.Choice(["spearman", "pearson"]), default="spearman", show_default=True)
@_eval_out
@config_option
def align(model_path, human_path, method, out_dir, config_path):
    """Correlate model decision scores (or judge scores) with human scores."""

    async def work(config: AppConfig):
        model_scores, human_scores = _read_json(model_path), _read_json(human_path)
        if method == "spearman":
            value = decision_score_alignment(model_scores, human_scores)
        else:
            value = judge_calibration(model_scores, human_scores)
        click.echo(_format_scalar(value))

    _execute(f"evaluate align --method {method}", out_dir, lambda: _load_config(config_path), work)


def _read_verdicts(path: Path) -> list[SxSVerdict]:
    return [SxSVerdict.model_validate_json(line) for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]


@evaluate.command()
@click.option("--verdicts-a", "path_a", required=True, type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--verdicts-b", "path_b", required=True, type=click.Path(exists=True, dir_okay=False, path_type=Path))
@_eval_out
@config_option
def agree(path_a, path_b, out_dir, config_path):
    """Fraction of items on which two judges pick the same overall winner."""

    async def work(config: AppConfig):
        click.echo(_format_scalar(judge_agreement(_read_verdicts(path_a), _read_verdicts(path_b))))

    _execute("evaluate agree", out_dir, lambda: _load_config(config_path), work)


@evaluate.command()
@click.option("--verdicts", "verdicts_path", required=True, type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--model-a", default="System A", show_default=True)
@click.option("--model-b", default="System B", show_default=True)
@_eval_out
@config_option
@backend_option
@model_option
@mock_option
@seed_option
def gains(verdicts_path, model_a, model_b, out_dir, config_path, backend, model, mock_script, seed):
    """Summarize recurring gains and losses of model A across SxS verdicts."""

    async def work(config: AppConfig):
        traces = [verdict_trace(v, model_a, model_b) for v in _read_verdicts(verdicts_path)]
        judge, gateway = _judge(config, config.seed)
        try:
            summary = await judge.gains(traces, model_a, model_b)
        finally:
            await gateway.close()
        write_json_atomic(out_dir / "gains.json", summary)
        click.echo(json.dumps(summary, indent=2, ensure_ascii=False))

    _execute("evaluate gains", out_dir, lambda: _app_config(config_path, backend, model, mock_script, seed), work)


if __name__ == "__main__":
    main()
