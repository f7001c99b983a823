import json
import math

import pytest
from click.testing import CliRunner

from agentic_review.cli import main
from agentic_review.embeddings import HashingEmbedder
from agentic_review.mock import MockScript

from conftest import PAPER_TEXT, script_with

CUTOFF = "2024-05-22"


@pytest.fixture
def paper_file(tmp_path):
    path = tmp_path / "dbrnet.txt"
    path.write_text(PAPER_TEXT, encoding="utf-8")
    return path


def invoke(*args):
    return CliRunner().invoke(main, [str(arg) for arg in args])


def ledger_lines(directory) -> list[dict]:
    return [json.loads(line) for line in (directory / "ledger.jsonl").read_text(encoding="utf-8").splitlines()]


def run_log(directory) -> list[dict]:
    return [json.loads(line) for line in (directory / "runs.jsonl").read_text(encoding="utf-8").splitlines()]


def test_review_on_demo_backend(tmp_path, paper_file):
    out = tmp_path / "out"
    result = invoke("review", "--paper", paper_file, "--cutoff-date", CUTOFF, "--backend", "mock", "--out-dir", out)
    assert result.exit_code == 0, result.output
    assert str(out / "06_review.json") in result.output.splitlines()
    assert len(ledger_lines(out)) == 20
    review = json.loads((out / "06_review.json").read_text(encoding="utf-8"))["payload"]
    assert review["decision_score"] == 5
    records = run_log(out)
    assert len(records) == 1
    assert records[0]["command"] == "review" and records[0]["exit_status"] == 0
    assert records[0]["config"]["pipeline"]["num_qa"] == 10


def test_review_small_configuration(tmp_path, paper_file):
    out = tmp_path / "out"
    result = invoke(
        "review", "--paper", paper_file, "--cutoff-date", CUTOFF, "--backend", "mock",
        "--k-rounds", 1, "--num-qa", 2, "--out-dir", out,
    )
    assert result.exit_code == 0, result.output
    assert len(ledger_lines(out)) == 10


def test_flags_override_config_file(tmp_path, paper_file):
    config = tmp_path / "config.json"
    config.write_text(
        json.dumps({"pipeline": {"k_expansion_rounds": 0, "num_qa": 1}, "backend": {"provider": "mock"}}),
        encoding="utf-8",
    )
    out = tmp_path / "out"
    result = invoke("review", "--paper", paper_file, "--cutoff-date", CUTOFF, "--config", config, "--out-dir", out)
    assert result.exit_code == 0, result.output
    assert len(ledger_lines(out)) == 8

    out2 = tmp_path / "out2"
    result = invoke(
        "review", "--paper", paper_file, "--cutoff-date", CUTOFF, "--config", config, "--num-qa", 2, "--out-dir", out2
    )
    assert result.exit_code == 0, result.output
    assert len(ledger_lines(out2)) == 9


def test_usage_errors_exit_2_and_are_logged(tmp_path, paper_file):
    out = tmp_path / "out"
    assert invoke("review", "--cutoff-date", CUTOFF, "--backend", "mock", "--out-dir", out).exit_code == 2
    assert invoke("review", "--paper", paper_file, "--cutoff-date", "22/05/2024", "--out-dir", out).exit_code == 2
    assert invoke("diversity", "--paper", paper_file, "--cutoff-date", CUTOFF, "--runs", 1, "--out-dir", out).exit_code == 2
    records = run_log(out)
    assert [r["command"] for r in records] == ["review", "review", "diversity"]
    assert all(r["exit_status"] == 2 and r["error"] for r in records)
    assert "--paper" in records[0]["error"]

    eval_out = tmp_path / "eval"
    result = invoke("evaluate", "agree", "--verdicts-a", tmp_path / "missing.jsonl", f"--out-dir={eval_out}")
    assert result.exit_code == 2
    assert run_log(eval_out)[0]["command"] == "evaluate agree"


def test_bad_config_and_malformed_reviews_exit_1(tmp_path, paper_file):
    config = tmp_path / "config.json"
    config.write_text('{"pipeline": {"num_qa": 0}}', encoding="utf-8")
    out = tmp_path / "out"
    result = invoke("review", "--paper", paper_file, "--cutoff-date", CUTOFF, "--config", config, "--out-dir", out)
    assert result.exit_code == 1
    assert "ValidationError" in result.output
    record = run_log(out)[0]
    assert record["exit_status"] == 1 and record["config"] == {}

    reviews = tmp_path / "reviews.json"
    reviews.write_text(json.dumps(["only a string"]), encoding="utf-8")
    eval_out = tmp_path / "eval"
    result = invoke(
        "evaluate", "sxs", "--paper", paper_file, "--cutoff-date", CUTOFF, "--reviews", reviews,
        "--backend", "mock", "--out-dir", eval_out,
    )
    assert result.exit_code == 1
    assert "SchemaMismatch" in result.output
    assert run_log(eval_out)[0]["exit_status"] == 1


def test_runtime_errors_exit_1(tmp_path, paper_file, monkeypatch):
    monkeypatch.delenv("OPENAI_API_KEY", raising=False)
    out = tmp_path / "out"
    result = invoke("review", "--paper", paper_file, "--cutoff-date", CUTOFF, "--backend", "openai", "--out-dir", out)
    assert result.exit_code == 1
    assert "OPENAI_API_KEY" in result.output
    assert run_log(out)[0]["exit_status"] == 1

    empty = tmp_path / "empty"
    result = invoke("review", "--paper", paper_file, "--cutoff-date", CUTOFF, "--backend", "mock", "--resume", "--out-dir", empty)
    assert result.exit_code == 1
    assert "ManifestCorrupt" in result.output


def test_stage_failure_names_the_stage_then_resume(tmp_path, paper_file):
    crashing = script_with(MockScript.demo(), "ferocious benchmarking expert", fail="scout crashed")
    script_path = tmp_path / "crash.json"
    script_path.write_text(crashing.model_dump_json(), encoding="utf-8")
    out = tmp_path / "out"
    result = invoke("review", "--paper", paper_file, "--cutoff-date", CUTOFF, "--mock-script", script_path, "--out-dir", out)
    assert result.exit_code == 1
    assert "'scout'" in result.output

    result = invoke("review", "--paper", paper_file, "--cutoff-date", CUTOFF, "--backend", "mock", "--resume", "--out-dir", out)
    assert result.exit_code == 0, result.output
    assert [line["session"] for line in ledger_lines(out)].count(2) == 14
    assert [r["exit_status"] for r in run_log(out)] == [1, 0]


def test_diversity_matches_brute_force(tmp_path, paper_file):
    out = tmp_path / "out"
    result = invoke(
        "diversity", "--paper", paper_file, "--cutoff-date", CUTOFF, "--backend", "mock",
        "--k-rounds", 0, "--num-qa", 1, "--out-dir", out,
    )
    assert result.exit_code == 0, result.output
    texts = [
        json.loads((out / f"run_{i:02d}" / "06_review.json").read_text(encoding="utf-8"))["payload"]["raw_text"]
        for i in range(3)
    ]
    assert len(set(texts)) == 3
    embedder = HashingEmbedder()
    vectors = [embedder.vectorize(text) for text in texts]
    similarities = [
        float(vectors[i] @ vectors[j]) / math.sqrt(float(vectors[i] @ vectors[i]) * float(vectors[j] @ vectors[j]))
        for i in range(3)
        for j in range(3)
        if i != j
    ]
    expected = 1 - sum(similarities) / 6
    printed = float(result.output.strip().splitlines()[-1])
    assert printed == pytest.approx(expected, abs=1e-9)
    assert json.loads((out / "diversity.json").read_text(encoding="utf-8"))["calls"] == 3 * 8


def test_diversity_of_identical_reviews_is_zero(tmp_path, paper_file):
    script = script_with(MockScript.demo(), "prestigious ML venue", responses=(), response='{"summary": "s", "rating": 5}')
    script_path = tmp_path / "same.json"
    script_path.write_text(script.model_dump_json(), encoding="utf-8")
    result = invoke(
        "diversity", "--paper", paper_file, "--cutoff-date", CUTOFF, "--mock-script", script_path,
        "--k-rounds", 0, "--num-qa", 1, "--out-dir", tmp_path / "out",
    )
    assert result.exit_code == 0, result.output
    assert "0.0" in result.output.splitlines()


def test_evaluate_align_and_agree(tmp_path):
    model, human = tmp_path / "model.json", tmp_path / "human.json"
    model.write_text("[1, 2, 3]", encoding="utf-8")
    human.write_text("[3, 2, 1]", encoding="utf-8")
    result = invoke("evaluate", "align", "--model-scores", model, "--human-scores", human, "--out-dir", tmp_path)
    assert result.exit_code == 0, result.output
    assert "-1.0" in result.output.splitlines()

    result = invoke("evaluate", "align", "--method", "pearson", "--model-scores", model, "--human-scores", human, "--out-dir", tmp_path)
    assert "-1.0" in result.output.splitlines()

    human.write_text("[3, 3, 3]", encoding="utf-8")
    result = invoke("evaluate", "align", "--model-scores", model, "--human-scores", human, "--out-dir", tmp_path)
    assert result.exit_code == 1
    assert "DegenerateInput" in result.output


def test_evaluate_sxs_is_reproducible_then_agree_and_gains(tmp_path, paper_file):
    reviews = tmp_path / "reviews.json"
    reviews.write_text(
        json.dumps([{"id": f"p{i}", "review_a": f"Agentic review {i}.", "review_b": f"Baseline review {i}."} for i in range(5)]),
        encoding="utf-8",
    )
    outputs = []
    for name in ("first", "second"):
        out = tmp_path / name
        result = invoke(
            "evaluate", "sxs", "--paper", paper_file, "--cutoff-date", CUTOFF, "--reviews", reviews,
            "--backend", "mock", "--seed", 7, "--out-dir", out,
        )
        assert result.exit_code == 0, result.output
        outputs.append((out / "verdicts.jsonl").read_bytes())
    assert outputs[0] == outputs[1]
    assert len(outputs[0].splitlines()) == 5
    rates = json.loads((tmp_path / "first" / "win_rates.json").read_text(encoding="utf-8"))["System A"]
    overall = rates["overall"]
    assert overall["win"] + overall["lose"] + overall["tie"] == pytest.approx(100.0)

    verdicts = tmp_path / "first" / "verdicts.jsonl"
    result = invoke("evaluate", "agree", "--verdicts-a", verdicts, "--verdicts-b", tmp_path / "second" / "verdicts.jsonl", "--out-dir", tmp_path)
    assert result.exit_code == 0, result.output
    assert "1.0" in result.output.splitlines()

    result = invoke("evaluate", "gains", "--verdicts", verdicts, "--backend", "mock", "--out-dir", tmp_path / "gains")
    assert result.exit_code == 0, result.output
    assert "System A Gains" in json.loads((tmp_path / "gains" / "gains.json").read_text(encoding="utf-8"))


def test_evaluate_hmax(tmp_path, paper_file):
    ai_review = tmp_path / "ai.txt"
    ai_review.write_text("The paper misses SCIGAN.", encoding="utf-8")
    humans = tmp_path / "humans.json"
    humans.write_text(json.dumps(["Human review one.", "Human review two."]), encoding="utf-8")
    out = tmp_path / "out"
    result = invoke(
        "evaluate", "hmax", "--paper", paper_file, "--cutoff-date", CUTOFF, "--ai-review", ai_review,
        "--human-reviews", humans, "--backend", "mock", "--out-dir", out,
    )
    assert result.exit_code == 0, result.output
    scores = json.loads((out / "hmax.json").read_text(encoding="utf-8"))
    assert scores["scores"]["overall"]["score"] == 5
    assert any(line.split()[-1] == "5.00" for line in result.output.splitlines() if "Overall" in line)
