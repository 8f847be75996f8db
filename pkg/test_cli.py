# test_cli.py
import csv
import io
import json
from pathlib import Path

import pytest
from click.testing import CliRunner

from src.manage import cli
from src.models.report import CategoryGroup

CONFIGS = Path(__file__).parent / "configs"


@pytest.fixture
def runner(quiet):
    return CliRunner()


def test_analyze_json(runner):
    result = runner.invoke(cli, ["analyze", "--format", "json"])
    assert result.exit_code == 0, result.output
    doc = json.loads(result.output)
    assert doc["config"]["hidden_dim"] == 1024
    assert set(doc["groups"]) == {g.value for g in CategoryGroup}


def test_analyze_config_file_and_outputs(runner, tmp_path):
    out = tmp_path / "breakdown.csv"
    schedule = tmp_path / "schedule.jsonl"
    result = runner.invoke(cli, [
        "analyze", "--config", str(CONFIGS / "megatron_m2_d64.json"), "--format", "csv",
        "--out", str(out), "--schedule-out", str(schedule),
    ])
    assert result.exit_code == 0, result.output
    assert f"Wrote {out}" in result.output
    record = next(csv.DictReader(io.StringIO(out.read_text())))
    assert (record["model_degree"], record["data_degree"], record["precision"]) == ("2", "64", "mixed")
    assert float(record["Communication"]) > 0
    events = [json.loads(line) for line in schedule.read_text().splitlines()]
    assert {"event", "category", "duration", "exposed", "overlapped"} <= set(events[0])
    assert any(e["category"] == "AllReduce" for e in events)


def test_analyze_yaml_config(runner):
    result = runner.invoke(cli, ["analyze", "--config", str(CONFIGS / "bert_large_phase2.yaml"), "--format", "json"])
    assert result.exit_code == 0, result.output
    assert json.loads(result.output)["config"]["seq_len"] == 512


def test_bad_config_exits_2(runner, tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"model": {"hidden_dim": 1000}}))
    result = runner.invoke(cli, ["analyze", "--config", str(path)])
    assert result.exit_code == 2
    assert "hidden_dim" in result.output

    result = runner.invoke(cli, ["analyze", "--config", str(tmp_path / "missing.json")])
    assert result.exit_code == 2

    path.write_text(json.dumps({"parallelism": {"model_degree": 3}}))
    assert runner.invoke(cli, ["analyze", "--config", str(path)]).exit_code == 2


def test_unknown_preset_exits_2(runner):
    assert runner.invoke(cli, ["analyze", "--preset", "bert_huge"]).exit_code == 2


def test_sweep_csv(runner):
    result = runner.invoke(cli, ["sweep", "--axis", "batch_size", "--values", "4,8,16,32", "--format", "csv"])
    assert result.exit_code == 0, result.output
    records = list(csv.DictReader(io.StringIO(result.output)))
    assert [r["batch_size"] for r in records] == ["4", "8", "16", "32"]
    lamb = [float(r["LambUpdate"]) for r in records]
    assert lamb == sorted(lamb, reverse=True)


def test_sweep_rejects_non_integer_values(runner):
    result = runner.invoke(cli, ["sweep", "--axis", "seq_len", "--values", "128,long"])
    assert result.exit_code == 2


def test_whatif_table(runner):
    result = runner.invoke(cli, ["whatif", "--preset", "bert_base_phase1", "--transform", "fuse-all"])
    assert result.exit_code == 0, result.output
    assert "fuse-all" in result.output
    assert "DropResidualLayerNorm" in result.output


def test_whatif_microbatch_json(runner):
    result = runner.invoke(cli, ["whatif", "--transform", "microbatch:4", "--format", "json"])
    assert result.exit_code == 0, result.output
    doc = json.loads(result.output)
    assert doc["variant_label"] == "microbatch:4"
    assert doc["per_category"]["GradAccumulate"]["kernels"] == 4


def test_whatif_unknown_transform(runner):
    assert runner.invoke(cli, ["whatif", "--transform", "prune"]).exit_code == 2


def test_lamb_verify(runner):
    result = runner.invoke(cli, ["lamb-verify", "--trials", "50", "--seed", "7"])
    assert result.exit_code == 0, result.output
    assert result.output.strip() == "OK: 50 trials, seed 7"


def test_lamb_verify_failure_exits_1(runner, monkeypatch):
    from src.services import lambref

    monkeypatch.setattr("src.manage.verify",
                        lambda **_: [lambref.VerifyFailure(case="trial 3", detail="weights differ")])
    result = runner.invoke(cli, ["lamb-verify", "--trials", "5"])
    assert result.exit_code == 1
    assert "FAIL trial 3: weights differ" in result.output


def test_dump_graph(runner):
    result = runner.invoke(cli, ["dump-graph", "--preset", "bert_base_phase1"])
    assert result.exit_code == 0, result.output
    lines = result.output.splitlines()
    first = json.loads(lines[0])
    assert first["id"] == "G.embeddings.FWD"
    assert any(json.loads(line)["id"] == "L11.ffn_ln.BWD" for line in lines)


def test_presets(runner):
    result = runner.invoke(cli, ["presets"])
    assert result.exit_code == 0, result.output
    assert "bert_large_phase1" in result.output
    assert "334,090,240" in result.output
