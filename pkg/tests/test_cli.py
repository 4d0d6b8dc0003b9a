import json
import shutil

import pytest

from conftest import TOY_CHECKPOINT
from mucrasp.checkpoint import load_checkpoint
from mucrasp.cli import run


def cli(capsys, *argv):
    code = run([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    shutil.copy(TOY_CHECKPOINT, d / "toy.ckpt")
    assert run(["gen-data", "--seed", "42", "--n", "4", "--out", str(d / "data.jsonl")]) == 0
    return d


@pytest.fixture(scope="module")
def pruned(workspace):
    out = workspace / "p30"
    assert run(["prune", "--model", str(workspace / "toy.ckpt"), "--data", str(workspace / "data.jsonl"),
                "--ratio", "0.3", "--out", str(out)]) == 0
    return out


def test_prune_writes_three_artifacts(pruned):
    plan = json.loads((pruned / "plan.json").read_text())
    retention = json.loads((pruned / "plan.retention.json").read_text())
    cfg, _ = load_checkpoint(pruned / "model.ckpt")
    assert plan["method"] == "mucrasp" and plan["config"]["ratio"] == 0.3
    assert retention["ratio"] == 0.3 and len(retention["retention"]) == 8
    assert sum(cfg.mlp_widths) < 4 * 128


def test_ratio_out_of_range(capsys, workspace):
    code, _, err = cli(capsys, "prune", "--model", workspace / "toy.ckpt", "--data",
                       workspace / "data.jsonl", "--ratio", "1.5", "--out", workspace / "bad")
    assert code == 2
    assert "ratio" in json.loads(err)["message"]


def test_magnitude_with_window_conflicts(capsys, workspace):
    code, _, err = cli(capsys, "score", "--model", workspace / "toy.ckpt", "--mode", "magnitude",
                       "--window", "4", "--out", workspace / "s.json")
    assert code == 2 and json.loads(err)["error"] == "conflicting_modes"


def test_missing_input(capsys, workspace):
    code, _, err = cli(capsys, "eval", "--dense", workspace / "nope.ckpt", "--pruned",
                       workspace / "toy.ckpt", "--data", workspace / "data.jsonl",
                       "--out", workspace / "e.json")
    assert code == 2 and json.loads(err)["error"] == "missing_input"


def test_infeasible_budget_exit_code(capsys, workspace):
    code, _, err = cli(capsys, "prune", "--model", workspace / "toy.ckpt", "--data",
                       workspace / "data.jsonl", "--ratio", "0.95", "--mode", "magnitude",
                       "--out", workspace / "inf")
    payload = json.loads(err)
    assert code == 3 and payload["error"] == "infeasible_budget"
    assert {b["layer"] for b in payload["details"]} == {0, 1, 2, 3}


def test_eval_and_report_merge(capsys, workspace, pruned):
    code, out, _ = cli(capsys, "eval", "--dense", workspace / "toy.ckpt", "--pruned",
                       pruned / "model.ckpt", "--data", workspace / "data.jsonl", "--plan",
                       pruned / "plan.json", "--out", workspace / "eval.json")
    assert code == 0 and "mean KL" in out
    code, _, _ = cli(capsys, "report", pruned / "plan.json", workspace / "eval.json",
                     "--out", workspace / "report.json", "--csv", workspace / "report.csv")
    rows = json.loads((workspace / "report.json").read_text())["rows"]
    assert code == 0 and len(rows) == 1
    row = rows[0]
    assert row["method"] == "mucrasp" and row["ratio"] == 0.3
    assert row["kept_params"] == json.loads((pruned / "plan.json").read_text())["kept_params"]
    assert "mean_kl" in row and "budget" in row


def test_report_rejects_other_schema(capsys, workspace, pruned):
    bad = workspace / "old.json"
    bad.write_text(json.dumps({"schema_version": 0, "rows": []}))
    code, _, err = cli(capsys, "report", pruned / "plan.json", bad, "--out", workspace / "r.json")
    assert code == 2 and json.loads(err)["error"] == "schema_version"


def test_score_tables(capsys, workspace):
    for mode in ("global", "pivot", "magnitude"):
        path = workspace / f"score_{mode}.json"
        code, _, err = cli(capsys, "score", "--model", workspace / "toy.ckpt", "--data",
                           workspace / "data.jsonl", "--mode", mode, "--normalize", "--out", path)
        assert code == 0, err
        table = json.loads(path.read_text())
        assert table["normalized"] and len(table["scores"]) == 520


def test_config_file_and_flag_precedence(capsys, workspace):
    conf = workspace / "run.conf"
    conf.write_text("# pruning defaults\nratio = 0.4\nno-cmds = true\nmode = mucrasp\n")
    base = ["prune", "--config", conf, "--model", workspace / "toy.ckpt",
            "--data", workspace / "data.jsonl"]
    assert cli(capsys, *base, "--out", workspace / "c1")[0] == 0
    plan = json.loads((workspace / "c1" / "plan.json").read_text())
    assert plan["config"]["ratio"] == 0.4 and plan["config"]["cmds_enabled"] is False
    assert plan["method"] == "no-cmds"
    assert cli(capsys, *base, "--ratio", "0.2", "--out", workspace / "c2")[0] == 0
    assert json.loads((workspace / "c2" / "plan.json").read_text())["config"]["ratio"] == 0.2


def test_unknown_config_key(capsys, workspace):
    conf = workspace / "bad.conf"
    conf.write_text("ratoi = 0.4\n")
    code, _, err = cli(capsys, "prune", "--config", conf, "--model", workspace / "toy.ckpt",
                       "--data", workspace / "data.jsonl", "--out", workspace / "x")
    assert code == 2 and "ratoi" in json.loads(err)["message"]


def test_seed_environment_default(capsys, workspace, monkeypatch):
    monkeypatch.setenv("MUCRASP_SEED", "7")
    assert cli(capsys, "gen-data", "--n", "2", "--d-model", "16", "--n-vision-tokens", "4",
               "--out", workspace / "env.jsonl")[0] == 0
    line = json.loads((workspace / "env.jsonl").read_text().splitlines()[0])
    assert line["corpus_seed"] == 7
    assert cli(capsys, "gen-data", "--seed", "3", "--n", "1", "--d-model", "16",
               "--n-vision-tokens", "4", "--out", workspace / "env2.jsonl")[0] == 0
    assert json.loads((workspace / "env2.jsonl").read_text())["corpus_seed"] == 3


def test_train_zero_steps(capsys, workspace):
    code, _, _ = cli(capsys, "train", "--model", workspace / "toy.ckpt", "--data",
                     workspace / "data.jsonl", "--steps", "0", "--out", workspace / "same.ckpt")
    assert code == 0
    assert (workspace / "same.ckpt").read_bytes() == (workspace / "toy.ckpt").read_bytes()


def test_single_window_ablation(capsys, workspace):
    code, out, _ = cli(capsys, "ablate", "--model", workspace / "toy.ckpt", "--data",
                       workspace / "data.jsonl", "--window-start", "1", "--window-len", "2",
                       "--out", workspace / "abl.json")
    assert code == 0 and "1 window" in out
    rows = json.loads((workspace / "abl.json").read_text())["rows"]
    assert rows[0]["method"] == "zero_mlp[1:3]"


def test_compare_with_failing_method(capsys, workspace):
    code, out, _ = cli(capsys, "compare", "--model", workspace / "toy.ckpt", "--data",
                       workspace / "data.jsonl", "--ratio", "0.3", "--methods", "magnitude,nope",
                       "--out", workspace / "cmp.json", "--csv", workspace / "cmp.csv")
    rows = json.loads((workspace / "cmp.json").read_text())["rows"]
    assert code == 0 and "1 failed" in out
    assert rows[0]["method"] == "magnitude" and "error" in rows[1]
