import json
import subprocess
import sys

import pytest

from rulecap.cli import main
from rulecap.data import read_jsonl

SMALL_TOML = """
n_train = 30
n_test = 5
epochs = 1
scorer_epochs = 1
d_model = 16
n_heads = 2
d_ff = 16
n_dec_layers = 1
d_txt = 32
d_rule_txt = 64
batch_size = 16
warmup_steps = 0
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "cfg.toml").write_text(SMALL_TOML)
    assert main(["gen-data", "--config", str(root / "cfg.toml"), "--out-dir", str(root / "data")]) == 0
    (root / "cfg.toml").write_text(SMALL_TOML + f'data_dir = "{root / "data"}"\n')
    return root


def test_gen_data_writes_splits(workspace):
    assert len(read_jsonl(workspace / "data" / "train.jsonl")) == 30
    assert (workspace / "data" / "gazetteer.tsv").exists()


def test_extract_then_build_rule(workspace, capsys):
    sample = read_jsonl(workspace / "data" / "test.jsonl")[0]
    (workspace / "article.txt").write_text(sample["article"])
    (workspace / "frame.json").write_text(json.dumps(sample["frame"]))
    out = workspace / "ents.json"
    code = main(["extract-entities", "--article", str(workspace / "article.txt"), "--gazetteer",
                 str(workspace / "data" / "gazetteer.tsv"), "--image-id", sample["id"], "--image-features",
                 str(workspace / "data" / "test.jsonl"), "--top-k", "2", "--out", str(out)])
    assert code == 0
    ents = json.loads(out.read_text())
    assert len(ents["top_k"]) == 2 and len(ents["entities"]) >= 2
    capsys.readouterr()
    assert main(["build-rule", "--frame", str(workspace / "frame.json"), "--entities", str(out)]) == 0
    rule = capsys.readouterr().out.strip()
    assert rule.startswith(sample["frame"]["verb"] + " |") or rule == sample["frame"]["verb"]


def test_train_generate_evaluate(workspace):
    cfg = str(workspace / "cfg.toml")
    run = workspace / "run"
    assert main(["train", "--config", cfg, "--out-dir", str(run), "--variant", "FULL"]) == 0
    assert (run / "FULL.npz").exists() and (run / "scorer.json").exists()
    hyp = run / "hyp.jsonl"
    assert main(["generate", "--config", cfg, "--checkpoint", str(run / "FULL.npz"), "--scorer",
                 str(run / "scorer.json"), "--data", str(workspace / "data"), "--out", str(hyp)]) == 0
    records = read_jsonl(hyp)
    assert len(records) == 5 and all("rule" in r for r in records)
    report = run / "report.json"
    assert main(["evaluate", "--hyp", str(hyp), "--ref", str(workspace / "data" / "test.jsonl"), "--report",
                 str(report), "--gazetteer", str(workspace / "data" / "gazetteer.tsv")]) == 0
    assert json.loads(report.read_text())["n_samples"] == 5


def test_self_evaluation_through_the_cli(workspace):
    ref = str(workspace / "data" / "test.jsonl")
    report = workspace / "self.json"
    assert main(["evaluate", "--hyp", ref, "--ref", ref, "--report", str(report), "--gazetteer",
                 str(workspace / "data" / "gazetteer.tsv")]) == 0
    rep = json.loads(report.read_text())
    assert rep["bleu4"] == pytest.approx(1.0) and rep["entity_p"] == rep["entity_r"] == 1.0


def test_ablate(workspace):
    out = workspace / "grid"
    assert main(["--config", str(workspace / "cfg.toml"), "--out-dir", str(out), "ablate", "--variants",
                 "FULL,NON_ENTITY", "--placements", "P4"]) == 0
    assert (out / "grid.json").exists() and (out / "P4" / "report.md").exists()


def test_error_exit_codes(workspace, capsys):
    assert main(["run", "--config", str(workspace / "missing.toml")]) == 2
    assert main(["evaluate", "--hyp", str(workspace / "nope.jsonl"), "--ref", str(workspace / "nope.jsonl")]) == 1
    (workspace / "badframe.json").write_text("{}")
    assert main(["build-rule", "--frame", str(workspace / "badframe.json")]) == 1
    assert "error" in capsys.readouterr().err
    with pytest.raises(SystemExit) as exc:
        main(["no-such-verb"])
    assert exc.value.code == 2


def test_console_script_help():
    out = subprocess.run([sys.executable, "-m", "rulecap.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for verb in ("gen-data", "extract-entities", "build-rule", "train", "generate", "evaluate", "ablate"):
        assert verb in out.stdout
