import hashlib
import json
import re
import subprocess
import sys

import pytest

from crct.cli import COMMANDS, main

SMALL = ["--d-model", "16", "--n-blocks", "1", "--n-heads", "2", "--batch-size", "16"]


def _sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen", "--out", str(root / "data"), "--charts", "3", "--qa-per-chart", "4", "--seed", "1"]) == 0
    assert main(["train", "--data", str(root / "data"), "--out", str(root / "run"), "--epochs", "3", *SMALL]) == 0
    return root


def test_gen_counts(tmp_path, capsys):
    assert main(["gen", "--out", str(tmp_path), "--charts", "100", "--qa-per-chart", "8", "--seed", "1"]) == 0
    assert len((tmp_path / "charts.v1.jsonl").read_text().splitlines()) == 100
    assert len((tmp_path / "qa.v1.jsonl").read_text().splitlines()) == 800
    out = capsys.readouterr().out
    assert "100 charts" in out and "800 questions" in out
    assert json.loads((tmp_path / "effective_config.json").read_text())["seed"] == 1


def test_gen_is_deterministic(tmp_path):
    for d in ("a", "b"):
        assert main(["gen", "--out", str(tmp_path / d), "--charts", "20", "--seed", "4"]) == 0
    for f in ("charts.v1.jsonl", "qa.v1.jsonl"):
        assert _sha(tmp_path / "a" / f) == _sha(tmp_path / "b" / f)


def test_gen_refuses_to_overwrite(tmp_path):
    args = ["gen", "--out", str(tmp_path), "--charts", "2"]
    assert main(args) == 0
    assert main(args) == 2
    assert main(args + ["--force"]) == 0


def test_gen_usage_errors(tmp_path):
    assert main(["gen", "--out", str(tmp_path), "--charts", "0"]) == 1
    assert main(["gen", "--charts", "3"]) == 1
    assert main(["gen", "--out", str(tmp_path), "--charts", "x"]) == 1
    assert main([]) == 1


def test_seed_env_and_config_precedence(tmp_path, monkeypatch):
    monkeypatch.setenv("CRCT_SEED", "7")
    assert main(["gen", "--out", str(tmp_path / "env"), "--charts", "2"]) == 0
    assert json.loads((tmp_path / "env/effective_config.json").read_text())["seed"] == 7
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"seed": 9, "charts": 3, "generator": {"series_count": [2, 2]}}))
    assert main(["gen", "--config", str(cfg), "--out", str(tmp_path / "file")]) == 0
    eff = json.loads((tmp_path / "file/effective_config.json").read_text())
    assert eff["seed"] == 9 and eff["charts"] == 3
    assert main(["gen", "--config", str(cfg), "--out", str(tmp_path / "flag"), "--seed", "2"]) == 0
    assert json.loads((tmp_path / "flag/effective_config.json").read_text())["seed"] == 2
    for line in (tmp_path / "file/charts.v1.jsonl").read_text().splitlines():
        assert len(json.loads(line)["chart"]["series"]) == 2
    cfg.write_text(json.dumps({"sed": 1}))
    assert main(["gen", "--config", str(cfg), "--out", str(tmp_path / "bad")]) == 1


def test_help_lists_every_flag_with_default(capsys):
    for name, (opts, _, _) in COMMANDS.items():
        with pytest.raises(SystemExit) as e:
            main([name, "--help"])
        assert e.value.code == 0
        text = " ".join(capsys.readouterr().out.split())
        for key, (default, _, _) in opts.items():
            assert "--" + key.replace("_", "-") in text, (name, key)
            assert f"(default: {default})" in text, (name, key)


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "crct", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "gen" in r.stdout and "attribute" in r.stdout


def test_train_outputs(run):
    files = {p.name for p in (run / "run").iterdir()}
    assert {"metrics.csv", "vocab.json", "effective_config.json", "latest", "epoch_3.ckpt"} <= files
    assert (run / "run/latest").read_text().strip() == "epoch_3.ckpt"


def test_train_missing_dataset_names_the_path(tmp_path, capsys):
    missing = tmp_path / "nowhere"
    assert main(["train", "--data", str(missing), "--out", str(tmp_path / "r")]) == 2
    assert str(missing) in capsys.readouterr().err


def test_train_refuses_existing_run(run):
    assert main(["train", "--data", str(run / "data"), "--out", str(run / "run"), "--epochs", "3", *SMALL]) == 2


def test_resume_latest_matches_uninterrupted_run(run, tmp_path):
    out = tmp_path / "r"
    base = ["train", "--data", str(run / "data"), "--out", str(out), *SMALL]
    # an interrupted run is emulated by a 2-epoch checkpoint of the 3-epoch schedule
    assert main(base + ["--epochs", "3"]) == 0
    (out / "latest").write_text("epoch_2.ckpt\n")
    (out / "epoch_3.ckpt").unlink()
    assert main(base + ["--epochs", "3", "--resume", "latest"]) == 0
    assert _sha(out / "metrics.csv") == _sha(run / "run/metrics.csv")
    assert _sha(out / "epoch_3.ckpt") == _sha(run / "run/epoch_3.ckpt")


def test_resume_with_changed_config_is_a_hard_error(run, tmp_path):
    out = tmp_path / "r"
    base = ["train", "--data", str(run / "data"), "--out", str(out), "--epochs", "1", *SMALL]
    assert main(base) == 0
    assert main(base + ["--resume", "latest", "--lambda-reg", "0.5"]) == 2


def test_eval_writes_report(run, tmp_path, capsys):
    out = tmp_path / "rep"
    assert main(["eval", "--run", str(run / "run"), "--data", str(run / "data"), "--out", str(out)]) == 0
    assert {"report.csv", "report.json", "predictions.csv", "tick_curve.svg", "error_histogram.svg",
            "effective_config.json"} <= {p.name for p in out.iterdir()}
    assert "overall" in capsys.readouterr().out
    again = tmp_path / "rep2"
    assert main(["eval", "--run", str(run / "run"), "--data", str(run / "data"), "--out", str(again)]) == 0
    for f in ("report.csv", "report.json", "predictions.csv"):
        assert _sha(out / f) == _sha(again / f)


def test_predict_prints_answer_and_score(run, capsys):
    assert main(["predict", "--run", str(run / "run"), "--data", str(run / "data"), "--chart-id", "0",
                 "--question", "What is the title of the graph?"]) == 0
    out = capsys.readouterr().out
    assert re.search(r"^answer: .+$", out, re.M) and re.search(r"^score: [0-9.]+$", out, re.M)
    if "answer: <R>" in out:
        assert re.search(r"^value: ", out, re.M)


def test_predict_unknown_chart_gives_hint(run, capsys):
    assert main(["predict", "--run", str(run / "run"), "--data", str(run / "data"), "--chart-id", "99",
                 "--question", "q"]) == 2
    assert "available ids 0..2" in capsys.readouterr().err


def test_attribute_writes_one_box_per_element(run, tmp_path):
    out = tmp_path / "att"
    assert main(["attribute", "--run", str(run / "run"), "--data", str(run / "data"), "--out", str(out),
                 "--qa-id", "1", "--steps", "4"]) == 0
    n_rows = len((out / "saliency.csv").read_text().splitlines()) - 1
    assert len(re.findall('class="saliency"', (out / "saliency.svg").read_text())) == n_rows > 0
    assert main(["attribute", "--run", str(run / "run"), "--data", str(run / "data"), "--out", str(out),
                 "--qa-id", "999"]) == 2


def test_plot_writes_curves(run, tmp_path):
    assert main(["plot", "--run", str(run / "run"), "--out", str(tmp_path)]) == 0
    for f in ("loss_curve.svg", "accuracy_curve.svg"):
        assert (tmp_path / f).read_text().startswith("<svg")


def test_numerical_failure_exit_code(run, tmp_path, monkeypatch):
    from crct import train

    def boom(self):
        raise train.NumericalError("non-finite loss at step 0")

    monkeypatch.setattr(train.Trainer, "run_epoch", boom)
    assert main(["train", "--data", str(run / "data"), "--out", str(tmp_path / "x"), "--epochs", "1", *SMALL]) == 3
