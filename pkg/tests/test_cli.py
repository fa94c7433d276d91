import json
import os
import subprocess
import sys

import pytest

from srlab.cli import main, resolve


def _run(argv, capsys):
    code = main(argv)
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    code = main(["train", "--objective", "natural", "--epochs", "2", "--train-size", "40",
                 "--out", str(out), "--seed", "3"])
    assert code == 0
    return out


def test_train_artifacts(trained):
    for name in ("final.ckpt", "best.ckpt", "report.json", "report.csv", "run.json"):
        assert (trained / name).exists()
    run = json.loads((trained / "run.json").read_text())
    assert run["command"] == "train" and run["config"]["epochs"] == 2


def test_run_json_regenerates(trained, tmp_path, capsys):
    code, out, _ = _run(["train", "--config", str(trained / "run.json"), "--out", str(tmp_path)], capsys)
    assert code == 0
    a = json.loads((trained / "run.json").read_text())
    b = json.loads((tmp_path / "run.json").read_text())
    assert a["summary"] == b["summary"]
    assert (trained / "final.ckpt").read_bytes() == (tmp_path / "final.ckpt").read_bytes()


def test_sweep_three_rows(trained, tmp_path, capsys):
    code, _, _ = _run(["sweep", "--checkpoint", str(trained / "final.ckpt"), "--bandwidths", "4,8,16",
                       "--test-size", "20", "--steps", "1", "--out", str(tmp_path)], capsys)
    assert code == 0
    lines = (tmp_path / "sweep.csv").read_text().strip().split("\n")
    assert len(lines) == 4 and lines[0].startswith("bandwidth,final")


@pytest.mark.parametrize("cmd,extra,files", [
    ("attack", ["--steps", "1"], ["attack.json"]),
    ("aggressiveness", ["--steps", "1", "--bandwidths", "0,16"], ["aggressiveness.csv"]),
    ("spectrum", ["--steps", "1", "--samples", "4"], ["spectrum.pgm", "spectrum.json"]),
    ("heatmap", ["--samples", "4", "--stride", "8", "--v", "0.5"], ["heatmap.pgm", "heatmap.json"]),
])
def test_eval_subcommands(trained, tmp_path, capsys, cmd, extra, files):
    code, out, _ = _run([cmd, "--checkpoint", str(trained / "final.ckpt"), "--test-size", "20",
                         "--out", str(tmp_path)] + extra, capsys)
    assert code == 0
    assert json.loads(out)["command"] == cmd
    for f in files + ["run.json"]:
        assert (tmp_path / f).exists()


def test_gradcheck(tmp_path, capsys):
    code, out, _ = _run(["gradcheck", "--seed", "1", "--out", str(tmp_path)], capsys)
    assert code == 0
    report = json.loads((tmp_path / "gradcheck.json").read_text())
    assert report["ok"] and report["max_rel_error"] < 1e-6


def test_unknown_subcommand_writes_nothing(tmp_path, capsys, monkeypatch):
    monkeypatch.chdir(tmp_path)
    code, _, err = _run(["frobnicate", "--out", str(tmp_path / "x")], capsys)
    assert code == 2
    assert json.loads(err)["exit_code"] == 2
    assert os.listdir(tmp_path) == []


def test_usage_errors(capsys):
    assert _run([], capsys)[0] == 2
    assert _run(["train", "--epochs", "many"], capsys)[0] == 2
    assert _run(["train", "--objective", "magic"], capsys)[0] == 2


def test_config_errors(tmp_path, capsys):
    assert _run(["attack"], capsys)[0] == 3
    assert _run(["train", "--train-size", "41"], capsys)[0] == 3
    assert _run(["train", "--epsilon", "-1"], capsys)[0] == 3
    bad = tmp_path / "bad.toml"
    bad.write_text("epochs = [\n")
    assert _run(["train", "--config", str(bad)], capsys)[0] == 3
    bad.write_text("colour = 'red'\n")
    assert _run(["train", "--config", str(bad)], capsys)[0] == 3


def test_missing_files(tmp_path, capsys):
    assert _run(["train", "--config", str(tmp_path / "none.toml")], capsys)[0] == 4
    assert _run(["attack", "--checkpoint", str(tmp_path / "none.ckpt"), "--out", str(tmp_path)], capsys)[0] == 4


def test_bad_checkpoint(tmp_path, capsys):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"garbage" * 10)
    assert _run(["attack", "--checkpoint", str(bad), "--out", str(tmp_path)], capsys)[0] == 5


def test_precedence(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text("epochs = 5\nlr = 0.2\nseed = 9\n")
    _, resolved = resolve(["train", "--config", str(cfg), "--seed", "4"])
    assert resolved["epochs"] == 5 and resolved["lr"] == 0.2 and resolved["seed"] == 4
    assert resolved["batch_size"] is None and resolved["objective"] == "at"


def test_console_script_version():
    out = subprocess.run([sys.executable, "-m", "srlab.cli", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.startswith("srlab ")


def test_sweep_names_colliding_stems(trained, tmp_path, capsys):
    other = tmp_path / "other"
    other.mkdir()
    (other / "final.ckpt").write_bytes((trained / "final.ckpt").read_bytes())
    code, _, _ = _run(["sweep", "--checkpoint", f"{trained / 'final.ckpt'},{other / 'final.ckpt'}",
                       "--bandwidths", "16", "--test-size", "10", "--steps", "1", "--out", str(tmp_path)], capsys)
    assert code == 0
    header = (tmp_path / "sweep.csv").read_text().split("\n")[0]
    assert header == f"bandwidth,{trained.name}-final,other-final,{trained.name}-final_pgd20,other-final_pgd20"
