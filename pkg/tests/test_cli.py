import csv
import json
import subprocess
import sys
from collections import Counter

import pytest

from padprobe.cli import build_parser, main, read_config


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def error_line(err):
    lines = [l for l in err.splitlines() if l.startswith("padprobe-error ")]
    assert len(lines) == 1
    return json.loads(lines[0][len("padprobe-error "):])


def test_generate_writes_video_dirs(tmp_path, capsys):
    out = tmp_path / "d"
    code, _, _ = run(capsys, "generate", "--dataset", "simb", "--videos", "10", "--seed", "1", "--out", str(out))
    assert code == 0
    assert len([p for p in out.iterdir() if p.is_dir()]) == 10
    manifest = json.loads((out / "run-manifest.json").read_text())
    assert manifest["command"] == "generate" and manifest["seeds"] == {"global_seed": 1}
    assert manifest["options"]["videos"] == 10 and manifest["artifacts"]


def test_generate_refuses_non_empty_out(tmp_path, capsys):
    (tmp_path / "x").write_text("keep")
    code, _, err = run(capsys, "generate", "--videos", "1", "--out", str(tmp_path))
    assert code == 1 and error_line(err)["kind"] == "conflict"
    assert (tmp_path / "x").read_text() == "keep"


def test_uniformity_matrix_command(capsys):
    code, out, err = run(capsys, "probe", "uniformity-matrix", "--seed", "3")
    assert code == 0
    body = [l.split() for l in out.splitlines() if l.split() and l.split()[0] in
            ("visual", "all_zeros", "all_ones", "random", "fixed_random")]
    assert len(body) == 10 and all(len(r) == 5 for r in body)
    assert sum(r.count("uniform") for r in body) == 13
    assert "40/40" in err


def test_grid_two_trials_per_cell(tmp_path, capsys):
    spec = tmp_path / "g.cfg"
    spec.write_text("dataset=simb input=all_ones,fixed_random padding=reflect\n")
    out = tmp_path / "run"
    code, stdout, err = run(capsys, "grid", "--spec", str(spec), "--trials", "2", "--tier", "smoke",
                            "--iterations", "2", "--train-videos", "2", "--test-videos", "1",
                            "--feature-channels", "4", "--out", str(out))
    assert code == 0, err
    with open(out / "results.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert Counter(r["input_mode"] for r in rows) == {"all_ones": 2, "fixed_random": 2}
    assert (out / "run-manifest.json").exists() and (out / "g.cfg").exists()
    assert "2 cells x 2 trials" in err


def test_unknown_flag_is_one_line_error(capsys):
    code, out, err = run(capsys, "probe", "uniformity-matrix", "--colour", "red")
    assert code == 2 and out == ""
    assert len(err.strip().splitlines()) == 1
    msg = error_line(err)
    assert msg["command"] == "probe" and msg["kind"] == "usage" and "--colour" in msg["message"]


def test_missing_required_flag(capsys):
    code, _, err = run(capsys, "grid", "--spec", "nowhere.cfg")
    assert code == 2 and "--out" in error_line(err)["message"]


def test_missing_dataset(tmp_path, capsys, monkeypatch):
    monkeypatch.delenv("PADPROBE_DATA_DIR", raising=False)
    code, _, err = run(capsys, "probe", "oracle", "--data-dir", str(tmp_path))
    assert code == 1
    assert str(tmp_path) in error_line(err)["message"]


def test_missing_checkpoint(tmp_path, capsys):
    code, _, err = run(capsys, "eval", "--checkpoint", str(tmp_path), "--test-data", str(tmp_path))
    assert code == 1 and error_line(err)["kind"] == "missing-checkpoint"


def test_every_option_shows_a_default():
    parser = build_parser()
    subs = parser._subparsers._group_actions[0].choices
    for name, sub in subs.items():
        text = sub.format_help()
        for action in sub._actions:
            if action.option_strings and action.dest not in ("help",):
                assert action.help, (name, action.dest)
        assert "default:" in text


def test_config_file_and_flag_precedence(tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("# probe settings\nseed = 3\nfeature-channels = 8\nout = %s\n" % (tmp_path / "a"))
    code, _, _ = run(capsys, "probe", "uniformity-matrix", "--config", str(cfg), "--seed", "5")
    assert code == 0
    options = json.loads((tmp_path / "a" / "run-manifest.json").read_text())["options"]
    assert options["seed"] == 5 and options["feature_channels"] == 8


def test_config_unknown_key(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"seed": 1, "flavour": "x"}))
    code, _, err = run(capsys, "probe", "uniformity-matrix", "--config", str(cfg))
    assert code == 1 and "flavour" in error_line(err)["message"]


def test_read_config_formats(tmp_path):
    (tmp_path / "a.cfg").write_text("bias = off\ntrials=2\nspec = 'g.cfg'  # comment\n")
    assert read_config(tmp_path / "a.cfg") == {"bias": False, "trials": 2, "spec": "g.cfg"}
    (tmp_path / "b.json").write_text(json.dumps({"command": "grid", "options": {"padding-size": 2}}))
    assert read_config(tmp_path / "b.json") == {"padding_size": 2}


def test_output_reproduces_from_manifest(tmp_path, capsys, monkeypatch):
    out = tmp_path / "d"
    code, _, _ = run(capsys, "generate", "--videos", "2", "--seed", "7", "--out", str(out))
    assert code == 0
    manifest = out / "run-manifest.json"
    first = json.loads(manifest.read_text())
    saved = tmp_path / "m.json"
    saved.write_text(manifest.read_text())
    monkeypatch.chdir(tmp_path)
    code, _, _ = run(capsys, "generate", "--config", str(saved), "--overwrite")
    assert code == 0
    again = json.loads(manifest.read_text())
    assert again["artifacts"] == first["artifacts"]


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "padprobe", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.startswith("padprobe ")


@pytest.mark.parametrize("argv", [[], ["frobnicate"]])
def test_bad_subcommand(argv, capsys):
    code, _, err = run(capsys, *argv)
    assert code == 2 and error_line(err)["kind"] == "usage"


def test_probe_figures_one_png_per_channel(tmp_path, capsys):
    out = tmp_path / "figs"
    code, stdout, err = run(capsys, "probe", "figures", "--input-mode", "all_ones", "--padding-mode", "reflect",
                            "--feature-channels", "6", "--out", str(out))
    assert code == 0, err
    summary = json.loads(stdout)
    assert summary["figures"] == 6 and summary["uniform"] is True
    assert len(list(out.glob("channel_*.png"))) == 6


def test_train_then_eval(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("PADPROBE_DATA_DIR", str(tmp_path / "data"))
    for split, n in (("train", 2), ("test", 1)):
        assert run(capsys, "generate", "--split", split, "--videos", str(n), "--out",
                   str(tmp_path / "data" / "SimB" / split))[0] == 0
    ckpt = tmp_path / "ckpt"
    code, stdout, err = run(capsys, "train", "--iterations", "2", "--feature-channels", "4", "--out", str(ckpt))
    assert code == 0, err
    assert json.loads(stdout)["checkpoint"] == str(ckpt) and (ckpt / "checkpoint.pt").exists()
    assert "iter 2/2" in err
    code, stdout, err = run(capsys, "eval", "--checkpoint", str(ckpt), "--out", str(tmp_path / "ev"))
    assert code == 0, err
    metrics = json.loads(stdout)
    assert metrics["p1"] > 0 and metrics["p2"] > 0
    manifest = json.loads((tmp_path / "ev" / "run-manifest.json").read_text())
    assert "metrics.json" in manifest["artifacts"] and manifest["checkpoint_sha256"]
