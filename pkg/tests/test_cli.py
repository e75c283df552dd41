import json
import subprocess
import sys

import numpy as np
import pytest

from wispike.cli import build_parser, run
from wispike.csi_data import read_csi_file, read_manifest
from wispike.training import CHECKPOINT_NAME, load_checkpoint


def files_of(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir()) if p.is_file()}


@pytest.fixture(scope="module")
def quick_run(tmp_path_factory, small_bench):
    out = tmp_path_factory.mktemp("cli_run")
    code = run(["train", "--manifest", str(small_bench), "--out", str(out), "--epochs", "2",
                "--batch-size", "16"])
    assert code == 0
    return out


# --- synth / compose -------------------------------------------------------------------

def test_synth_is_byte_identical_on_rerun(tmp_path, capsys):
    argv = ["synth", "--atoms", "4", "--per-class", "10", "--actions", "1", "--seed", "7"]
    assert run(argv + ["--out", str(tmp_path / "a")]) == 0
    first = files_of(tmp_path / "a")
    assert sum(n.endswith(".csit") for n in first) == 40 and "manifest.csv" in first
    assert "40 samples" in capsys.readouterr().out
    assert run(argv + ["--out", str(tmp_path / "a")]) == 0
    assert files_of(tmp_path / "a") == first
    assert run(argv + ["--out", str(tmp_path / "b")]) == 0
    assert files_of(tmp_path / "b") == first


def test_synth_seed_env_fallback(tmp_path, monkeypatch):
    base = ["synth", "--atoms", "2", "--per-class", "2", "--width", "16"]
    monkeypatch.setenv("WISPIKE_SEED", "5")
    assert run(base + ["--out", str(tmp_path / "env")]) == 0
    monkeypatch.delenv("WISPIKE_SEED")
    assert run(base + ["--seed", "5", "--out", str(tmp_path / "flag")]) == 0
    assert run(base + ["--out", str(tmp_path / "zero")]) == 0
    assert files_of(tmp_path / "env") == files_of(tmp_path / "flag")
    assert files_of(tmp_path / "env") != files_of(tmp_path / "zero")


def test_compose_two_wide_files(tmp_path):
    assert run(["synth", "--atoms", "2", "--per-class", "1", "--width", "500", "--test-fraction", "0",
                "--out", str(tmp_path / "d")]) == 0
    a, b = tmp_path / "d" / "s00000.csit", tmp_path / "d" / "s00001.csit"
    assert read_csi_file(a).shape[2] == 500
    out = tmp_path / "c.csit"
    assert run(["compose", "--inputs", str(a), str(b), "--width", "500", "--out", str(out)]) == 0
    s = read_csi_file(out)
    assert s.shape[2] == 500 and len(s.label.atoms) == 2
    assert s.label.atoms == (0, 1) and s.label.class_index == 1


# --- help ------------------------------------------------------------------------------

SUBCOMMANDS = ["synth", "compose", "train", "eval", "rates", "energy", "export-features"]


@pytest.mark.parametrize("cmd", SUBCOMMANDS)
def test_help_lists_every_flag(cmd, capsys):
    assert run([cmd, "--help"]) == 0
    text = " ".join(capsys.readouterr().out.split())
    sub = build_parser()._subparsers._group_actions[0].choices[cmd]
    for action in sub._actions:
        for opt in action.option_strings:
            assert opt in text
        if action.option_strings and action.default not in (None, False, "==SUPPRESS==") and not action.required:
            assert f"(default: {action.default})" in text


def test_train_help_shows_standard_defaults(capsys):
    run(["train", "--help"])
    text = " ".join(capsys.readouterr().out.split())
    for snippet in ("training epochs (default: 30)", "mini-batch size (default: 32)",
                    "learning rate (default: 0.01)", "temperature (default: 0.07)",
                    "time steps T (default: 4)"):
        assert snippet in text


def test_console_script_module_entry():
    proc = subprocess.run([sys.executable, "-m", "wispike.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "export-features" in proc.stdout


# --- exit codes ---------------------------------------------------------------------------

@pytest.mark.parametrize("argv", [[], ["frobnicate"], ["synth", "--atoms", "2"],
                                  ["synth", "--atoms", "x", "--per-class", "1", "--out", "o"],
                                  ["train", "--out", "o"]])
def test_usage_errors_exit_1(argv, capsys, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert run(argv) == 1
    err = capsys.readouterr().err
    assert err.startswith("error: ") and err.count("\n") == 1


def test_bad_config_and_env_exit_1(tmp_path, capsys, monkeypatch, small_bench):
    cfg = tmp_path / "run.json"
    cfg.write_text('{"epochs": 0}', encoding="utf-8")
    assert run(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1
    cfg.write_text('{"epoch": 3}', encoding="utf-8")
    assert run(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1
    monkeypatch.setenv("WISPIKE_SEED", "abc")
    assert run(["synth", "--atoms", "1", "--per-class", "1", "--out", str(tmp_path / "s")]) == 1
    assert run(["synth", "--atoms", "1", "--per-class", "1", "--actions", "4", "--seed", "0",
                "--out", str(tmp_path / "s")]) == 1
    errs = capsys.readouterr().err.splitlines()
    assert len(errs) == 4 and all(e.startswith("error: ") for e in errs)


def test_data_errors_exit_2(tmp_path, capsys, quick_run, small_bench):
    assert run(["eval", "--ckpt", str(tmp_path / "missing.wspk"), "--manifest", str(small_bench)]) == 2
    bad = tmp_path / "bad.wspk"
    bad.write_bytes(b"WSPK" + b"\0" * 7)
    assert run(["eval", "--ckpt", str(bad), "--manifest", str(small_bench)]) == 2
    junk = tmp_path / "junk.csit"
    junk.write_bytes(b"NOPE" + b"\0" * 40)
    assert run(["compose", "--inputs", str(junk), "--out", str(tmp_path / "c.csit")]) == 2
    assert run(["rates", "--rundir", str(tmp_path)]) == 2
    errs = capsys.readouterr().err.splitlines()
    assert len(errs) == 4 and all(e.startswith("error: ") for e in errs)


# --- train / eval / rates / energy / export ------------------------------------------------

def test_train_precedence_flag_over_file_over_default(tmp_path, small_bench, monkeypatch):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"epochs": 5, "batch_size": 8, "manifest": str(small_bench)}), encoding="utf-8")
    monkeypatch.setenv("WISPIKE_SEED", "11")
    assert run(["train", "--config", str(cfg), "--out", str(tmp_path / "o"), "--epochs", "1", "--tau", "0.2"]) == 0
    used = json.loads((tmp_path / "o" / "run.json").read_text(encoding="utf-8"))
    assert used["epochs"] == 1          # flag
    assert used["batch_size"] == 8      # file
    assert used["learning_rate"] == 0.01  # default
    assert used["loss"]["tau"] == 0.2 and used["seed"] == 11
    cfg.write_text(json.dumps({"epochs": 1, "seed": 3, "manifest": str(small_bench)}), encoding="utf-8")
    assert run(["train", "--config", str(cfg), "--out", str(tmp_path / "p")]) == 0
    assert json.loads((tmp_path / "p" / "run.json").read_text(encoding="utf-8"))["seed"] == 3


def test_train_is_idempotent(tmp_path, small_bench, quick_run):
    assert run(["train", "--manifest", str(small_bench), "--out", str(tmp_path), "--epochs", "2",
                "--batch-size", "16"]) == 0
    mine, theirs = files_of(tmp_path), files_of(quick_run)
    for name in ("history.csv", "rates.csv", CHECKPOINT_NAME):
        assert mine[name] == theirs[name]


def test_eval_prints_metrics_and_writes_confusion(tmp_path, capsys, quick_run, small_bench):
    ck = quick_run / CHECKPOINT_NAME
    out = tmp_path / "cm.csv"
    assert run(["eval", "--ckpt", str(ck), "--manifest", str(small_bench), "--confusion", str(out)]) == 0
    lines = dict(l.split(": ", 1) for l in capsys.readouterr().out.splitlines() if ": " in l)
    assert {"accuracy", "precision", "recall", "f1"} <= set(lines)
    rows = out.read_text(encoding="utf-8").splitlines()
    assert rows[0] == "true\\pred,a0,a1,a2,a3"
    counts = np.array([[int(c) for c in r.split(",")[1:]] for r in rows[1:]])
    assert counts.sum() == len(read_manifest(small_bench).split("test").entries)
    assert float(lines["accuracy"]) == pytest.approx(np.trace(counts) / counts.sum(), abs=5e-5)


def test_rates_csv(quick_run, tmp_path, capsys):
    assert run(["rates", "--rundir", str(quick_run)]) == 0
    rows = capsys.readouterr().out.splitlines()
    assert rows[0] == "epoch,split,layer,name,mean,std,in_band"
    assert len(rows) == 1 + 2 * 2 * 4
    assert run(["rates", "--rundir", str(quick_run), "--final", "--out", str(tmp_path / "r.csv")]) == 0
    final = (tmp_path / "r.csv").read_text(encoding="utf-8").splitlines()
    assert len(final) == 1 + 2 * 4 and all(r.startswith("2,") for r in final[1:])
    for r in final[1:]:
        assert 0 <= float(r.split(",")[4]) <= 1


def test_energy_report(quick_run, small_bench, capsys, tmp_path):
    ck = str(quick_run / CHECKPOINT_NAME)
    assert run(["energy", "--ckpt", ck, "--manifest", str(small_bench), "--baseline", "--paper-convention"]) == 0
    out = capsys.readouterr().out
    assert out.startswith("layer,kind,acs,macs,energy_pj\n")
    assert "total,dynamic/acs-only," in out and "Energy (pJ)" in out
    ratio = float(out.strip().splitlines()[-1].split(": ")[1])
    assert ratio > 0
    assert run(["energy", "--ckpt", ck, "--manifest", str(small_bench), "--out", str(tmp_path / "e.csv")]) == 0
    assert (tmp_path / "e.csv").read_text(encoding="utf-8").startswith("layer,kind,acs,macs,energy_pj")


def test_export_features(quick_run, small_bench, tmp_path):
    ck = str(quick_run / CHECKPOINT_NAME)
    sample = str(small_bench.parent / "s00000.csit")
    model = load_checkpoint(ck).trained.model
    out = tmp_path / "f.csv"
    assert run(["export-features", "--ckpt", ck, "--sample", sample, "--layer", "1", "--out", str(out)]) == 0
    rows = out.read_text(encoding="utf-8").splitlines()
    assert rows[0] == "t,channel,row,col,value"
    t = model.config.time_steps
    assert len(rows) - 1 == t * int(np.prod(model.layers[1].out_shape))
    # layer 1 is a spiking layer: its feature map is binary
    assert {float(r.split(",")[-1]) for r in rows[1:]} <= {0.0, 1.0}
    assert run(["export-features", "--ckpt", ck, "--sample", sample, "--layer", "-1", "--out", str(out)]) == 0
    rows = out.read_text(encoding="utf-8").splitlines()
    assert rows[0] == "t,feature,value" and len(rows) - 1 == model.n_class
    assert run(["export-features", "--ckpt", ck, "--sample", sample, "--layer", "99"]) == 1


@pytest.mark.slow
def test_eval_on_trained_benchmark(trained_run, capsys, tmp_path):
    ck = str(trained_run.result.checkpoint)
    assert run(["eval", "--ckpt", ck, "--manifest", str(trained_run.manifest),
                "--confusion", str(tmp_path / "cm.csv")]) == 0
    acc = float([l for l in capsys.readouterr().out.splitlines() if l.startswith("accuracy")][0].split(": ")[1])
    assert acc >= 0.95
