import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from biolite import cli, data, runtime

GOLDEN = Path(__file__).parent / "data"


def run(args, capsys):
    code = cli.main([str(a) for a in args])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("ds")
    assert cli.main(["synth", "--n", "12", "--seed", "3", "--size", "64", "--out", str(out)]) == 0
    return out


def test_synth_manifest_and_determinism(dataset, tmp_path, capsys):
    rows, meta = data.read_manifest(dataset / "manifest.tsv")
    assert len(rows) == 12 and meta["difficulty"] == "easy" and meta["seed"] == "3"
    code, _, _ = run(["synth", "--n", "12", "--seed", "3", "--size", "64", "--out", tmp_path], capsys)
    assert code == 0
    for f in ["manifest.tsv"] + [r[1] for r in rows] + [r[2] for r in rows]:
        assert (tmp_path / f).read_bytes() == (dataset / f).read_bytes()
    code, _, _ = run(["synth", "--n", "10", "--difficulty", "hard", "--size", "32", "--out", tmp_path / "h"], capsys)
    assert data.read_manifest(tmp_path / "h" / "manifest.tsv")[1]["difficulty"] == "hard"


def test_train_smoke_writes_artifacts(dataset, tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# smoke run\nlr = 0.002\npreprocess.size = 64x64\nbatch_size=4\n")
    out = tmp_path / "run"
    code, stdout, err = run(["train", "--data", dataset, "--config", cfg, "--epochs", "2", "--lr", "0.003",
                             "--out", out], capsys)
    assert code == 0, err
    manifest = json.loads((out / "run.json").read_text())
    assert manifest["config"]["train"]["max_epochs"] == 2
    assert manifest["config"]["train"]["lr"] == 0.003  # flag beats file
    assert manifest["config"]["preprocess"]["size"] == [64, 64]
    assert manifest["config"]["train"]["weight_decay"] == 1e-5
    assert manifest["finished"] is not None
    log_lines = (out / "train_log.csv").read_text().splitlines()
    assert len(log_lines) == 3
    runtime.load(out / "best.blw")

    code, _, _ = run(["train", "--data", dataset, "--config", cfg, "--epochs", "2", "--lr", "0.003",
                      "--out", tmp_path / "again"], capsys)
    assert (tmp_path / "again" / "train_log.csv").read_bytes() == (out / "train_log.csv").read_bytes()
    assert (tmp_path / "again" / "best.blw").read_bytes() == (out / "best.blw").read_bytes()


def test_train_defaults_match_published_hyperparameters():
    cfg = cli.resolve_config({})
    assert (cfg.train.lr, cfg.train.weight_decay, cfg.train.batch_size, cfg.train.max_epochs) == (1e-3, 1e-5, 4, 200)


def test_eval_self_test(dataset, tmp_path, capsys):
    code, out, _ = run(["eval", "--data", dataset, "--split", "test", "--self-test", "--out", tmp_path], capsys)
    assert code == 0
    kv = dict(line.split("=", 1) for line in out.splitlines())
    assert kv["miou"] == kv["mean_dice"] == kv["pixel_accuracy"] == "1.0"
    assert (tmp_path / "eval.csv").exists()


def test_eval_infer_bench_describe_with_golden(dataset, tmp_path, capsys):
    w = GOLDEN / "golden_weights.blw"
    code, out, _ = run(["eval", "--data", dataset, "--split", "all", "--weights", w, "--out", tmp_path], capsys)
    assert code == 0 and "mean_dice=" in out
    code, out, _ = run(["infer", "--weights", w, "--image", GOLDEN / "golden_image.png", "--overlay",
                        "--out", tmp_path], capsys)
    assert code == 0
    assert np.array_equal(data.read_mask(tmp_path / "golden_image_mask.png"), data.read_mask(GOLDEN / "golden_mask.png"))
    assert data.read_image(tmp_path / "golden_image_overlay.png").shape == (180, 240, 3)
    code, out, _ = run(["bench", "--weights", w, "--frames", "3", "--warmup", "1", "--data", dataset,
                        "--out", tmp_path], capsys)
    assert code == 0 and out.splitlines()[1].startswith("preprocess,")
    code, out, _ = run(["describe", "--weights", w], capsys)
    assert code == 0 and "Input Size: 256x256" in out
    code, out, _ = run(["describe", "--set", "enc_channels=8,16", "--csv"], capsys)
    assert code == 0 and out.splitlines()[0] == "layer,kind,out_shape,params,flops"


def test_output_dir_from_environment(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path / "envout"))
    code, _, _ = run(["synth", "--n", "2", "--size", "32"], capsys)
    assert code == 0 and (tmp_path / "envout" / "manifest.tsv").exists()


@pytest.mark.parametrize("args,code,category", [
    (["frobnicate"], 2, "usage"),
    (["train", "--data", "x", "--set", "nonsense=1"], 2, "usage"),
    (["train", "--data", "x", "--set", "lr=abc"], 2, "usage"),
    (["eval", "--data", "/nonexistent/ds", "--self-test"], 3, "data"),
    (["infer", "--weights", "/nonexistent.blw", "--image", "x.png"], 4, "format"),
])
def test_error_exit_codes(args, code, category, tmp_path, capsys):
    got, _, err = run(args + ["--out", tmp_path] if args[0] != "frobnicate" else args, capsys)
    assert got == code
    line = err.strip()
    assert "\n" not in line and line.startswith(f"error category={category} exit={code} message=")


def test_corrupt_weights_exit_code(tmp_path, capsys):
    buf = bytearray((GOLDEN / "golden_weights.blw").read_bytes())
    buf[100] ^= 1
    (tmp_path / "bad.blw").write_bytes(bytes(buf))
    code, _, err = run(["describe", "--weights", tmp_path / "bad.blw"], capsys)
    assert code == 4 and "CRC mismatch" in err


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "biolite.cli", "describe", "--csv"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.splitlines()[-1].startswith("total,,,9993,")
    proc = subprocess.run([sys.executable, "-m", "biolite.cli", "train"], capture_output=True, text=True)
    assert proc.returncode == 2 and proc.stderr.startswith("error category=usage")
