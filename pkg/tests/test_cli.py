import json
import subprocess
import sys

import numpy as np
import pytest
from PIL import Image

from oxygan.cli import main
from oxygan.tensor_core import oxt1

TINY = {
    "network": {"image_size": 32, "base_filters": 4},
    "train": {"max_iterations": 2, "batch_size": 2, "log_every": 1},
    "data": {"n_cases": 3, "synth": {"height": 40, "width": 40},
             "geometry": {"window": 32, "stride": 8, "net_size": 32}},
    "eval": {"infer_batch": 7},
}


@pytest.fixture
def tiny_config(tmp_path):
    p = tmp_path / "tiny.json"
    p.write_text(json.dumps(TINY))
    return str(p)


def run(*args):
    return main([str(a) for a in args])


def test_full_pipeline(tmp_path, tiny_config, capsys):
    out = tmp_path / "run"
    common = ["--config", tiny_config, "--out", out]
    assert run("synth", *common) == 0
    assert (out / "data" / "manifest.json").is_file()
    assert run("augment", *common) == 0
    index = json.loads((out / "augmented" / "index.json").read_text())
    assert len(index["cases"]) == 3
    assert oxt1.load(out / "augmented" / "syn0000_x.oxt").shape == (4, 3, 32, 32)

    assert run("train", *common) == 0
    csv_lines = (out / "loss_history.csv").read_text().splitlines()
    assert csv_lines[0] == "iteration,d_loss,g_gan,g_l1,g_total" and len(csv_lines) == 4
    chash = json.loads((out / "train_summary.json").read_text())["config_hash"]
    assert csv_lines[-1] == f"# config_hash={chash}"
    assert json.loads((out / "checkpoints" / "final.json").read_text())["config_hash"] == chash

    assert run("eval", *common) == 0
    summary = json.loads((out / "eval" / "summary.json").read_text())
    assert set(summary["aggregate_errors"]) == {"intercase", "intracase", "full"}
    assert all(0 <= v <= 1 for v in summary["aggregate_errors"].values())
    pngs = list((out / "eval").glob("*.png"))
    with Image.open(pngs[0]) as im:
        assert im.text["config_hash"] == summary["config_hash"]
    assert (out / "eval" / "cases.csv").read_text().splitlines()[-1].startswith("# config_hash=")

    rgb = np.full((3, 20, 24), 0.5, dtype=np.float32)
    oxt1.save(out / "in.oxt", rgb)
    assert run("infer", *common, "--input", "in.oxt", "--output", "pred/out.oxt", "--png", "pred.png") == 0
    pred = oxt1.load(out / "pred" / "out.oxt")
    assert pred.shape == (1, 20, 24) and pred.min() >= 0 and pred.max() <= 1
    with Image.open(out / "pred.png") as im:
        assert im.size == (24, 20) and "config_hash" in im.text


def test_oracle_eval_scores_zero(tmp_path, tiny_config):
    out = tmp_path / "o"
    assert run("synth", "--config", tiny_config, "--out", out) == 0
    assert run("eval", "--config", tiny_config, "--out", out, "--oracle") == 0
    summary = json.loads((out / "eval" / "summary.json").read_text())
    assert summary["aggregate_errors"] == {"intercase": 0.0, "intracase": 0.0, "full": 0.0}
    assert summary["oracle"] is True


def test_zero_iterations_writes_initial_checkpoint(tmp_path, tiny_config):
    out = tmp_path / "z"
    assert run("train", "--config", tiny_config, "--out", out, "--max-iterations", "0") == 0
    assert (out / "checkpoints" / "final.oxt").stat().st_size > 0
    assert (out / "loss_history.csv").read_text().splitlines()[0].startswith("iteration")


def test_synth_refuses_non_empty_dir_without_force(tmp_path, tiny_config, capsys):
    out = tmp_path / "s"
    assert run("synth", "--config", tiny_config, "--out", out) == 0
    assert run("synth", "--config", tiny_config, "--out", out) == 1
    assert "error[contract]" in capsys.readouterr().err
    assert run("synth", "--config", tiny_config, "--out", out, "--force") == 0


def test_synth_split_counts(tmp_path, capsys):
    out = tmp_path / "split"
    assert run("synth", "--out", out, "--n-cases", 2, "--set", "data.synth.height=8",
               "--set", "data.synth.width=8") == 0
    m = json.loads((out / "data" / "manifest.json").read_text())
    assert sorted(c["split"] for c in m["cases"]) == ["test", "train"]


def test_synth_same_seed_is_byte_identical(tmp_path, tiny_config):
    for name in ("a", "b"):
        assert run("synth", "--config", tiny_config, "--out", tmp_path / name) == 0
    for f in (tmp_path / "a").rglob("*"):
        if f.is_file():
            assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()


def test_eval_refuses_mismatched_checkpoint(tmp_path, tiny_config, capsys):
    out = tmp_path / "m"
    assert run("train", "--config", tiny_config, "--out", out, "--max-iterations", "0") == 0
    assert run("eval", "--config", tiny_config, "--out", out, "--base-filters", "8") == 2
    assert "--allow-mismatch" in capsys.readouterr().err
    assert run("eval", "--config", tiny_config, "--out", out, "--base-filters", "8", "--allow-mismatch") == 0


def test_flags_override_config_file(tmp_path, tiny_config):
    out = tmp_path / "f"
    assert run("train", "--config", tiny_config, "--out", out, "--max-iterations", "1", "--lambda-l1", "7") == 0
    saved = json.loads((out / "run_config.json").read_text())
    assert saved["train"]["max_iterations"] == 1 and saved["train"]["lambda_l1"] == 7.0
    assert saved["network"]["base_filters"] == 4


def test_image_size_flag_rederives_depth(tmp_path, tiny_config):
    out = tmp_path / "d"
    assert run("train", "--config", tiny_config, "--out", out, "--max-iterations", "0", "--image-size", "64",
               "--set", "data.geometry.window=40") == 0
    assert json.loads((out / "run_config.json").read_text())["network"]["g_levels"] == 6


@pytest.mark.parametrize("argv,needle", [
    (["train", "--set", "train.batch_size=0"], "batch_size"),
    (["train", "--set", "train.nope=1"], "nope"),
    (["train", "--set", "oops"], "SECTION.FIELD"),
])
def test_config_errors_exit_2_with_category(tmp_path, capsys, argv, needle):
    assert run(*argv, "--out", tmp_path) == 2
    err = capsys.readouterr().err
    assert err.startswith("error[config]:") and needle in err


def test_bad_config_file_reports_path(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"train": {"batch_size": -3}}))
    assert run("train", "--config", bad, "--out", tmp_path / "x") == 2
    err = capsys.readouterr().err
    assert "bad.json" in err and "batch_size" in err


def test_thread_env_validation(tmp_path, tiny_config, monkeypatch, capsys):
    monkeypatch.setenv("OXYGAN_THREADS", "lots")
    assert run("gradcheck", "--out", tmp_path) == 2
    assert "OXYGAN_THREADS" in capsys.readouterr().err
    monkeypatch.setenv("OXYGAN_THREADS", "1")
    assert run("synth", "--config", tiny_config, "--out", tmp_path / "t") == 0


def test_gradcheck_subcommand(tmp_path, capsys):
    assert run("gradcheck", "--out", tmp_path) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines and all(l.startswith("PASS") for l in lines)
    report = json.loads((tmp_path / "gradcheck.json").read_text())
    assert max(report["results"].values()) < 1e-3
    # an impossible bound makes it fail
    assert run("gradcheck", "--out", tmp_path, "--tolerance", "0") == 1


def test_sweep_subcommand(tmp_path, tiny_config):
    out = tmp_path / "sw"
    assert run("sweep", "--config", tiny_config, "--out", out, "--l1-weights", "10,20", "--max-iterations", "1") == 0
    lines = (out / "sweep" / "sweep.csv").read_text().splitlines()
    assert lines[0] == "axis,value,inter_error,intra_error" and len(lines) == 4
    assert "trends" in json.loads((out / "sweep" / "summary.json").read_text())


def test_deterministic_runs_are_byte_identical(tmp_path, tiny_config):
    outs = [tmp_path / "r1", tmp_path / "r2"]
    for out in outs:
        assert run("train", "--config", tiny_config, "--out", out, "--deterministic") == 0
    for rel in ("loss_history.csv", "checkpoints/final.oxt", "checkpoints/final.json", "run_config.json"):
        assert (outs[0] / rel).read_bytes() == (outs[1] / rel).read_bytes()


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "oxygan.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for cmd in ("synth", "augment", "train", "eval", "sweep", "infer", "gradcheck"):
        assert cmd in proc.stdout
    proc = subprocess.run([sys.executable, "-m", "oxygan.cli", "train", "--out", str(tmp_path),
                           "--set", "train.lr=-1"], capture_output=True, text=True)
    assert proc.returncode == 2 and proc.stderr.startswith("error[config]")
