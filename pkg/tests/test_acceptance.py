"""Acceptance criteria 1-9, one test each; every test records a PASS/FAIL line.

Criteria 5-7 train real models and are tagged ``slow`` (about an hour in
total on one CPU core). Deselect them with ``-m "not slow"``.
"""

import json
import math
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from oxygan.datapipe import (
    FULL_GEOMETRY,
    AugmentConfig,
    CaseEntry,
    DatasetManifest,
    SynthConfig,
    build_dataset,
    crop_count,
    split_counts,
)
from oxygan.evalkit import SWEEP_CSV_HEADER, eval_full, eval_intercase, generator_predictor, read_sweep_csv, sweep
from oxygan.networks import (
    NetworkConfig,
    build_discriminator,
    build_generator,
    discriminator_forward,
    generator_forward,
    load_checkpoint,
    save_checkpoint,
)
from oxygan.objective import TrainConfig, d_loss, read_loss_csv, train_loop
from oxygan.tensor_core import Tensor, oxt1
from oxygan.tensor_core.gradcheck import run_suite

# ---- pinned tolerances
GRAD_TOL = 1e-3
GRAD_EPS = 1e-4
GRAD_BUDGET_S = 60.0
GEOMETRY_BUDGET_S = 1.0
SHAPES_BUDGET_S = 10.0
EQUILIBRIUM_TOL = 1e-6
OVERFIT_MAX_ERROR = 0.05
OVERFIT_BUDGET_S = 30 * 60
SWEEP_LAMBDAS = (50.0, 100.0, 200.0, 400.0)

# ---- the overfit run: 8 training pairs at 64 x 64 (one held-out pair keeps the split valid)
OVERFIT_CONFIG = {
    "network": {"image_size": 64},
    "train": {"max_iterations": 2000, "batch_size": 4, "lambda_l1": 100.0, "seed": 0, "log_every": 10},
    "data": {"n_cases": 9, "train_ratio": 8 / 9, "augment": False, "synth": {"height": 64, "width": 64}},
}


# ------------------------------------------------------------- criterion 1

def test_criterion_1_gradient_suite(acceptance_log):
    start = time.perf_counter()
    results = run_suite(seed=0, eps=GRAD_EPS, tolerance=GRAD_TOL)
    elapsed = time.perf_counter() - start
    worst = max(results, key=lambda r: r.max_rel_error)
    ok = all(r.passed for r in results) and elapsed < GRAD_BUDGET_S
    acceptance_log(1, ok, f"{len(results)} op cases, worst {worst.name} rel err {worst.max_rel_error:.2e} "
                          f"< {GRAD_TOL:g}, {elapsed:.2f}s < {GRAD_BUDGET_S:g}s")
    assert ok


# ------------------------------------------------------------- criterion 2

def test_criterion_2_augmentation_geometry(acceptance_log):
    start = time.perf_counter()
    n_crops = crop_count(192, 256, FULL_GEOMETRY.window, FULL_GEOMETRY.stride)
    n_train, n_test = split_counts(222, 0.752)
    entries = [CaseEntry(f"c{i:03d}", "porcine_bowel", f"{i}.oxt", f"{i}s.oxt", s)
               for i, s in enumerate(["train"] * n_train + ["test"] * n_test)]
    manifest = DatasetManifest(entries)
    split_ok = (len(manifest.split("train")), len(manifest.split("test"))) == (167, 55)
    elapsed = time.perf_counter() - start
    ok = n_crops == 45 and (n_train, n_test) == (167, 55) and split_ok and elapsed < GEOMETRY_BUDGET_S
    acceptance_log(2, ok, f"{n_crops} crops, split {n_train}/{n_test}, {elapsed * 1e3:.1f}ms")
    assert ok


# ------------------------------------------------------------- criterion 3

def test_criterion_3_shape_contracts(acceptance_log):
    start = time.perf_counter()
    cfg256 = NetworkConfig(image_size=256)
    G = build_generator(cfg256, seed=0)
    x = Tensor(np.random.default_rng(0).uniform(-1, 1, (1, 3, 256, 256)).astype(np.float32))
    y = generator_forward(G, x)
    D = build_discriminator(cfg256, seed=1)
    logits256 = discriminator_forward(D, x, y)
    cfg64 = NetworkConfig(image_size=64)
    x64 = Tensor(np.zeros((1, 3, 64, 64), np.float32))
    logits64 = discriminator_forward(build_discriminator(cfg64), x64, x64)
    elapsed = time.perf_counter() - start
    in_range = float(np.abs(y.data).max()) <= 1.0
    ok = (y.shape == (1, 3, 256, 256) and in_range and logits256.shape[2:] == (30, 30)
          and logits64.shape[2:] == (6, 6) and elapsed < SHAPES_BUDGET_S)
    acceptance_log(3, ok, f"G {y.shape[1:]} max|y|={np.abs(y.data).max():.3f}, D256 {logits256.shape[2:]}, "
                          f"D64 {logits64.shape[2:]}, {elapsed:.2f}s")
    assert ok


# ------------------------------------------------------------- criterion 4

def test_criterion_4_equilibrium_value(acceptance_log):
    devs = {}
    for n in (1, 4, 56):
        z = Tensor(np.zeros((n, 1, 30, 30), np.float32))
        devs[n] = abs(d_loss(z, z).item() - math.log(2))
    ok = all(d <= EQUILIBRIUM_TOL for d in devs.values())
    acceptance_log(4, ok, "|d_loss - log 2| " + ", ".join(f"N={n}: {d:.1e}" for n, d in devs.items()))
    assert ok


# ------------------------------------------------------------- criterion 8

def test_criterion_8_format_roundtrips(acceptance_log, tmp_path):
    rng = np.random.default_rng(8)
    arr = rng.standard_normal((2, 3, 5, 7)).astype(np.float32)
    arr.flat[:3] = [np.inf, -0.0, 1e-45]
    oxt1.save(tmp_path / "a.oxt", arr)
    oxt_ok = oxt1.load(tmp_path / "a.oxt").tobytes() == arr.tobytes()

    cfg = NetworkConfig(image_size=32, base_filters=8)
    G, D = build_generator(cfg, seed=3), build_discriminator(cfg, seed=4)
    x = Tensor(rng.uniform(-1, 1, (2, 3, 32, 32)).astype(np.float32))
    generator_forward(G, x)  # non-trivial running statistics
    G.eval()
    D.eval()
    ref_g = generator_forward(G, x).data
    ref_d = discriminator_forward(D, x, Tensor(ref_g)).data
    save_checkpoint(tmp_path / "ck", {"G": G, "D": D}, "hash")
    nets, _ = load_checkpoint(tmp_path / "ck")
    G2, D2 = nets["G"].eval(), nets["D"].eval()
    ck_ok = (np.array_equal(generator_forward(G2, x).data, ref_g)
             and np.array_equal(discriminator_forward(D2, x, Tensor(ref_g)).data, ref_d))

    m = DatasetManifest([CaseEntry("a", "lamb_uterus", "a.oxt", "as.oxt", "train"),
                         CaseEntry("b", "rabbit_uterus", "b.oxt", "bs.oxt", "test")], "in-vivo")
    m.save(tmp_path / "m.json")
    back = DatasetManifest.load(tmp_path / "m.json", check_files=False)
    man_ok = back == m and back.to_dict() == json.loads((tmp_path / "m.json").read_text())
    ok = oxt_ok and ck_ok and man_ok
    acceptance_log(8, ok, f"OXT1 bit-exact={oxt_ok}, checkpoint forward bitwise={ck_ok}, manifest={man_ok}")
    assert ok


# ------------------------------------------------------------- criterion 9

def test_criterion_9_eval_batch_invariance(acceptance_log):
    cfg = NetworkConfig(image_size=64)
    aug = AugmentConfig(window=64, stride=16, net_size=64)
    ds = build_dataset(SynthConfig(height=96, width=128, seed=9), True, aug, n_cases=4, train_ratio=0.5)
    G = build_generator(cfg, seed=0)
    generator_forward(G, Tensor(ds.train_arrays()[0][:8]))  # realistic running statistics
    model = generator_predictor(G, noise_on=False)
    rows_1, agg_1 = eval_full(model, ds.test_cases, infer_batch=1)
    rows_380, agg_380 = eval_full(model, ds.test_cases, infer_batch=380)
    n = sum(r.n_crops for r in rows_1)
    ok = agg_1 == agg_380 and [r.mean_error for r in rows_1] == [r.mean_error for r in rows_380]
    acceptance_log(9, ok, f"{n} crops, batch 1 -> {agg_1!r}, batch 380 -> {agg_380!r}")
    assert ok


# -------------------------------------------------------- criteria 5 and 7

def _cli_train(out: Path) -> float:
    out.mkdir(parents=True, exist_ok=True)
    cfg_path = out.parent / f"{out.name}.json"
    cfg_path.write_text(json.dumps(OVERFIT_CONFIG))
    start = time.perf_counter()
    proc = subprocess.run([sys.executable, "-m", "oxygan.cli", "train", "--config", str(cfg_path),
                           "--out", str(out), "--deterministic"], capture_output=True, text=True)
    elapsed = time.perf_counter() - start
    assert proc.returncode == 0, proc.stderr
    return elapsed


@pytest.fixture(scope="session")
def overfit_run_a(tmp_path_factory):
    out = tmp_path_factory.mktemp("overfit") / "a"
    return out, _cli_train(out)


@pytest.fixture(scope="session")
def overfit_run_b(tmp_path_factory):
    out = tmp_path_factory.mktemp("overfit") / "b"
    return out, _cli_train(out)


@pytest.mark.slow
def test_criterion_5_overfit_run(acceptance_log, overfit_run_a):
    out, elapsed = overfit_run_a
    summary = json.loads((out / "train_summary.json").read_text())
    err = summary["aggregate_errors"]["train_mean_error"]
    hist = {r.iteration: r for r in read_loss_csv(out / "loss_history.csv")}
    l1_100, l1_final = float(hist[100].g_l1_loss), float(hist[max(hist)].g_l1_loss)
    ok = err < OVERFIT_MAX_ERROR and l1_final < l1_100 and elapsed < OVERFIT_BUDGET_S
    acceptance_log(5, ok, f"train error {err:.4f} < {OVERFIT_MAX_ERROR}, g_l1 {l1_100:.4f} @100 -> "
                          f"{l1_final:.4f} @{max(hist)}, {elapsed / 60:.1f} min")
    assert ok


@pytest.mark.slow
def test_criterion_7_determinism(acceptance_log, overfit_run_a, overfit_run_b):
    (a, _), (b, _) = overfit_run_a, overfit_run_b
    same = {rel: (a / rel).read_bytes() == (b / rel).read_bytes()
            for rel in ("loss_history.csv", "checkpoints/final.oxt", "checkpoints/final.json")}
    ok = all(same.values())
    acceptance_log(7, ok, ", ".join(f"{k} identical={v}" for k, v in same.items()))
    assert ok


# ------------------------------------------------------------- criterion 6

SWEEP_ITERATIONS = 400
SWEEP_NET = NetworkConfig(image_size=64, base_filters=32)


@pytest.mark.slow
def test_criterion_6_sweep_harness(acceptance_log, tmp_path):
    aug = AugmentConfig(window=64, stride=16, net_size=64)
    ds = build_dataset(SynthConfig(), True, aug, n_cases=12)
    base = TrainConfig(network=SWEEP_NET, batch_size=4, max_iterations=SWEEP_ITERATIONS, seed=0, log_every=50)
    report = sweep({"batch_sizes": [4], "l1_weights": list(SWEEP_LAMBDAS)}, base, ds)
    report.write_csv(tmp_path / "sweep.csv", "acceptance")
    rows = read_sweep_csv(tmp_path / "sweep.csv")
    header = (tmp_path / "sweep.csv").read_text().splitlines()[0]
    finite = all(r.inter_error is not None and r.intra_error is not None
                 and 0 <= r.inter_error <= 1 and 0 <= r.intra_error <= 1 for r in rows)

    # lambda = 0 control, same seed as the lambda = 400 point (index 3)
    idx_400 = SWEEP_LAMBDAS.index(400.0)
    control = train_loop(TrainConfig(network=SWEEP_NET, batch_size=4, max_iterations=SWEEP_ITERATIONS,
                                     seed=base.seed + idx_400, lambda_l1=0.0, log_every=50), ds)
    _, inter_0 = eval_intercase(control.G, ds.test_cases)
    inter_400 = rows[idx_400].inter_error
    ok = (header == ",".join(SWEEP_CSV_HEADER) and len(rows) == 4 and finite
          and [r.value for r in rows] == list(SWEEP_LAMBDAS) and inter_400 <= inter_0)
    acceptance_log(6, ok, "inter " + ", ".join(f"l={r.value:g}: {r.inter_error:.4f}" for r in rows)
                   + f"; control l=0: {inter_0:.4f}")
    assert ok
