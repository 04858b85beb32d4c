"""StO2 error metric, inter/intra-case protocols, ablation sweep and qualitative panels."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from PIL import Image
from PIL.PngImagePlugin import PngInfo

from oxygan.datapipe import CaseCrops, Dataset, denormalize
from oxygan.errors import ConfigError, ContractError, ShapeError
from oxygan.networks import Network, generator_forward
from oxygan.objective import TrainConfig, train_loop
from oxygan.tensor_core.ops import batch_invariant
from oxygan.tensor_core.tensor import Tensor

log = logging.getLogger(__name__)

# reference values from the in-vivo study; not reproducible without its data
REFERENCE_INTER_ERROR = 0.0766
REFERENCE_INTRA_ERROR = 0.0841
REFERENCE_FULL_TEST_ERROR = 0.1454
REFERENCE_TABLE = {
    "batch_size": {1: (0.1631, None), 16: (0.1113, None), 32: (0.0942, None), 56: (0.0875, None)},
    "l1_weight": {50: (0.0865, 0.1103), 100: (0.0875, 0.1151), 200: (0.0807, 0.1292), 400: (0.0766, 0.0841)},
}

SWEEP_CSV_HEADER = ("axis", "value", "inter_error", "intra_error")

# maps a batch of normalized inputs (n x 3 x S x S) to normalized predictions
Predictor = Callable[[np.ndarray], np.ndarray]


def mean_intensity_error(pred: np.ndarray, truth: np.ndarray) -> float:
    """Mean |pred - truth| on the [0, 1] StO2 scale.

    3-channel inputs are reduced to channel 0 first (the channels are copies).
    Accepts C x H x W or N x C x H x W.
    """
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ShapeError("mean_intensity_error needs equal dims", pred.shape, truth.shape)
    if pred.ndim in (3, 4) and pred.shape[-3] == 3:
        pred, truth = pred[..., 0, :, :], truth[..., 0, :, :]
    return float(np.mean(np.abs(pred.astype(np.float64) - truth.astype(np.float64))))


@dataclass
class EvalResult:
    case_id: str
    n_crops: int
    mean_error: float
    protocol: str


def generator_predictor(G: Network, noise_on: bool = False, rng: np.random.Generator | None = None) -> Predictor:
    """Eval-mode generator with batch-invariant kernels."""

    def predict(x: np.ndarray) -> np.ndarray:
        G.eval()
        with batch_invariant():
            return generator_forward(G, Tensor(np.asarray(x, dtype=np.float32)), noise_on, rng).data

    return predict


def oracle_predictor(lookup: Callable[[np.ndarray], np.ndarray]) -> Predictor:
    """A stand-in 'generator' that returns ``lookup(x)``; used to exercise the protocols."""
    return lookup


def _as_predictor(model) -> Predictor:
    return generator_predictor(model) if isinstance(model, Network) else model


def _crop_error(pred_norm: np.ndarray, truth_norm: np.ndarray) -> float:
    return mean_intensity_error(denormalize(pred_norm), denormalize(truth_norm))


def select_crop(case: CaseCrops, selector: str | int = "center", rng: np.random.Generator | None = None) -> int:
    if selector == "center":
        return case.center_index
    if selector == "random":
        if rng is None:
            raise ConfigError("random crop selection needs an rng")
        return int(rng.integers(len(case.offsets)))
    k = int(selector)
    if not 0 <= k < len(case.offsets):
        raise ConfigError(f"crop index {k} out of range for case {case.case_id!r}")
    return k


def eval_intercase(model, test_cases: Sequence[CaseCrops], selector: str | int = "center",
                   rng: np.random.Generator | None = None) -> tuple[list[EvalResult], float]:
    """One crop per case; aggregate is the mean of the per-case errors."""
    if not test_cases:
        raise ContractError("eval_intercase needs at least one test case")
    predict = _as_predictor(model)
    results = []
    for case in test_cases:
        k = select_crop(case, selector, rng)
        pred = predict(case.x[k:k + 1])
        results.append(EvalResult(case.case_id, 1, _crop_error(pred, case.y[k:k + 1]), "intercase"))
    return results, float(np.mean([r.mean_error for r in results]))


def _predict_batched(predict: Predictor, x: np.ndarray, infer_batch: int) -> np.ndarray:
    if infer_batch < 1:
        raise ConfigError(f"infer_batch must be >= 1, got {infer_batch}")
    return np.concatenate([predict(x[i:i + infer_batch]) for i in range(0, len(x), infer_batch)])


def eval_intracase(model, case: CaseCrops, infer_batch: int = 380) -> EvalResult:
    """Error averaged over every augmented crop of one case."""
    if len(case.offsets) == 0:
        raise ContractError(f"case {case.case_id!r} has no crops")
    pred = _predict_batched(_as_predictor(model), case.x, infer_batch)
    errs = [_crop_error(pred[i], case.y[i]) for i in range(len(pred))]
    return EvalResult(case.case_id, len(errs), float(np.mean(errs)), "intracase")


def eval_full(model, test_cases: Sequence[CaseCrops], infer_batch: int = 380) -> tuple[list[EvalResult], float]:
    """Per-case intracase errors averaged over the whole test set.

    Crops from all cases are pushed through in chunks of ``infer_batch``;
    the chunking does not change the result.
    """
    if not test_cases:
        raise ContractError("eval_full needs at least one test case")
    predict = _as_predictor(model)
    xs = np.concatenate([c.x for c in test_cases])
    pred = _predict_batched(predict, xs, infer_batch)
    results, k = [], 0
    for case in test_cases:
        n = len(case.offsets)
        errs = [_crop_error(pred[k + i], case.y[i]) for i in range(n)]
        results.append(EvalResult(case.case_id, n, float(np.mean(errs)), "full"))
        k += n
    return results, float(np.mean([r.mean_error for r in results]))


# ---------------------------------------------------------------------- sweep

@dataclass
class SweepRow:
    axis: str
    value: float
    inter_error: float | None
    intra_error: float | None
    error: str | None = None

    def csv_row(self) -> list[str]:
        def fmt(v):
            return "" if v is None else f"{v:.9g}"
        return [self.axis, f"{self.value:g}", fmt(self.inter_error), fmt(self.intra_error)]


@dataclass
class SweepReport:
    rows: list[SweepRow]
    fixed: dict[str, float]
    trends: dict[str, str]

    def write_csv(self, path, config_hash: str | None = None) -> None:
        text = self.to_csv()
        if config_hash:
            text += f"# config_hash={config_hash}\n"
        Path(path).write_text(text)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(SWEEP_CSV_HEADER)
        for row in self.rows:
            w.writerow(row.csv_row())
        return buf.getvalue()


def read_sweep_csv(path) -> list[SweepRow]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(line for line in fh if not line.startswith("#"))
        if tuple(reader.fieldnames or ()) != SWEEP_CSV_HEADER:
            raise ContractError(f"{path}: unexpected sweep CSV header {reader.fieldnames}")
        return [SweepRow(r["axis"], float(r["value"]),
                         float(r["inter_error"]) if r["inter_error"] else None,
                         float(r["intra_error"]) if r["intra_error"] else None) for r in reader]


def grid_points(grid: dict, base: TrainConfig) -> list[tuple[str, float, TrainConfig]]:
    """Expand a {batch_sizes, l1_weights} grid into (axis, value, config) points.

    A single varying list sweeps that axis with the other value held fixed.
    When both lists vary, the two axes are swept one at a time (batch sizes at
    the base lambda, then lambdas at the base batch size), mirroring a
    two-column ablation table. A 1 x 1 grid is one point on the lambda axis.
    """
    batches = [int(b) for b in grid.get("batch_sizes") or [base.batch_size]]
    lambdas = [float(v) for v in grid.get("l1_weights") or [base.lambda_l1]]
    if len(batches) > 1 and len(lambdas) > 1:
        points = [("batch_size", float(b), replace(base, batch_size=b)) for b in batches]
        points += [("l1_weight", lam, replace(base, lambda_l1=lam)) for lam in lambdas]
    elif len(batches) > 1:
        points = [("batch_size", float(b), replace(base, batch_size=b, lambda_l1=lambdas[0])) for b in batches]
    else:
        points = [("l1_weight", lam, replace(base, batch_size=batches[0], lambda_l1=lam)) for lam in lambdas]
    keys = [(a, v) for a, v, _ in points]
    if len(set(keys)) != len(keys):
        raise ConfigError("sweep grid contains duplicate points")
    return points


def trend_annotation(rows: Sequence[SweepRow], axis: str) -> str:
    vals = [(r.value, r.inter_error) for r in rows if r.axis == axis and r.inter_error is not None]
    if len(vals) < 2:
        return "n/a"
    errs = [e for _, e in sorted(vals)]
    if all(b <= a for a, b in zip(errs, errs[1:])):
        return "inter-case error decreases as the parameter grows"
    if all(b >= a for a, b in zip(errs, errs[1:])):
        return "inter-case error increases as the parameter grows"
    return "non-monotone"


def sweep(grid: dict, base: TrainConfig, dataset: Dataset, intra_cases: int | None = None,
          selector: str | int = "center", infer_batch: int = 380,
          on_point: Callable[[SweepRow], None] | None = None) -> SweepReport:
    """Train and evaluate one model per grid point; failures are recorded per row.

    Each point trains with seed ``base.seed + index``. Intracase error is
    averaged over the first ``intra_cases`` test cases (all when None).
    """
    points = grid_points(grid, base)
    if not points:
        raise ConfigError("sweep grid is empty")
    test = dataset.test_cases
    intra_set = test if intra_cases is None else test[:intra_cases]
    rows = []
    for idx, (axis, value, cfg) in enumerate(points):
        cfg = replace(cfg, seed=base.seed + idx)
        try:
            result = train_loop(cfg, dataset)
            _, inter = eval_intercase(result.G, test, selector)
            intra = float(np.mean([eval_intracase(result.G, c, infer_batch).mean_error for c in intra_set]))
            row = SweepRow(axis, value, inter, intra)
        except Exception as exc:  # noqa: BLE001 - a failed point must not end the sweep
            log.exception("sweep point %s=%s failed", axis, value)
            row = SweepRow(axis, value, None, None, f"{type(exc).__name__}: {exc}")
        rows.append(row)
        if on_point is not None:
            on_point(row)
    axes = {axis for axis, _, _ in points}
    fixed = {}
    if "batch_size" in axes:
        fixed["lambda_l1"] = points[0][2].lambda_l1 if axes == {"batch_size"} else base.lambda_l1
    if "l1_weight" in axes:
        fixed["batch_size"] = points[-1][2].batch_size
    trends = {axis: trend_annotation(rows, axis) for axis in ("batch_size", "l1_weight")
              if any(r.axis == axis for r in rows)}
    return SweepReport(rows, fixed, trends)


# --------------------------------------------------------------- qualitative

GUTTER = 4


def _to_u8(panel01: np.ndarray) -> np.ndarray:
    return np.round(np.clip(panel01, 0, 1) * 255).astype(np.uint8)


def qualitative_panel(x: np.ndarray, truth: np.ndarray, pred: np.ndarray, gutter: int = GUTTER) -> np.ndarray:
    """H x (4W + 3*gutter) x 3 uint8: input RGB | real StO2 | predicted StO2 | |difference|.

    Inputs are on the [0, 1] scale; ``truth``/``pred`` may be 1- or 3-channel.
    """
    x, truth, pred = (np.asarray(a, dtype=np.float64) for a in (x, truth, pred))
    if x.ndim != 3 or x.shape[0] != 3:
        raise ShapeError("qualitative input must be 3 x H x W", x.shape)
    t, p = truth[0], pred[0]
    if t.shape != x.shape[1:] or p.shape != x.shape[1:]:
        raise ShapeError("qualitative panels must be aligned", truth.shape, pred.shape, x.shape)
    h, w = t.shape
    canvas = np.zeros((h, 4 * w + 3 * gutter, 3), dtype=np.uint8)
    gray = lambda a: np.repeat(_to_u8(a)[:, :, None], 3, axis=2)  # noqa: E731
    panels = [_to_u8(x.transpose(1, 2, 0)), gray(t), gray(p), gray(np.abs(p - t))]
    for i, panel in enumerate(panels):
        left = i * (w + gutter)
        canvas[:, left:left + w] = panel
    return canvas


def emit_qualitative(x: np.ndarray, truth: np.ndarray, pred: np.ndarray, out_path, config_hash: str = "",
                     gutter: int = GUTTER) -> Path:
    """Write the four-panel comparison as an 8-bit PNG."""
    canvas = qualitative_panel(x, truth, pred, gutter)
    info = PngInfo()
    info.add_text("config_hash", config_hash)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(canvas).save(out_path, pnginfo=info)
    return out_path


def summary_dict(config_hash: str, aggregates: dict[str, float], runtime_s: float) -> dict:
    clean = {k: (None if v is None or not math.isfinite(v) else float(v)) for k, v in aggregates.items()}
    return {"config_hash": config_hash, "aggregate_errors": clean, "runtime_s": round(runtime_s, 3)}
