"""Command-line entry point: ``oxygan <synth|augment|train|eval|sweep|infer|gradcheck>``.

Every subcommand reads an optional JSON run config (``--config``), applies
flag overrides on top of it (flags win), and writes all outputs below
``--out``.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from oxygan import datapipe, evalkit
from oxygan.config import RunConfig
from oxygan.errors import ConfigError, ContractError, OxyganError
from oxygan.networks import load_checkpoint, read_checkpoint_manifest, save_checkpoint
from oxygan.objective import seed_streams, train_loop, write_loss_csv
from oxygan.tensor_core import io as oxt1
from oxygan.tensor_core.gradcheck import run_suite

log = logging.getLogger("oxygan")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


# ------------------------------------------------------------------ plumbing

def _csv_list(cast):
    def parse(text: str):
        try:
            return [cast(v) for v in text.split(",") if v.strip()]
        except ValueError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from exc
    return parse


# flag dest -> dotted config path
OVERRIDES = {
    "image_size": "network.image_size",
    "base_filters": "network.base_filters",
    "norm_kind": "network.norm_kind",
    "max_iterations": "train.max_iterations",
    "batch_size": "train.batch_size",
    "lambda_l1": "train.lambda_l1",
    "seed": "train.seed",
    "log_every": "train.log_every",
    "checkpoint_every": "train.checkpoint_every",
    "n_cases": "data.n_cases",
    "train_ratio": "data.train_ratio",
    "manifest": "data.manifest",
    "infer_batch": "eval.infer_batch",
    "intra_cases": "eval.intra_cases",
    "batch_sizes": "sweep.batch_sizes",
    "l1_weights": "sweep.l1_weights",
}


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run config; flags override its values")
    p.add_argument("--out", required=True, help="output directory; all paths are relative to it")
    p.add_argument("--deterministic", action="store_true", help="single-threaded, reproducible kernels")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.FIELD=JSON",
                   help="override any config field, e.g. --set train.lr=1e-4")
    p.add_argument("--seed", type=int)
    p.add_argument("--image-size", type=int)
    p.add_argument("--base-filters", type=int)
    p.add_argument("--norm-kind", choices=("batch", "instance"))
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="oxygan", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic RGB/StO2 dataset and manifest")
    _add_common(p)
    p.add_argument("--n-cases", type=int)
    p.add_argument("--train-ratio", type=float)
    p.add_argument("--force", action="store_true", help="allow writing into a non-empty data directory")

    p = sub.add_parser("augment", help="write sliding-window crops to disk for inspection")
    _add_common(p)
    p.add_argument("--manifest")
    p.add_argument("--n-cases", type=int)

    p = sub.add_parser("train", help="train G and D")
    _add_common(p)
    p.add_argument("--manifest")
    p.add_argument("--n-cases", type=int)
    p.add_argument("--max-iterations", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lambda-l1", type=float)
    p.add_argument("--log-every", type=int)
    p.add_argument("--checkpoint-every", type=int)

    p = sub.add_parser("eval", help="inter-case, intra-case and full-test evaluation")
    _add_common(p)
    p.add_argument("--manifest")
    p.add_argument("--n-cases", type=int)
    p.add_argument("--checkpoint", default="checkpoints/final", help="checkpoint stem relative to --out")
    p.add_argument("--infer-batch", type=int)
    p.add_argument("--intra-cases", type=int)
    p.add_argument("--oracle", action="store_true", help="replace G with a perfect predictor (protocol check)")
    p.add_argument("--allow-mismatch", action="store_true",
                   help="accept a checkpoint whose network config differs from the run config")

    p = sub.add_parser("sweep", help="batch-size / L1-weight ablation")
    _add_common(p)
    p.add_argument("--manifest")
    p.add_argument("--n-cases", type=int)
    p.add_argument("--max-iterations", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lambda-l1", type=float)
    p.add_argument("--batch-sizes", type=_csv_list(int))
    p.add_argument("--l1-weights", type=_csv_list(float))
    p.add_argument("--intra-cases", type=int)

    p = sub.add_parser("infer", help="estimate StO2 for one RGB image")
    _add_common(p)
    p.add_argument("--checkpoint", default="checkpoints/final")
    p.add_argument("--input", required=True, help="OXT1 RGB image, 3 x H x W in [0, 1]")
    p.add_argument("--output", required=True, help="OXT1 StO2 map to write, 1 x H x W in [0, 1]")
    p.add_argument("--png", help="also write an 8-bit grayscale PNG of the estimate")
    p.add_argument("--noise", action="store_true", help="keep dropout noise active at test time")
    p.add_argument("--allow-mismatch", action="store_true")

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    _add_common(p)
    p.add_argument("--eps", type=float, default=1e-4)
    p.add_argument("--tolerance", type=float, default=1e-3)
    return parser


def _assign(cfg_dict: dict, dotted: str, value) -> None:
    *parents, leaf = dotted.split(".")
    node = cfg_dict
    for key in parents:
        if not isinstance(node.get(key), dict):
            raise ConfigError(f"--set {dotted}: {key!r} is not a config section")
        node = node[key]
    if leaf not in node:
        raise ConfigError(f"--set {dotted}: unknown field {leaf!r}")
    node[leaf] = value


def resolve_config(args) -> RunConfig:
    base = RunConfig.load(args.config) if args.config else RunConfig()
    d = base.to_dict()
    for item in args.set:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects SECTION.FIELD=VALUE, got {item!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        _assign(d, key.strip(), value)
    for dest, dotted in OVERRIDES.items():
        value = getattr(args, dest, None)
        if value is not None:
            _assign(d, dotted, value)
    if args.deterministic:
        d["deterministic"] = True
    d["out_dir"] = args.out
    net = d["network"]
    # a derived depth follows the image size unless it was set explicitly
    if net["image_size"] != base.network.image_size and net["g_levels"] == base.network.g_levels \
            and base.network.g_levels == base.network.image_size.bit_length() - 1:
        net["g_levels"] = None
    return RunConfig.from_dict(d, source=args.config or "<flags>")


@contextlib.contextmanager
def thread_limits(deterministic: bool):
    limit = 1 if deterministic else os.environ.get("OXYGAN_THREADS")
    if limit is None:
        yield
        return
    try:
        limit = int(limit)
    except ValueError:
        raise ConfigError(f"OXYGAN_THREADS must be an integer, got {limit!r}") from None
    if limit < 1:
        raise ConfigError(f"OXYGAN_THREADS must be >= 1, got {limit}")
    from threadpoolctl import threadpool_limits
    with threadpool_limits(limits=limit):
        yield


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def load_dataset(cfg: RunConfig, out: Path) -> datapipe.Dataset:
    """Manifest from the config (relative to --out), else out/data/manifest.json, else in-memory synthesis."""
    aug = cfg.data.geometry if cfg.data.augment else None
    size = cfg.network.image_size
    manifest_path = Path(cfg.data.manifest) if cfg.data.manifest else out / "data" / "manifest.json"
    if cfg.data.manifest and not manifest_path.is_absolute():
        manifest_path = out / manifest_path
    if manifest_path.is_file():
        manifest = datapipe.DatasetManifest.load(manifest_path)
        return datapipe.build_dataset(manifest, cfg.data.augment, aug, net_size=size)
    if cfg.data.manifest:
        raise ConfigError(f"manifest not found: {manifest_path}")
    return datapipe.build_dataset(cfg.data.synth, cfg.data.augment, aug, n_cases=cfg.data.n_cases,
                                  train_ratio=cfg.data.train_ratio, net_size=size)


# ------------------------------------------------------------------ commands

def cmd_synth(cfg: RunConfig, args, out: Path) -> int:
    data_dir = out / "data"
    if data_dir.exists() and any(data_dir.iterdir()) and not args.force:
        raise ContractError(f"{data_dir} is not empty; pass --force to overwrite")
    manifest = datapipe.write_synthetic_dataset(data_dir, cfg.data.n_cases, cfg.data.synth, cfg.data.train_ratio)
    n_train = len(manifest.split("train"))
    print(f"wrote {len(manifest.cases)} cases ({n_train} train / {len(manifest.cases) - n_train} test) "
          f"to {data_dir}")
    return EXIT_OK


def cmd_augment(cfg: RunConfig, args, out: Path) -> int:
    ds = load_dataset(cfg, out)
    aug_dir = out / "augmented"
    aug_dir.mkdir(parents=True, exist_ok=True)
    index = {"config_hash": cfg.config_hash(), "net_size": cfg.network.image_size,
             "geometry": cfg.data.geometry.to_dict() if cfg.data.augment else None, "cases": []}
    for case in ds.cases:
        oxt1.save(aug_dir / f"{case.case_id}_x.oxt", case.x)
        oxt1.save(aug_dir / f"{case.case_id}_y.oxt", case.y)
        index["cases"].append({"case_id": case.case_id, "split": case.split, "tissue": case.tissue,
                               "offsets": [list(o) for o in case.offsets], "center_index": case.center_index})
    _write_json(aug_dir / "index.json", index)
    train_idx, test_idx = ds.split_indices()
    print(f"wrote {len(train_idx)} train and {len(test_idx)} test crops to {aug_dir}")
    return EXIT_OK


def cmd_train(cfg: RunConfig, args, out: Path) -> int:
    start = time.perf_counter()
    ds = load_dataset(cfg, out)
    chash = cfg.config_hash()
    ckpt_dir = out / "checkpoints"

    def sink(it, G, D):
        stem = ckpt_dir / ("final" if it == cfg.train.max_iterations else f"iter_{it:06d}")
        save_checkpoint(stem, {"G": G, "D": D}, chash, extra={"iteration": it})

    result = train_loop(cfg.train, ds, checkpoint_sink=sink)
    write_loss_csv(out / "loss_history.csv", result.history, chash)
    _, train_err = evalkit.eval_full(result.G, ds.train_cases, cfg.eval.infer_batch)
    # outputs must not depend on where they were written
    replace(cfg, out_dir=".").save(out / "run_config.json")
    _write_json(out / "train_summary.json",
                evalkit.summary_dict(chash, {"train_mean_error": train_err}, time.perf_counter() - start))
    print(f"trained {cfg.train.max_iterations} iterations; train-set mean error {train_err:.4f}")
    return EXIT_OK


def _load_generator(cfg: RunConfig, args, out: Path):
    stem = Path(args.checkpoint)
    stem = stem if stem.is_absolute() else out / stem
    manifest = read_checkpoint_manifest(stem)
    stored = manifest["networks"]["G"]["config"]
    if stored != cfg.network.to_dict() and not args.allow_mismatch:
        raise ConfigError(f"checkpoint {stem} was trained with a different network config; "
                          "pass --allow-mismatch to use it anyway")
    nets, _ = load_checkpoint(stem)
    return nets["G"]


def _oracle(cases) -> evalkit.Predictor:
    table = {c.x[i].tobytes(): c.y[i] for c in cases for i in range(len(c.offsets))}
    return evalkit.oracle_predictor(lambda xb: np.stack([table[x.tobytes()] for x in xb]))


def cmd_eval(cfg: RunConfig, args, out: Path) -> int:
    start = time.perf_counter()
    ds = load_dataset(cfg, out)
    test = ds.test_cases
    chash = cfg.config_hash()
    if args.oracle:
        model = _oracle(test)
    else:
        G = _load_generator(cfg, args, out)
        rng = np.random.default_rng(seed_streams(cfg.train.seed)["noise"]) if cfg.eval.noise_on else None
        model = evalkit.generator_predictor(G, cfg.eval.noise_on, rng)
    selector = int(cfg.eval.selector) if cfg.eval.selector.isdigit() else cfg.eval.selector
    sel_rng = np.random.default_rng(cfg.train.seed)
    inter_rows, inter = evalkit.eval_intercase(model, test, selector, sel_rng)
    intra_set = test if cfg.eval.intra_cases is None else test[:cfg.eval.intra_cases]
    intra_rows = [evalkit.eval_intracase(model, c, cfg.eval.infer_batch) for c in intra_set]
    intra = float(np.mean([r.mean_error for r in intra_rows]))
    full_rows, full = evalkit.eval_full(model, test, cfg.eval.infer_batch)

    eval_dir = out / "eval"
    eval_dir.mkdir(parents=True, exist_ok=True)
    with open(eval_dir / "cases.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("case_id", "protocol", "n_crops", "mean_error"))
        for r in inter_rows + intra_rows + full_rows:
            w.writerow((r.case_id, r.protocol, r.n_crops, f"{r.mean_error:.9g}"))
        fh.write(f"# config_hash={chash}\n")
    first = test[0]
    k = first.center_index
    pred = model(first.x[k:k + 1])[0]
    evalkit.emit_qualitative(datapipe.denormalize(first.x[k]), datapipe.denormalize(first.y[k]),
                             datapipe.denormalize(pred), eval_dir / f"{first.case_id}_qualitative.png", chash)
    aggregates = {"intercase": inter, "intracase": intra, "full": full}
    summary = evalkit.summary_dict(chash, aggregates, time.perf_counter() - start)
    summary["reference"] = {"best_inter": evalkit.REFERENCE_INTER_ERROR,
                            "best_intra": evalkit.REFERENCE_INTRA_ERROR,
                            "full_test": evalkit.REFERENCE_FULL_TEST_ERROR}
    summary["oracle"] = bool(args.oracle)
    _write_json(eval_dir / "summary.json", summary)
    print(f"intercase {inter:.4f}  intracase {intra:.4f}  full {full:.4f}")
    return EXIT_OK


def cmd_sweep(cfg: RunConfig, args, out: Path) -> int:
    start = time.perf_counter()
    ds = load_dataset(cfg, out)
    chash = cfg.config_hash()
    grid = {"batch_sizes": cfg.sweep.batch_sizes, "l1_weights": cfg.sweep.l1_weights}

    def progress(row):
        print(f"{row.axis}={row.value:g}: inter {row.inter_error} intra {row.intra_error}"
              + (f" FAILED {row.error}" if row.error else ""))

    report = evalkit.sweep(grid, cfg.train, ds, cfg.eval.intra_cases, infer_batch=cfg.eval.infer_batch,
                           on_point=progress)
    sweep_dir = out / "sweep"
    sweep_dir.mkdir(parents=True, exist_ok=True)
    report.write_csv(sweep_dir / "sweep.csv", chash)
    aggregates = {f"{r.axis}={r.value:g}/inter": r.inter_error for r in report.rows}
    summary = evalkit.summary_dict(chash, aggregates, time.perf_counter() - start)
    summary.update(fixed=report.fixed, trends=report.trends,
                   failures={f"{r.axis}={r.value:g}": r.error for r in report.rows if r.error})
    _write_json(sweep_dir / "summary.json", summary)
    for axis, note in report.trends.items():
        print(f"trend[{axis}]: {note}")
    return EXIT_FAILURE if any(r.error for r in report.rows) else EXIT_OK


def cmd_infer(cfg: RunConfig, args, out: Path) -> int:
    G = _load_generator(cfg, args, out)
    src = Path(args.input)
    src = src if src.is_absolute() else out / src
    rgb = oxt1.load(src)
    if rgb.ndim != 3 or rgb.shape[0] != 3:
        raise ConfigError(f"{src}: expected a 3 x H x W RGB tensor, got dims {list(rgb.shape)}")
    _, h, w = rgb.shape
    size = cfg.network.image_size
    x = datapipe.normalize(datapipe.resize_bilinear(rgb, size, size))[None]
    rng = np.random.default_rng(seed_streams(cfg.train.seed)["noise"]) if args.noise else None
    pred = evalkit.generator_predictor(G, args.noise, rng)(x)[0]
    sto2 = np.clip(datapipe.resize_bilinear(datapipe.denormalize(pred[:1]), h, w), 0, 1).astype(np.float32)
    dst = Path(args.output)
    dst = dst if dst.is_absolute() else out / dst
    dst.parent.mkdir(parents=True, exist_ok=True)
    oxt1.save(dst, sto2)
    if args.png:
        png = Path(args.png)
        png = png if png.is_absolute() else out / png
        from PIL import Image
        from PIL.PngImagePlugin import PngInfo
        info = PngInfo()
        info.add_text("config_hash", cfg.config_hash())
        Image.fromarray(np.round(sto2[0] * 255).astype(np.uint8)).save(png, pnginfo=info)
    print(f"wrote StO2 estimate {list(sto2.shape)} to {dst}")
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig, args, out: Path) -> int:
    results = run_suite(seed=cfg.train.seed, eps=args.eps, tolerance=args.tolerance)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name:<26} max_rel_error={r.max_rel_error:.3e}")
    _write_json(out / "gradcheck.json",
                {"config_hash": cfg.config_hash(), "eps": args.eps, "tolerance": args.tolerance,
                 "results": {r.name: r.max_rel_error for r in results}})
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAILURE


COMMANDS = {
    "synth": cmd_synth, "augment": cmd_augment, "train": cmd_train, "eval": cmd_eval,
    "sweep": cmd_sweep, "infer": cmd_infer, "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with thread_limits(cfg.deterministic):
            return COMMANDS[args.command](cfg, args, out)
    except OxyganError as exc:
        print(f"error[{exc.category}]: {exc}", file=sys.stderr)
        return EXIT_USAGE if isinstance(exc, ConfigError) else EXIT_FAILURE
    except OSError as exc:
        print(f"error[io]: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
