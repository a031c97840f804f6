"""Command line entry point: ``fragnet {train,segment,detect,eval,bench,synth,check}``.

Exit codes: 0 ok, 2 invalid config or arguments, 3 data error,
4 internal-consistency failure.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import logging
import statistics
import sys
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import data as dio
from .config import EXAMPLE_CONFIG, load_config
from .errors import ConsistencyError, DataError, FragnetError, InvalidInputError
from .network import Model, forward_dense, validate_arch
from .optim import auto_class_weights, train, write_epoch_log
from .oracle import dense_via_patches
from .serialize import load_model, save_model

log = logging.getLogger("fragnet")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_INTERNAL = 0, 2, 3, 4


# -- shared helpers -----------------------------------------------------------

def _dtype(precision: str):
    return np.float32 if precision == "single" else np.float64


def _preprocess(dataset: dio.Dataset, factor: int) -> dio.Dataset:
    if factor == 1:
        return dataset
    items = [dio.Item(dio.downsample(it.image, factor),
                      dio.downsample_labels(it.labels, factor, dataset.n_classes), it.id, it.split)
             for it in dataset.items]
    return dio.Dataset(items, dataset.n_classes)


def _need(args, name):
    value = getattr(args, name)
    if value is None:
        raise InvalidInputError(f"--{name} is required for '{args.command}'")
    return value


def _load_model(args) -> tuple[Model, dict]:
    model, meta = load_model(_need(args, "model"))
    return model.astype(_dtype(args.precision)), meta


def _predict(model: Model, image) -> tuple[np.ndarray, np.ndarray]:
    probs, _ = forward_dense(image, model)
    return probs, probs.argmax(axis=0)


# -- train --------------------------------------------------------------------

def cmd_train(args) -> int:
    run = load_config(_need(args, "config"))
    if args.epochs is not None:
        run.train.epochs = args.epochs
    if run.train.epochs < 1:
        raise InvalidInputError("epochs must be >= 1")
    if args.seed is not None:
        run.init_seed = args.seed
        run.train.shuffle_seed = args.seed
    dataset = dio.read_manifest(_need(args, "manifest"), run.arch.n_classes)
    dataset = _preprocess(dataset, run.downsample)
    model = Model.build(run.arch, seed=run.init_seed, scale=run.init_scale)
    model, logs = train(dataset, model, run.train)
    out = Path(_need(args, "out"))
    meta = {"downsample": run.downsample, "epochs": run.train.epochs, "optimizer": run.train.optimizer}
    save_model(out, model, meta)
    log_path = Path(args.log) if args.log else out.with_suffix(".log.csv")
    write_epoch_log(log_path, logs)
    print(f"model written to {out}; epoch log {log_path}")
    return EXIT_OK


# -- segment ------------------------------------------------------------------

def cmd_segment(args) -> int:
    model, meta = _load_model(args)
    image_path = Path(_need(args, "image"))
    image = dio.load_image(image_path)
    factor = int(meta.get("downsample", 1))
    if factor > 1:
        image = dio.downsample(image, factor)
    probs, labels = _predict(model, image.astype(model.dtype))
    out = Path(_need(args, "out"))
    out.mkdir(parents=True, exist_ok=True)
    for c in range(probs.shape[0]):
        dio.save_image(out / f"{image_path.stem}_prob{c}.png", probs[c], bits=16)
    dio.save_labels(out / f"{image_path.stem}_labels.png", labels)
    print(f"wrote {probs.shape[0]} probability maps and a label map ({labels.shape[0]}x{labels.shape[1]}) to {out}")
    return EXIT_OK


# -- detect -------------------------------------------------------------------

def detection_flags(counts, threshold) -> np.ndarray:
    """An image is flagged when its defect pixel count exceeds the threshold."""
    return np.asarray(counts) > threshold


def detection_error(counts, truth, threshold) -> float:
    if len(counts) == 0:
        return float("nan")
    return float(np.mean(detection_flags(counts, threshold) != np.asarray(truth, dtype=bool)))


def sweep_threshold(counts, truth, thresholds) -> tuple[float, float]:
    """Threshold with the lowest detection error; ties go to the smallest."""
    best_t, best_err = None, None
    for t in sorted(thresholds):
        err = detection_error(counts, truth, t)
        if best_err is None or err < best_err:
            best_t, best_err = t, err
    return best_t, best_err


def cmd_detect(args) -> int:
    model, meta = _load_model(args)
    dataset = _preprocess(dio.read_manifest(_need(args, "manifest"), model.arch.n_classes),
                          int(meta.get("downsample", 1)))
    c = args.defect_class
    rows = []
    for it in dataset.items:
        _, pred = _predict(model, it.image.astype(model.dtype))
        rows.append((it.id, it.split, int((pred == c).sum()), bool((it.labels == c).any()), it.labels.size))

    def subset(split):
        sel = [r for r in rows if r[1] == split]
        return np.array([r[2] for r in sel]), np.array([r[3] for r in sel], dtype=bool)

    if args.threshold == "auto":
        counts, truth = subset("validation")
        if counts.size == 0:
            raise InvalidInputError("automatic thresholds need validation items in the manifest")
        area = float(np.mean([r[4] for r in rows if r[1] == "validation"]))
        lo, hi, step = args.sweep if args.sweep else (0.0, area, max(1.0, 0.01 * area))
        threshold, val_err = sweep_threshold(counts, truth, np.arange(lo, hi + step / 2, step))
        print(f"threshold {threshold:g} selected on validation (error {100 * val_err:.2f}%)")
    else:
        threshold = float(args.threshold)
        if threshold < 0:
            raise InvalidInputError("threshold must be >= 0")
    out = Path(args.out) if args.out else Path("detection.csv")
    with out.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("id", "split", "defectPixels", "flagged", "groundTruth"))
        for r in rows:
            w.writerow((r[0], r[1], r[2], int(r[2] > threshold), int(r[3])))
    for split in dio.SPLITS:
        counts, truth = subset(split)
        if counts.size:
            print(f"{split}: detection error {100 * detection_error(counts, truth, threshold):.2f}% "
                  f"over {counts.size} images (threshold {threshold:g})")
    print(f"report written to {out}")
    return EXIT_OK


# -- eval ---------------------------------------------------------------------

@dataclass
class PixelReport:
    balanced_error: float
    n_pos: int
    n_neg: int
    pos_errors: int
    neg_errors: int
    confusion: np.ndarray  # confusion[true, predicted] over all test pixels


def evaluate_pixels(labels: list[np.ndarray], preds: list[np.ndarray], n_classes: int, n_pos: int, n_neg: int,
                    seed: int, positive_class: int = 1) -> PixelReport:
    """Error on ``n_pos`` positive and ``n_neg`` negative pixels sampled without replacement."""
    truth = np.concatenate([l.ravel() for l in labels])
    pred = np.concatenate([p.ravel() for p in preds])
    pos = np.flatnonzero(truth == positive_class)
    neg = np.flatnonzero(truth != positive_class)
    if pos.size < n_pos or neg.size < n_neg:
        raise DataError(f"test split has {pos.size} positive / {neg.size} negative pixels, "
                        f"need {n_pos} / {n_neg}")
    rng = np.random.default_rng(seed)
    pos_s = rng.choice(pos, n_pos, replace=False)
    neg_s = rng.choice(neg, n_neg, replace=False)
    pos_err = int(np.sum(pred[pos_s] != positive_class))
    neg_err = int(np.sum(pred[neg_s] == positive_class))
    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(confusion, (truth, pred), 1)
    return PixelReport((pos_err + neg_err) / (n_pos + n_neg), n_pos, n_neg, pos_err, neg_err, confusion)


def cmd_eval(args) -> int:
    model, meta = _load_model(args)
    dataset = dio.read_manifest(_need(args, "manifest"), model.arch.n_classes)
    dataset = _preprocess(dataset, int(meta.get("downsample", 1)))
    items = dataset.split("test")
    if not items:
        raise DataError("manifest has no test items")
    preds = []
    for it in items:
        if args.predictions:
            preds.append(dio.load_labels(Path(args.predictions) / f"{it.id}_labels.png"))
        else:
            preds.append(_predict(model, it.image.astype(model.dtype))[1])
    seed = 0 if args.seed is None else args.seed
    report = evaluate_pixels([it.labels for it in items], preds, model.arch.n_classes,
                             args.n_pos, args.n_neg, seed, args.positive_class)
    out = Path(args.out) if args.out else Path("eval.csv")
    with out.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("metric", "value"))
        w.writerow(("balancedPixelError", repr(report.balanced_error)))
        w.writerow(("sampledPositive", report.n_pos))
        w.writerow(("sampledNegative", report.n_neg))
        w.writerow(("positiveErrors", report.pos_errors))
        w.writerow(("negativeErrors", report.neg_errors))
        for t in range(report.confusion.shape[0]):
            for p in range(report.confusion.shape[1]):
                w.writerow((f"confusion_true{t}_pred{p}", int(report.confusion[t, p])))
    print(f"balanced pixel error {100 * report.balanced_error:.2f}% on {report.n_pos}+{report.n_neg} sampled pixels")
    print(f"report written to {out}")
    return EXIT_OK


# -- bench --------------------------------------------------------------------

@dataclass
class BenchReport:
    dense_patches_per_sec: float
    patch_mode_patches_per_sec: float
    speedup_factor: float
    image_size: int
    arch_id: str
    precision: str
    max_abs_diff: float
    patches_timed: int


def run_bench(model: Model, size: int, repeats: int = 3, seed: int = 0, patch_limit: int | None = None,
              arch_id: str = "model") -> BenchReport:
    """Time dense vs patch-by-patch evaluation of one random ``size x size`` image.

    ``patch_limit`` times the patch mode on the first N pixels only (the rate
    is per patch either way).  The two outputs are compared on the timed
    pixels before anything is reported.
    """
    if size < max(model.arch.window_rows, model.arch.window_cols):
        raise InvalidInputError(f"image size {size} is smaller than the window")
    image = np.random.default_rng(seed).random((size, size)).astype(model.dtype)
    n = size * size
    dense_rates, patch_rates = [], []
    pixels = [(i, j) for i in range(size) for j in range(size)]
    if patch_limit is not None:
        pixels = pixels[:patch_limit]
    for _ in range(repeats):
        t0 = time.perf_counter()
        dense, _ = forward_dense(image, model)
        dense_rates.append(n / (time.perf_counter() - t0))
        t0 = time.perf_counter()
        patched = dense_via_patches(image, model, pixels)
        patch_rates.append(len(pixels) / (time.perf_counter() - t0))
    idx = tuple(np.array(pixels).T)
    diff = float(np.abs(dense[:, idx[0], idx[1]] - patched[:, idx[0], idx[1]]).max())
    tol = 1e-10 if model.dtype == np.float64 else 1e-4
    if diff > tol:
        raise ConsistencyError(f"dense and patch outputs differ by {diff:.3g} (> {tol:g})")
    d, p = statistics.median(dense_rates), statistics.median(patch_rates)
    precision = "double" if model.dtype == np.float64 else "single"
    return BenchReport(d, p, d / p, size, arch_id, precision, diff, len(pixels))


def cmd_bench(args) -> int:
    if args.model:
        model, _ = _load_model(args)
        arch_id = Path(args.model).stem
    else:
        cfg_path = args.config or EXAMPLE_CONFIG
        run = load_config(cfg_path)
        seed = run.init_seed if args.seed is None else args.seed
        model = Model.build(run.arch, seed=seed, scale=run.init_scale, dtype=_dtype(args.precision))
        arch_id = Path(cfg_path).stem
    with threadpool_limits(args.threads) if args.threads else contextlib.nullcontext():
        report = run_bench(model, args.size, args.repeats, 0 if args.seed is None else args.seed,
                           args.patch_limit, arch_id)
    row = asdict(report)
    out = Path(args.out) if args.out else Path("bench.csv")
    with out.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(row))
        w.writeheader()
        w.writerow(row)
    print(f"{'mode':<8}{'patches/s':>14}")
    print(f"{'dense':<8}{report.dense_patches_per_sec:>14.1f}")
    print(f"{'patch':<8}{report.patch_mode_patches_per_sec:>14.1f}")
    print(f"speed-up {report.speedup_factor:.1f}x ({report.arch_id}, {report.image_size}x{report.image_size}, "
          f"{report.precision}); max |dense - patch| = {report.max_abs_diff:.2e}")
    print(f"report written to {out}")
    return EXIT_OK


# -- helpers for getting started ----------------------------------------------

def cmd_synth(args) -> int:
    seed = 0 if args.seed is None else args.seed
    items = dio.synth_texture_dataset(args.n_images, args.size, args.size, seed=seed,
                                      defect_fraction=args.defect_fraction)
    dataset = dio.split_dataset(items, (0.5, 0.25), seed=seed)
    manifest = dio.write_manifest(dataset, _need(args, "out"))
    print(f"wrote {len(items)} images and {manifest}")
    return EXIT_OK


def cmd_check(args) -> int:
    run = load_config(_need(args, "config"), require_valid=False)
    report = validate_arch(run.arch)
    print(report)
    if args.manifest:
        dataset = _preprocess(dio.read_manifest(args.manifest, run.arch.n_classes), run.downsample)
        print("auto class weights:", auto_class_weights(dataset.split("train"), run.arch.n_classes))
    return EXIT_OK if report.ok else EXIT_CONFIG


# -- argument parsing ---------------------------------------------------------

def _sweep(text: str):
    try:
        lo, hi, step = (float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError("expected MIN,MAX,STEP") from None
    if step <= 0 or hi < lo:
        raise argparse.ArgumentTypeError("need MIN <= MAX and STEP > 0")
    return lo, hi, step


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML architecture/training config")
    common.add_argument("--manifest", help="dataset manifest CSV (id,imagePath,labelPath,split)")
    common.add_argument("--model", help="model file")
    common.add_argument("--seed", type=int, help="seed for initialisation, shuffling and sampling")
    common.add_argument("--deterministic", action="store_true", help="serial BLAS reductions")
    common.add_argument("--precision", choices=("double", "single"), default="double")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="fragnet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--out", help="model file to write")
    p.add_argument("--log", help="per-epoch CSV log (default: <out>.log.csv)")
    p.add_argument("--epochs", type=int, help="override train.epochs")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("segment", parents=[common], help="per-pixel probabilities and labels for one image")
    p.add_argument("--image")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("detect", parents=[common], help="flag images by defect pixel count")
    p.add_argument("--defect-class", type=int, default=1)
    p.add_argument("--threshold", default="auto", help="pixel count or 'auto' (sweep on validation)")
    p.add_argument("--sweep", type=_sweep, help="MIN,MAX,STEP for the automatic threshold sweep")
    p.add_argument("--out", help="detection report CSV")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("eval", parents=[common], help="balanced pixel error on the test split")
    p.add_argument("--n-pos", type=int, default=5000)
    p.add_argument("--n-neg", type=int, default=5000)
    p.add_argument("--positive-class", type=int, default=1)
    p.add_argument("--predictions", help="directory of <id>_labels.png written by 'segment'")
    p.add_argument("--out", help="report CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", parents=[common], help="dense vs patch-by-patch throughput")
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--patch-limit", type=int, help="time patch mode on the first N pixels only")
    p.add_argument("--threads", type=int, default=1, help="BLAS threads for both modes (0 = library default)")
    p.add_argument("--out", help="report CSV")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic two-texture dataset")
    p.add_argument("--out", help="output directory")
    p.add_argument("--n-images", type=int, default=30)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--defect-fraction", type=float)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("check", parents=[common], help="validate a config's geometry")
    p.set_defaults(func=cmd_check)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    limits = threadpool_limits(1) if args.deterministic else contextlib.nullcontext()
    try:
        with limits:
            return args.func(args)
    except FragnetError as exc:
        print(f"fragnet {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
