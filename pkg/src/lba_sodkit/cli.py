"""Command-line entry point ``lba-sodkit``.

Subcommands: ``eval`` scores a prediction directory, ``forward`` runs the
network on one image, ``train-toy`` fits a toy model, ``gradcheck`` runs the
finite-difference suite. Failures print one JSON line to stderr of the form
``{"error": kind, "exit": code, "message": text}``.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import gradcheck as gc
from . import metrics, ops
from .imageio import (SUPPORTED_EXTENSIONS, ImageFormatError, load_gray, load_rgb,
                      quantize, save_image)
from .network import (ABLATIONS, DEFAULT_LR, TOY_BATCH, TOY_CHANNEL_SCALE, TOY_INPUT_SIZE,
                      NetworkConfig, NonFiniteLossError, ablation_config, check_params,
                      forward, init_params, predict, train)
from .tensor import ShapeError, Tensor
from .weights import WeightsFormatError, load_weights, save_weights

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_PARTIAL = 2
EXIT_NONFINITE = 3
EXIT_IO = 4
EXIT_USAGE = 64

THREADS_ENV = "LBA_SODKIT_THREADS"
DECIMALS = 6


class CliError(Exception):
    def __init__(self, code: int, kind: str, message: str):
        super().__init__(message)
        self.code = code
        self.kind = kind
        self.message = message


def _emit_error(err: CliError) -> int:
    line = json.dumps({"error": err.kind, "exit": err.code, "message": err.message})
    print(line, file=sys.stderr)
    return err.code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(EXIT_USAGE, "usage", message)


def _round(x):
    if isinstance(x, float):
        return round(x, DECIMALS)
    if isinstance(x, dict):
        return {k: _round(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_round(v) for v in x]
    return x


# ---------------------------------------------------------------------------
# eval

def scan_dir(root: Path) -> tuple[dict[str, Path], list[str]]:
    """Map file stem -> path for supported images; duplicate stems are reported."""
    found: dict[str, Path] = {}
    dupes = []
    for p in sorted(root.iterdir()):
        if p.is_file() and p.suffix.lower() in SUPPORTED_EXTENSIONS:
            if p.stem in found:
                dupes.append(p.stem)
            else:
                found[p.stem] = p
    return found, dupes


def _evaluate_file_pair(pred: Path, gt: Path, alpha: float, beta2: float):
    try:
        s = load_gray(pred)
        g = load_gray(gt)
        if s.shape != g.shape:
            raise ShapeError(f"prediction {s.shape[::-1]} and mask {g.shape[::-1]} sizes differ")
        return metrics.evaluate_pair(s, g, alpha, beta2), None
    except (ImageFormatError, ShapeError, ValueError, OSError) as exc:
        return None, f"{type(exc).__name__}: {exc}"


def resolve_jobs(jobs: int | None) -> int:
    if jobs is None:
        env = os.environ.get(THREADS_ENV)
        if env is None:
            return 1
        try:
            jobs = int(env)
        except ValueError:
            raise CliError(EXIT_USAGE, "usage", f"{THREADS_ENV}={env!r} is not an integer") from None
    if jobs < 1:
        raise CliError(EXIT_USAGE, "usage", f"jobs must be >= 1, got {jobs}")
    return jobs


def run_eval(args) -> int:
    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    for d in (pred_dir, gt_dir):
        if not d.is_dir():
            raise CliError(EXIT_IO, "io", f"not a directory: {d}")
    jobs = resolve_jobs(args.jobs)
    preds, pred_dupes = scan_dir(pred_dir)
    gts, gt_dupes = scan_dir(gt_dir)
    stems = sorted(set(preds) | set(gts))
    paired = [s for s in stems if s in preds and s in gts]
    if not paired:
        raise CliError(EXIT_FAILURE, "no_pairs", f"no matching stems between {pred_dir} and {gt_dir}")

    errors = []
    for s in stems:
        if s not in gts:
            errors.append({"stem": s, "error": "missing ground truth"})
        elif s not in preds:
            errors.append({"stem": s, "error": "missing prediction"})
    for s in sorted(set(pred_dupes) | set(gt_dupes)):
        errors.append({"stem": s, "error": "duplicate stem with several extensions"})

    def work(stem):
        return _evaluate_file_pair(preds[stem], gts[stem], args.alpha, args.beta2)

    with ThreadPoolExecutor(max_workers=jobs) as pool:
        results = list(pool.map(work, paired))

    reports, per_image = [], []
    for stem, (rep, err) in zip(paired, results):
        if err is not None:
            errors.append({"stem": stem, "error": err})
            continue
        reports.append(rep)
        per_image.append({"stem": stem, **rep.scalars(), "flags": rep.flags})
    errors.sort(key=lambda e: e["stem"])
    if not reports:
        raise CliError(EXIT_FAILURE, "no_pairs", "no pair could be evaluated")

    total = metrics.aggregate(reports)
    dataset = args.dataset or gt_dir.resolve().name
    report = {"dataset": dataset, "n_images": len(reports), **total.scalars(),
              "per_image": per_image, "errors": errors,
              "metadata": {"alpha": args.alpha, "beta2": args.beta2,
                           "thresholds": metrics.N_THRESHOLDS,
                           "f_max_per_image_mean": total.f_max_per_image,
                           "e_max_per_image_mean": total.e_max_per_image}}
    Path(args.out).write_text(json.dumps(_round(report), indent=2) + "\n")
    if args.curves:
        write_curves(Path(args.curves), total.curves)
    print(f"evaluated {len(reports)} pairs, {len(errors)} errors -> {args.out}")
    return EXIT_PARTIAL if errors else EXIT_OK


def write_curves(path: Path, curves: metrics.Curve256) -> None:
    lines = [",".join(metrics.Curve256.COLUMNS)]
    for row in curves.as_array():
        lines.append(",".join(f"{v:.{DECIMALS}f}" for v in row))
    path.write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# forward

def _config_from_args(args) -> NetworkConfig:
    try:
        return ablation_config(args.ablation, input_size=args.input_size,
                               channel_scale=args.channel_scale, seed=getattr(args, "seed", 0))
    except ValueError as exc:
        raise CliError(EXIT_USAGE, "usage", str(exc)) from None


def _resize(a: np.ndarray, h: int, w: int) -> np.ndarray:
    return ops.resize_bilinear(Tensor(a), h, w).data


def _load_weights_for(path: Path, config: NetworkConfig):
    try:
        P = load_weights(path)
    except (WeightsFormatError, OSError) as exc:
        raise CliError(EXIT_IO, "weights_io", f"{path}: {exc}") from None
    try:
        check_params(config, P)
    except (KeyError, ValueError) as exc:
        msg = exc.args[0] if exc.args else str(exc)
        raise CliError(EXIT_FAILURE, "weights_mismatch", str(msg)) from None
    return P


def run_forward(args) -> int:
    config = _config_from_args(args)
    P = _load_weights_for(Path(args.weights), config)
    try:
        rgb = load_rgb(args.input)
    except (ImageFormatError, OSError) as exc:
        raise CliError(EXIT_IO, "image_io", f"{args.input}: {exc}") from None
    h, w = rgb.shape[:2]
    x = rgb.transpose(2, 0, 1)[None].astype(np.float64) / 255.0
    size = config.input_size
    p1 = forward(_resize(x, size, size), config, P).prediction.data
    out = quantize(_resize(p1, h, w)[0, 0])
    try:
        save_image(args.output, out)
    except (ImageFormatError, OSError, ValueError) as exc:
        raise CliError(EXIT_IO, "image_io", f"{args.output}: {exc}") from None
    return EXIT_OK


# ---------------------------------------------------------------------------
# train-toy

def load_training_set(root: Path, size: int) -> tuple[np.ndarray, np.ndarray]:
    """Images (n, 3, size, size) in [0, 1] and masks (n, 1, size, size), paired by stem."""
    img_dir, gt_dir = root / "image", root / "gt"
    for d in (img_dir, gt_dir):
        if not d.is_dir():
            raise CliError(EXIT_IO, "io", f"not a directory: {d}")
    imgs, _ = scan_dir(img_dir)
    gts, _ = scan_dir(gt_dir)
    stems = sorted(set(imgs) & set(gts))
    if not stems:
        raise CliError(EXIT_FAILURE, "no_pairs", f"no image/gt pairs under {root}")
    xs, ms = [], []
    try:
        for s in stems:
            rgb = load_rgb(imgs[s]).transpose(2, 0, 1)[None].astype(np.float64) / 255.0
            mask = metrics.as_mask(load_gray(gts[s])).astype(np.float64)[None, None]
            xs.append(_resize(rgb, size, size)[0])
            ms.append((_resize(mask, size, size)[0] >= 0.5).astype(np.float64))
    except (ImageFormatError, OSError) as exc:
        raise CliError(EXIT_IO, "image_io", str(exc)) from None
    return np.stack(xs), np.stack(ms)


def run_train_toy(args) -> int:
    config = _config_from_args(args)
    images, masks = load_training_set(Path(args.data), config.input_size)
    P = init_params(config)

    def log(step, value):
        print(f"step {step} loss {value:.6f}", flush=True)

    try:
        P, _ = train(images, masks, config, args.steps, lr=args.lr, batch=args.batch, P=P, log=log)
    except NonFiniteLossError as exc:
        raise CliError(EXIT_NONFINITE, "non_finite_loss",
                       f"step {exc.step}: loss {exc.value}") from None
    save_weights(P, args.out)
    pred = predict(images, config, P, args.batch)
    print(f"training_mae {metrics.mae(pred, masks):.6f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck

def run_gradcheck(args) -> int:
    names = args.op or list(gc.REGISTRY)
    unknown = [n for n in names if n not in gc.REGISTRY]
    if unknown:
        raise CliError(EXIT_FAILURE, "unknown_op",
                       f"unknown op {unknown[0]!r}; known: {', '.join(gc.REGISTRY)}")
    failed = []
    print(f"{'op':<20} {'max_rel_err':>12} {'tolerance':>10} {'seeds':>5}  status")
    for name in names:
        reports = [gc.gradcheck(name, seed) for seed in range(args.seeds)]
        worst = max(r.max_rel_err for r in reports)
        passed = all(r.passed for r in reports)
        if not passed:
            failed.append(name)
        print(f"{name:<20} {worst:>12.3e} {reports[0].tolerance:>10.0e} {args.seeds:>5}  "
              f"{'pass' if passed else 'FAIL'}")
    if failed:
        raise CliError(EXIT_FAILURE, "gradcheck_failed", f"failed: {', '.join(failed)}")
    return EXIT_OK


# ---------------------------------------------------------------------------

def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--ablation", choices=sorted(ABLATIONS), default="full")
    p.add_argument("--input-size", type=int, default=TOY_INPUT_SIZE)
    p.add_argument("--channel-scale", type=float, default=TOY_CHANNEL_SCALE)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lba-sodkit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("eval", help="score predictions against ground-truth masks")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True, help="report JSON path")
    p.add_argument("--curves", help="optional CSV of the mean curves")
    p.add_argument("--jobs", type=int, default=None,
                   help=f"worker threads (default: ${THREADS_ENV} or 1)")
    p.add_argument("--dataset", default=None, help="dataset name (default: gt directory name)")
    p.add_argument("--alpha", type=float, default=metrics.ALPHA)
    p.add_argument("--beta2", type=float, default=metrics.BETA2)
    p.set_defaults(func=run_eval)

    p = sub.add_parser("forward", help="write the P_1 map of one image")
    p.add_argument("--weights", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    _add_config_flags(p)
    p.set_defaults(func=run_forward)

    p = sub.add_parser("train-toy", help="train a toy model on DIR/image and DIR/gt")
    p.add_argument("--data", required=True)
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--lr", type=float, default=DEFAULT_LR)
    p.add_argument("--batch", type=int, default=TOY_BATCH)
    _add_config_flags(p)
    p.set_defaults(func=run_train_toy)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--op", action="append", help="operation name (repeatable)")
    g.add_argument("--all", action="store_true", help="every registered case (default)")
    p.add_argument("--seeds", type=int, default=10)
    p.set_defaults(func=run_gradcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except CliError as err:
        return _emit_error(err)


if __name__ == "__main__":
    sys.exit(main())
