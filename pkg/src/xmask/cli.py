"""Command-line front end: one subcommand per pipeline stage.

Every command loads and validates the run config, checks that its input
artifacts exist and fit together, and only then computes.  Artifacts land in
``--out`` (default: the config's ``out``); a one-line summary goes to stdout.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
import time

import numpy as np

from . import tensor as T
from .attacks import fgsm, masked_pgd, pgd, sinifgsm
from .benchmark import BenchmarkConfig, run_benchmark
from .config import ConfigError, RunConfig, load_config, to_dict
from .data import (Dataset, FormatError, digits_dataset, export_pgm, load_checkpoint, load_cifar10, load_idx,
                   load_tensor, save_checkpoint, save_tensor, synthetic_dataset)
from .explain import explain, normalize01
from .monitor import MonitorConfig, calibrate_threshold, config_hash, monitor_verdict
from .mute import mute
from .nn import ModelGraph, build_model, build_xunet
from .tensor import ShapeError
from .train import TrainConfig, train_classifier, train_xunet, xunet_masks

log = logging.getLogger("xmask")

CLASSIFIER_FILE = "classifier.xmk"
XUNET_FILE = "xunet.xmk"


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# Shared plumbing
# ---------------------------------------------------------------------------

def load_dataset(cfg: RunConfig) -> Dataset:
    d = cfg.data
    if d.source == "synthetic":
        return synthetic_dataset(d.kind, d.n, tuple(d.shape), d.classes, seed=cfg.seed, noise=d.noise)
    if d.source == "digits":
        return digits_dataset(cfg.seed)
    if d.source == "idx":
        return load_idx(d.images, d.labels)
    return load_cifar10(d.batches)


def split(cfg: RunConfig, ds: Dataset) -> tuple[Dataset, Dataset]:
    """The last ``eval_size`` samples are held out; ``train_size`` caps the rest."""
    if cfg.data.eval_size >= len(ds):
        raise ConfigError(f"data.eval_size {cfg.data.eval_size} leaves no training data ({len(ds)} samples)")
    train, test = ds.split_at(len(ds) - cfg.data.eval_size)
    if cfg.train.train_size:
        train = train.subset(slice(0, cfg.train.train_size), "train")
    return train, test


def train_config(cfg: RunConfig, xunet: bool = False) -> TrainConfig:
    t = cfg.train
    return TrainConfig(
        epochs=t.xunet_epochs if xunet else t.epochs, batch_size=t.batch_size,
        lr=t.xunet_lr if xunet else t.lr, optimizer=t.optimizer, momentum=t.momentum, seed=cfg.seed,
        unroll=t.unroll, weights=cfg.loss_weights, attack=cfg.attack, mute=cfg.mute, ig_steps=t.ig_steps,
        lrp_eps=t.lrp_eps, cache_every=t.cache_every)


def _require(path: str, what: str) -> str:
    if not os.path.isfile(path):
        raise UsageError(f"{what} not found: {path}")
    return path


def _classifier_path(args, out: str) -> str:
    return _require(args.classifier or os.path.join(out, CLASSIFIER_FILE), "classifier checkpoint")


def _xunet_path(args, out: str) -> str:
    return _require(args.xunet or os.path.join(out, XUNET_FILE), "X-UNet checkpoint")


def _check_model_input(model: ModelGraph, ds: Dataset, what: str) -> None:
    if tuple(model.input_shape) != tuple(ds.shape):
        raise ShapeError(f"{what} expects inputs {tuple(model.input_shape)}, data has {tuple(ds.shape)}")


def _eval_images(cfg: RunConfig, args) -> tuple[np.ndarray, np.ndarray]:
    _, test = split(cfg, load_dataset(cfg))
    n = len(test) if not getattr(args, "count", 0) else min(args.count, len(test))
    return test.images[:n], test.labels[:n]


def _write_rows(path: str, header: list, rows: list) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([f"{v:.6f}" if isinstance(v, float) else v for v in r])


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_train_classifier(cfg: RunConfig, args, out: str) -> str:
    train, test = split(cfg, load_dataset(cfg))
    model = build_model(cfg.model.kind, train.shape, seed=cfg.seed, classes=train.classes)
    rows = train_classifier(model, train, train_config(cfg))
    acc = float(np.mean(model.predict(test.images) == test.labels))
    save_checkpoint(model, os.path.join(out, CLASSIFIER_FILE))
    _write_rows(os.path.join(out, "classifier_log.csv"), ["epoch", "loss", "accuracy"],
                [[r["epoch"], r["loss"], r["accuracy"]] for r in rows])
    return f"train-classifier: {cfg.model.kind} on {len(train)} samples, eval accuracy {acc:.4f}"


def cmd_train_xunet(cfg: RunConfig, args, out: str) -> str:
    ckpt = _classifier_path(args, out)
    train, test = split(cfg, load_dataset(cfg))
    model = load_checkpoint(ckpt)
    _check_model_input(model, train, "classifier")
    model.requires_grad_(False)
    xunet = build_xunet(train.shape, tuple(cfg.model.xunet_widths), cfg.model.slu_a, seed=cfg.seed)
    rows = train_xunet(xunet, model, train, train_config(cfg, xunet=True))
    save_checkpoint(xunet, os.path.join(out, XUNET_FILE))
    _write_rows(os.path.join(out, "xunet_log.csv"), ["epoch", "total", "term1", "term2", "term3"],
                [[r["epoch"], r["total"], r["term1"], r["term2"], r["term3"]] for r in rows])
    return f"train-xunet: loss {rows[0]['total']:.4f} -> {rows[-1]['total']:.4f} over {len(rows) - 1} epochs"


def cmd_attack(cfg: RunConfig, args, out: str) -> str:
    ckpt = _classifier_path(args, out)
    mask = None
    if args.mask:
        mask = load_tensor(_require(args.mask, "mask file"))
    elif args.method == "masked-pgd" and args.mask_source == "xunet":
        _xunet_path(args, out)
    x, y = _eval_images(cfg, args)
    if args.method == "masked-pgd" and mask is not None and mask.shape != x.shape:
        raise ShapeError(f"mask shape {mask.shape} does not match input shape {x.shape}")
    model = load_checkpoint(ckpt).requires_grad_(False)
    if tuple(model.input_shape) != x.shape[1:]:
        raise ShapeError(f"classifier expects inputs {tuple(model.input_shape)}, data has {x.shape[1:]}")
    if args.method == "masked-pgd" and mask is None:
        if args.mask_source == "xunet":
            mask = xunet_masks(load_checkpoint(_xunet_path(args, out)), x)
        else:
            mask = _mute_mask(model, x, cfg)
    if args.method == "pgd":
        adv = pgd(model, x, y, cfg.attack)
    elif args.method == "masked-pgd":
        adv = masked_pgd(model, x, y, mask, cfg.attack)
    elif args.method == "sinifgsm":
        adv = sinifgsm(model, x, y, cfg.attack, cfg.benchmark.sinifgsm_scales, cfg.benchmark.sinifgsm_momentum)
    else:
        adv = fgsm(model, x, y, cfg.attack.epsilon)
    save_tensor(adv.x_adv, os.path.join(out, "adversarial.xmt"))
    _write_rows(os.path.join(out, "attack.csv"), ["index", "label", "pred_before", "pred_after"],
                [[i, int(a), int(b), int(c)] for i, (a, b, c) in
                 enumerate(zip(adv.true_label, adv.pred_before, adv.pred_after))])
    return f"attack: {args.method} on {len(x)} samples, accuracy under attack {adv.accuracy:.4f}"


def _mute_mask(model: ModelGraph, x, cfg: RunConfig) -> np.ndarray:
    ig = explain(model, x, "ig", steps=cfg.monitor.ig_steps)
    lrp = explain(model, x, "lrp", eps=cfg.monitor.lrp_eps)
    return mute(lrp, ig, cfg.mute).values.astype(x.dtype)


def cmd_explain(cfg: RunConfig, args, out: str) -> str:
    ckpt = _classifier_path(args, out)
    x = load_tensor(_require(args.input, "input tensor")) if args.input else _eval_images(cfg, args)[0]
    model = load_checkpoint(ckpt).requires_grad_(False)
    if tuple(model.input_shape) != x.shape[1:]:
        raise ShapeError(f"classifier expects inputs {tuple(model.input_shape)}, got {x.shape[1:]}")
    x = np.asarray(x, dtype=T.default_dtype())
    if args.method == "mute":
        values = _mute_mask(model, x, cfg)
    elif args.method == "ig":
        values = explain(model, x, "ig", steps=cfg.monitor.ig_steps).attribution
    else:
        values = explain(model, x, "lrp", eps=cfg.monitor.lrp_eps).attribution
    path = os.path.join(out, f"{args.method}.xmt")
    save_tensor(values, path)
    return f"explain: {args.method} for {len(x)} samples -> {path}"


def cmd_monitor(cfg: RunConfig, args, out: str) -> str:
    ckpt = _classifier_path(args, out)
    cand = load_tensor(_require(args.candidates, "candidate tensor"))
    x, _ = _eval_images(cfg, args)
    if cand.shape != x.shape:
        raise ShapeError(f"candidates {cand.shape} do not match the clean evaluation inputs {x.shape}")
    model = load_checkpoint(ckpt).requires_grad_(False)
    mcfg = cfg.monitor
    clean = mcfg.explain(model, x)
    tau = mcfg.tau
    if mcfg.calibration == "clean-percentile":
        tau = calibrate_threshold(model, x, mcfg.percentile, mcfg, seed=cfg.seed, clean_explanation=clean)
    fixed = MonitorConfig(mcfg.xai_method, tau, "fixed", mcfg.percentile, mcfg.ig_steps, mcfg.lrp_eps)
    v = monitor_verdict(model, x, cand.astype(x.dtype), fixed, clean)
    _write_rows(os.path.join(out, "monitor.csv"), ["index", "score", "passed"],
                [[i, float(s), int(p)] for i, (s, p) in enumerate(zip(v.score, v.passed))])
    return f"monitor: tau {tau:.6f}, pass rate {v.pass_rate:.4f} over {len(x)} candidates"


def cmd_benchmark(cfg: RunConfig, args, out: str) -> str:
    ckpt = _classifier_path(args, out)
    b = cfg.benchmark
    xunet_file = _xunet_path(args, out) if "masked-pgd(xunet)" in b.methods else None
    x, y = _eval_images(cfg, args)
    model = load_checkpoint(ckpt).requires_grad_(False)
    if tuple(model.input_shape) != x.shape[1:]:
        raise ShapeError(f"classifier expects inputs {tuple(model.input_shape)}, data has {x.shape[1:]}")
    xunet = load_checkpoint(xunet_file) if xunet_file else None
    bcfg = BenchmarkConfig(tuple(b.methods), b.attack, cfg.monitor, cfg.mute, cfg.balance_weights,
                           b.sinifgsm_scales, b.sinifgsm_momentum, b.timing, args.jobs, cfg.seed)
    context = {k: v for k, v in to_dict(cfg).items() if k != "out"}
    context["count"] = len(x)
    report = run_benchmark(model, x, y, bcfg, xunet, context)
    report.notes["run_config"] = config_hash(context)
    with open(os.path.join(out, "benchmark.csv"), "w", newline="") as f:
        f.write(report.to_csv())
    with open(os.path.join(out, "benchmark.txt"), "w") as f:
        f.write(report.to_text())
    print(report.to_text(), end="")
    best = max(report.rows, key=lambda r: r.balance)
    return f"benchmark: {len(report.rows)} methods on {len(x)} samples, best balance {best.method} ({best.balance:.3f})"


def cmd_export_saliency(cfg: RunConfig, args, out: str) -> str:
    arr = load_tensor(_require(args.input, "saliency tensor"))
    if arr.ndim not in (3, 4):
        raise ShapeError(f"saliency tensor must be (N, H, W) or (N, C, H, W), got {arr.shape}")
    if arr.ndim == 4:
        arr = arr.mean(axis=1) if arr.shape[1] > 1 else arr[:, 0]
    count = min(args.count or len(arr), len(arr))
    maps = arr[:count]
    if not args.raw:
        maps = normalize01(np.abs(maps) if args.magnitude else maps)
    elif maps.min() < 0 or maps.max() > 1:
        raise ValueError("--raw needs values in [0, 1]")
    stem = os.path.splitext(os.path.basename(args.input))[0]
    for i in range(count):
        export_pgm(maps[i], os.path.join(out, f"{stem}_{i:04d}.pgm"))
    return f"export-saliency: wrote {count} PGM maps to {out}"


COMMANDS = {
    "train-classifier": cmd_train_classifier,
    "train-xunet": cmd_train_xunet,
    "attack": cmd_attack,
    "explain": cmd_explain,
    "monitor": cmd_monitor,
    "benchmark": cmd_benchmark,
    "export-saliency": cmd_export_saliency,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run config (see docs/config.md)")
    common.add_argument("--seed", type=int, help="override the config seed (unsigned 64-bit)")
    common.add_argument("--out", help="output directory (default: config 'out')")
    common.add_argument("--f64", action="store_true", help="run in float64 verification mode")
    common.add_argument("--jobs", type=int, default=1, help="worker threads for per-sample work")
    common.add_argument("--classifier", help="classifier checkpoint (default: OUT/classifier.xmk)")
    common.add_argument("--xunet", help="X-UNet checkpoint (default: OUT/xunet.xmk)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="xmask", description="Attention-mask guided adversarial attacks "
                                "against explanation-based monitors.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("train-classifier", parents=[common], help="train the target classifier")
    sub.add_parser("train-xunet", parents=[common], help="train the X-UNet mask generator")
    a = sub.add_parser("attack", parents=[common], help="attack the evaluation split")
    a.add_argument("--method", choices=["pgd", "masked-pgd", "sinifgsm", "fgsm"], default="pgd")
    a.add_argument("--mask", help="mask tensor file (XMT1) matching the evaluation inputs")
    a.add_argument("--mask-source", choices=["mute", "xunet"], default="mute")
    a.add_argument("--count", type=int, default=0, help="limit to the first N evaluation samples")
    e = sub.add_parser("explain", parents=[common], help="IG / LRP attributions or Mute masks")
    e.add_argument("--method", choices=["ig", "lrp", "mute"], default="ig")
    e.add_argument("--input", help="input tensor file (default: evaluation split)")
    e.add_argument("--count", type=int, default=0)
    m = sub.add_parser("monitor", parents=[common], help="score candidates with the explanation monitor")
    m.add_argument("--candidates", required=True, help="candidate tensor file, aligned with the evaluation split")
    m.add_argument("--count", type=int, default=0)
    bm = sub.add_parser("benchmark", parents=[common], help="compare attacks and write CSV + text reports")
    bm.add_argument("--count", type=int, default=0)
    x = sub.add_parser("export-saliency", parents=[common], help="write saliency/mask tensors as PGM images")
    x.add_argument("--input", required=True, help="tensor file (XMT1)")
    x.add_argument("--count", type=int, default=0)
    x.add_argument("--raw", action="store_true", help="write values as-is (must already lie in [0, 1])")
    x.add_argument("--magnitude", action="store_true", help="normalise |values| instead of signed values")
    return p


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        if not 0 <= args.seed < 2 ** 64:
            raise ConfigError(f"--seed must be an unsigned 64-bit integer, got {args.seed}")
        cfg.seed = args.seed
    if args.f64:
        cfg.float_mode = "f64"
    if args.jobs < 1:
        raise ConfigError(f"--jobs must be >= 1, got {args.jobs}")
    if getattr(args, "count", 0) < 0:
        raise ConfigError(f"--count must be >= 0, got {args.count}")
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    mode = T.get_float_mode()
    try:
        cfg = resolve_config(args)
        out = args.out or cfg.out
        T.set_float_mode(cfg.float_mode)
        os.makedirs(out, exist_ok=True)
        t0 = time.perf_counter()
        summary = COMMANDS[args.command](cfg, args, out)
        log.info("%s finished in %.2fs", args.command, time.perf_counter() - t0)
    except (ConfigError, UsageError, FormatError, ShapeError, ValueError, OSError) as e:
        print(f"xmask {args.command}: error: {e}", file=sys.stderr)
        return 2
    finally:
        T.set_float_mode(mode)
    print(summary)
    return 0


if __name__ == "__main__":
    sys.exit(main())
