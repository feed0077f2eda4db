"""Attack comparison harness producing Table-style reports.

Per method: run the attack, score stealth (explanations at the clean
prediction), monitor pass rate (explanations at each input's own
prediction, threshold calibrated on re-noised clean copies), explanation
alignment of the guiding mask, and misclassification speed.  Speeds are
min-max normalised across the compared methods before entering the balance.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .attacks import AttackConfig, AdvExample, masked_pgd, pgd, sinifgsm
from .data import Dataset, digits_dataset, synthetic_dataset
from .explain import Explanation, integrated_gradients, lrp_epsilon
from .monitor import (BalanceWeights, BenchmarkReport, MonitorConfig, ReportRow, balance, calibrate_threshold,
                      config_hash, cosine_similarity_batch, explain_score, normalize_speeds, speed,
                      stealth_scores, verdict_from_scores)
from .mute import MuteConfig, mute
from .nn import ModelGraph, build_convnet, build_mlp
from .train import TrainConfig, train_classifier, xunet_masks

log = logging.getLogger(__name__)

METHODS = ("pgd", "masked-pgd(mute)", "masked-pgd(xunet)", "sinifgsm")
CHUNK = 100


@dataclass
class BenchmarkConfig:
    methods: tuple = ("pgd", "masked-pgd(mute)", "masked-pgd(xunet)", "sinifgsm")
    attack: AttackConfig = field(default_factory=lambda: AttackConfig(epsilon=0.2, alpha=0.02, steps=10))
    monitor: MonitorConfig = field(default_factory=MonitorConfig)
    mute: MuteConfig = field(default_factory=MuteConfig)
    weights: BalanceWeights = field(default_factory=BalanceWeights)
    sinifgsm_scales: int = 5
    sinifgsm_momentum: float = 1.0
    timing: str = "wall"
    jobs: int = 1
    seed: int = 0
    score_monitor: bool = True

    def __post_init__(self):
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ValueError(f"unknown benchmark methods {bad}; expected a subset of {METHODS}")
        if self.timing not in ("wall", "queries"):
            raise ValueError(f"timing must be 'wall' or 'queries', got {self.timing!r}")
        if self.jobs < 1:
            raise ValueError(f"jobs must be >= 1, got {self.jobs}")


def chunked(fn, n: int, jobs: int = 1, chunk: int | None = None) -> list:
    """Apply ``fn(slice)`` over fixed-size chunks, results in index order.

    Chunk boundaries do not depend on ``jobs``, so outputs are identical for
    any thread count.
    """
    chunk = chunk or CHUNK
    slices = [slice(i, min(i + chunk, n)) for i in range(0, n, chunk)]
    if jobs <= 1 or len(slices) == 1:
        return [fn(s) for s in slices]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, slices))


def _cat_explanations(parts: list[Explanation]) -> Explanation:
    return Explanation(np.concatenate([p.attribution for p in parts]), parts[0].method,
                       np.concatenate([p.target for p in parts]), dict(parts[0].metadata))


def _cat_adv(parts: list[AdvExample]) -> AdvExample:
    # every chunk makes the same per-sample gradient queries; wall time adds up
    return AdvExample(
        np.concatenate([p.x_adv for p in parts]), np.concatenate([p.x_clean for p in parts]),
        np.concatenate([p.true_label for p in parts]), np.concatenate([p.pred_before for p in parts]),
        np.concatenate([p.pred_after for p in parts]), parts[0].iterations,
        float(sum(p.wall_time for p in parts)), parts[0].queries, parts[0].method)


def mute_masks(model: ModelGraph, x, cfg: BenchmarkConfig, ig: Explanation | None = None) -> np.ndarray:
    def one(s):
        ig_s = ig[s] if ig is not None else integrated_gradients(model, x[s], steps=cfg.monitor.ig_steps)
        lrp_s = lrp_epsilon(model, x[s], eps=cfg.monitor.lrp_eps)
        return mute(lrp_s, ig_s, cfg.mute, indices=np.arange(len(x))[s]).values

    return np.concatenate(chunked(one, len(x), cfg.jobs))


def run_attack(method: str, model: ModelGraph, x, y, cfg: BenchmarkConfig, masks: dict) -> AdvExample:
    def one(s):
        if method == "pgd":
            return pgd(model, x[s], y[s], cfg.attack)
        if method == "sinifgsm":
            return sinifgsm(model, x[s], y[s], cfg.attack, cfg.sinifgsm_scales, cfg.sinifgsm_momentum)
        adv = masked_pgd(model, x[s], y[s], masks[method][s], cfg.attack)
        adv.method = method
        return adv

    return _cat_adv(chunked(one, len(x), cfg.jobs))


def run_benchmark(model: ModelGraph, x, y, cfg: BenchmarkConfig, xunet: ModelGraph | None = None,
                  context: dict | None = None) -> BenchmarkReport:
    """Run every configured method on (x, y).  ``context`` (e.g. the run
    config) is folded into each row's config hash."""
    x = np.asarray(x, dtype=T.default_dtype())
    y = np.asarray(y, dtype=np.int64)
    mcfg = cfg.monitor
    model.requires_grad_(False)
    clean_ig = _cat_explanations(chunked(lambda s: mcfg.explain(model, x[s]), len(x), cfg.jobs))
    tau = mcfg.tau
    if cfg.score_monitor and mcfg.calibration == "clean-percentile":
        tau = calibrate_threshold(model, x, mcfg.percentile, mcfg, seed=cfg.seed, clean_explanation=clean_ig)
    masks: dict[str, np.ndarray] = {}
    if "masked-pgd(mute)" in cfg.methods:
        masks["masked-pgd(mute)"] = mute_masks(model, x, cfg, clean_ig if mcfg.xai_method == "ig" else None)
    if "masked-pgd(xunet)" in cfg.methods:
        if xunet is None:
            raise ValueError("masked-pgd(xunet) needs a trained X-UNet")
        masks["masked-pgd(xunet)"] = xunet_masks(xunet, x).astype(x.dtype)

    results = {}
    for method in cfg.methods:
        adv = run_attack(method, model, x, y, cfg, masks)
        stealth = np.concatenate(chunked(
            lambda s: stealth_scores(model, x[s], adv.x_adv[s], mcfg, clean_ig[s]), len(x), cfg.jobs))
        passed = np.full(len(x), np.nan)
        if cfg.score_monitor:
            own = _cat_explanations(chunked(lambda s: mcfg.explain(model, adv.x_adv[s]), len(x), cfg.jobs))
            passed = verdict_from_scores(cosine_similarity_batch(clean_ig, own), tau).passed
        mask = masks.get(method, np.ones_like(x))
        d_exp = explain_score(mask, clean_ig)
        mis = int(np.sum(adv.pred_after != y))
        t = adv.wall_time if cfg.timing == "wall" else float(adv.queries)
        results[method] = {
            "adv": adv, "accuracy": adv.accuracy, "time": t, "stealth": float(np.mean(stealth)),
            "pass_rate": float(np.mean(passed)), "delta_exp": float(np.mean(d_exp)),
            "speed": speed(mis, max(t, 1e-9)).value, "stealth_samples": stealth,
        }
        log.info("%s acc %.3f stealth %.3f pass %.3f", method, adv.accuracy, results[method]["stealth"],
                 results[method]["pass_rate"])

    vnorm = normalize_speeds({m: r["speed"] for m, r in results.items()})
    report = BenchmarkReport(notes={
        "tau": f"{tau:.6f}",
        "clean_accuracy": f"{float(np.mean(model.predict(x) == y)):.4f}",
        "samples": str(len(x)),
        "stealth": f"mean cosine similarity of {mcfg.xai_method} maps at the clean prediction",
        "pass_rate": "monitor verdicts, each input explained at its own prediction",
        "speed": f"misclassified per {'second' if cfg.timing == 'wall' else 'gradient query'}, "
                 "min-max normalised across methods inside balance",
    })
    for method, r in results.items():
        chash = config_hash({"method": method, "attack": asdict(cfg.attack), "monitor": asdict(mcfg),
                             "mute": asdict(cfg.mute), "weights": asdict(cfg.weights),
                             "sinifgsm": [cfg.sinifgsm_scales, cfg.sinifgsm_momentum], "timing": cfg.timing,
                             "context": context or {}})
        row = ReportRow(method, r["accuracy"], r["time"], r["stealth"], r["pass_rate"], r["delta_exp"],
                        balance([(r["stealth"], r["delta_exp"], vnorm[method])], cfg.weights), cfg.seed, chash,
                        {"speed": r["speed"], "speed_norm": vnorm[method], "stealth_samples": r["stealth_samples"],
                         "x_adv": r["adv"].x_adv})
        report.rows.append(row)
    return report


def summarize(reports: list[BenchmarkReport], weights: BalanceWeights | None = None) -> BenchmarkReport:
    """Average rows of several runs; balance is the mean over runs."""
    weights = weights or BalanceWeights()
    out = BenchmarkReport(notes={"runs": str(len(reports)), "seeds": ",".join(str(r.rows[0].seed) for r in reports)})
    for method in [r.method for r in reports[0].rows]:
        rows = [rep.row(method) for rep in reports]
        runs = [(r.stealth, r.delta_exp, r.extra["speed_norm"]) for r in rows]
        out.rows.append(ReportRow(
            method, float(np.mean([r.accuracy for r in rows])), float(np.mean([r.time for r in rows])),
            float(np.mean([r.stealth for r in rows])), float(np.mean([r.pass_rate for r in rows])),
            float(np.mean([r.delta_exp for r in rows])), balance(runs, weights), rows[0].seed, rows[0].config_hash))
    return out


# ---------------------------------------------------------------------------
# Desk-scale experiments
# ---------------------------------------------------------------------------

@dataclass
class DeskRun:
    model: ModelGraph
    train: Dataset
    test: Dataset
    clean_accuracy: float
    train_log: list


def desk_classifier(kind: str = "mnist", seed: int = 1, n_eval: int = 500, epochs: int | None = None) -> DeskRun:
    """Train the desk classifier used by the directional comparisons.

    ``mnist``: MLP on the scikit-learn digits in MNIST layout.
    ``cifar``: convnet on synthetic 3x32x32 blobs.
    """
    if kind == "mnist":
        ds = digits_dataset(seed)
        model = build_mlp(seed=seed)
        cfg = TrainConfig(epochs=epochs or 20, batch_size=50, lr=0.005, seed=seed)
    elif kind == "cifar":
        ds = synthetic_dataset("blobs", 1000 + n_eval, (3, 32, 32), seed=seed)
        model = build_convnet(seed=seed)
        cfg = TrainConfig(epochs=epochs or 5, batch_size=50, lr=0.01, seed=seed)
    else:
        raise ValueError(f"unknown desk dataset {kind!r}")
    train_ds, test_ds = ds.split_at(len(ds) - n_eval)
    rows = train_classifier(model, train_ds, cfg)
    model.requires_grad_(False)
    acc = float(np.mean(model.predict(test_ds.images) == test_ds.labels))
    return DeskRun(model, train_ds, test_ds, acc, rows)
