"""Explanation-similarity safety monitor and the attack metric suite."""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .explain import Explanation, explain, normalize01
from .nn import ModelGraph
from .rng import Rng
from .tensor import ShapeError

NORM_FLOOR = 1e-12
CSV_COLUMNS = ("method", "accuracy", "time", "stealth", "pass_rate", "delta_exp", "balance", "seed", "config_hash")


def _values(e) -> np.ndarray:
    return np.asarray(e.attribution if isinstance(e, Explanation) else e, dtype=np.float64)


def cosine_similarity(a, b) -> float:
    """Cosine similarity of two arrays viewed as flat vectors.

    The denominator is floored at 1e-12; two all-zero inputs count as identical.
    """
    va, vb = _values(a).ravel(), _values(b).ravel()
    if va.shape != vb.shape:
        raise ShapeError(f"cosine_similarity: shape mismatch {_values(a).shape} vs {_values(b).shape}")
    na, nb = np.linalg.norm(va), np.linalg.norm(vb)
    if (na == 0 and nb == 0) or np.array_equal(va, vb):
        return 1.0
    return float(np.clip(va @ vb / max(na * nb, NORM_FLOOR), -1.0, 1.0))


def cosine_similarity_batch(a, b) -> np.ndarray:
    """Per-sample cosine similarity along the first axis."""
    va, vb = _values(a), _values(b)
    if va.shape != vb.shape:
        raise ShapeError(f"cosine_similarity: shape mismatch {va.shape} vs {vb.shape}")
    fa, fb = va.reshape(len(va), -1), vb.reshape(len(vb), -1)
    na, nb = np.linalg.norm(fa, axis=1), np.linalg.norm(fb, axis=1)
    sim = np.einsum("ij,ij->i", fa, fb) / np.maximum(na * nb, NORM_FLOOR)
    sim = np.where((na == 0) & (nb == 0), 1.0, sim)
    sim = np.where(np.all(fa == fb, axis=1), 1.0, sim)  # exact 1 despite roundoff
    return np.clip(sim, -1.0, 1.0)


# ---------------------------------------------------------------------------
# Monitor
# ---------------------------------------------------------------------------

@dataclass
class MonitorConfig:
    xai_method: str = "ig"
    tau: float = 0.9
    calibration: str = "clean-percentile"
    percentile: float = 5.0
    ig_steps: int = 64
    lrp_eps: float = 1e-6

    def __post_init__(self):
        if self.xai_method not in ("ig", "lrp"):
            raise ValueError(f"monitor xai_method must be 'ig' or 'lrp', got {self.xai_method!r}")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError(f"tau must be in [0, 1], got {self.tau}")
        if self.calibration not in ("fixed", "clean-percentile"):
            raise ValueError(f"calibration must be 'fixed' or 'clean-percentile', got {self.calibration!r}")
        if not 0.0 <= self.percentile <= 100.0:
            raise ValueError(f"percentile must be in [0, 100], got {self.percentile}")

    def explain(self, model: ModelGraph, x) -> Explanation:
        if self.xai_method == "ig":
            return explain(model, x, "ig", steps=self.ig_steps)
        return explain(model, x, "lrp", eps=self.lrp_eps)


@dataclass
class Verdict:
    passed: np.ndarray
    score: np.ndarray
    tau: float

    @property
    def pass_rate(self) -> float:
        return float(np.mean(self.passed))


def verdict_from_scores(scores, tau: float) -> Verdict:
    """Pass iff score >= tau.  Negative similarities count as 0, so tau = 0 passes everything."""
    scores = np.asarray(scores, dtype=np.float64)
    return Verdict(np.maximum(scores, 0.0) >= tau, scores, tau)


def monitor_verdict(model: ModelGraph, x_clean, x_candidate, cfg: MonitorConfig,
                    clean_explanation: Explanation | None = None) -> Verdict:
    """Pass a candidate iff its explanation stays cosine-close to the clean one.

    Each input is explained at its own predicted class.
    """
    x_clean = np.asarray(x_clean)
    x_candidate = np.asarray(x_candidate)
    if x_clean.shape != x_candidate.shape:
        raise ShapeError(f"monitor: clean {x_clean.shape} vs candidate {x_candidate.shape}")
    ref = clean_explanation if clean_explanation is not None else cfg.explain(model, x_clean)
    cand = cfg.explain(model, x_candidate)
    return verdict_from_scores(cosine_similarity_batch(ref, cand), cfg.tau)


def stealth_scores(model: ModelGraph, x_clean, x_adv, cfg: MonitorConfig,
                   clean_explanation: Explanation | None = None) -> np.ndarray:
    """Per-sample cosine similarity of clean and adversarial explanations.

    Both are explained at the clean input's predicted class, so the score
    measures how far the attribution map moved rather than whether the label
    flipped (the monitor verdict covers that).
    """
    ref = clean_explanation if clean_explanation is not None else cfg.explain(model, x_clean)
    if cfg.xai_method == "ig":
        cand = explain(model, x_adv, "ig", target=ref.target, steps=cfg.ig_steps)
    else:
        cand = explain(model, x_adv, "lrp", target=ref.target, eps=cfg.lrp_eps)
    return cosine_similarity_batch(ref, cand)


def renoise(x, seed: int = 0, amplitude: float = 1.0 / 255) -> np.ndarray:
    """Uniform noise in [-amplitude, amplitude], clipped back to [0, 1]."""
    x = np.asarray(x)
    noise = (Rng(seed).uniform(x.shape) * 2.0 - 1.0) * amplitude
    return np.clip(x + noise.astype(x.dtype), 0, 1)


def clean_pair_scores(model: ModelGraph, x_clean, cfg: MonitorConfig, seed: int = 0,
                      clean_explanation: Explanation | None = None) -> np.ndarray:
    ref = clean_explanation if clean_explanation is not None else cfg.explain(model, x_clean)
    return cosine_similarity_batch(ref, cfg.explain(model, renoise(x_clean, seed)))


def calibrate_threshold(model: ModelGraph, x_clean, percentile: float = 5.0, cfg: MonitorConfig | None = None,
                        seed: int = 0, clean_explanation: Explanation | None = None) -> float:
    """tau = ``percentile``-th percentile of clean vs re-noised similarities."""
    if len(x_clean) < 20:
        raise ValueError(f"calibration needs at least 20 clean samples, got {len(x_clean)}")
    cfg = cfg or MonitorConfig()
    scores = clean_pair_scores(model, x_clean, cfg, seed, clean_explanation)
    return float(np.clip(np.percentile(scores, percentile), 0.0, 1.0))


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

@dataclass
class SpeedStat:
    misclassified: int
    elapsed: float

    @property
    def value(self) -> float:
        return self.misclassified / self.elapsed


def speed(mis: int, t: float) -> SpeedStat:
    """Misclassifications per second."""
    if t <= 0:
        raise ValueError(f"elapsed time must be > 0, got {t}")
    if mis < 0:
        raise ValueError(f"misclassification count must be >= 0, got {mis}")
    return SpeedStat(int(mis), float(t))


def explain_score(mask, clean_explanation) -> np.ndarray:
    """Per-sample alignment of the mask's suppression with the clean saliency, in [0, 1].

    (1 + cos(1 - mask, normalize01(explanation))) / 2.
    """
    m = np.asarray(getattr(mask, "values", mask), dtype=np.float64)
    e = _values(clean_explanation)
    if m.shape != e.shape:
        raise ShapeError(f"explain_score: mask {m.shape} vs explanation {e.shape}")
    return (1.0 + cosine_similarity_batch(1.0 - m, normalize01(e))) / 2.0


@dataclass
class BalanceWeights:
    stealth: float = 1.0 / 3
    explain: float = 1.0 / 3
    speed: float = 1.0 / 3

    def __post_init__(self):
        w = (self.stealth, self.explain, self.speed)
        if min(w) < 0 or not any(w):
            raise ValueError(f"balance weights must be >= 0 and not all zero, got {w}")


def normalize_speeds(speeds: dict) -> dict:
    """Min-max scale speeds across methods.  Equal speeds map to 1 (or 0 if all zero)."""
    vals = np.array(list(speeds.values()), dtype=np.float64)
    lo, hi = vals.min(), vals.max()
    if hi == lo:
        return {k: (1.0 if hi > 0 else 0.0) for k in speeds}
    return {k: float((v - lo) / (hi - lo)) for k, v in speeds.items()}


def balance(runs, w: BalanceWeights | None = None) -> float:
    """Mean over runs of the weighted sum of (stealth, delta_exp, normalised speed)."""
    runs = list(runs)
    if not runs:
        raise ValueError("balance needs at least one run")
    w = w or BalanceWeights()
    return float(np.mean([w.stealth * s + w.explain * e + w.speed * v for s, e, v in runs]))


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


@dataclass
class ReportRow:
    method: str
    accuracy: float
    time: float
    stealth: float
    pass_rate: float
    delta_exp: float
    balance: float
    seed: int
    config_hash: str
    extra: dict = field(default_factory=dict)


@dataclass
class BenchmarkReport:
    rows: list[ReportRow] = field(default_factory=list)
    notes: dict = field(default_factory=dict)

    def row(self, method: str) -> ReportRow:
        for r in self.rows:
            if r.method == method:
                return r
        raise KeyError(method)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for r in self.rows:
            d = asdict(r)
            writer.writerow([_fmt(d[c]) for c in CSV_COLUMNS])
        return buf.getvalue()

    def to_text(self) -> str:
        head = f"{'Method':<20}{'Acc':>9}{'Time':>10}{'Stealth':>10}{'Pass':>9}{'dExp':>8}{'Balance':>9}"
        lines = [head, "-" * len(head)]
        for r in self.rows:
            lines.append(f"{r.method:<20}{100 * r.accuracy:>8.1f}%{r.time:>10.3f}{100 * r.stealth:>9.1f}%"
                         f"{100 * r.pass_rate:>8.1f}%{r.delta_exp:>8.3f}{r.balance:>9.3f}")
        for k, v in self.notes.items():
            lines.append(f"# {k}: {v}")
        return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)
