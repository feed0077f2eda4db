"""Gradient attacks under an L-infinity budget on [0, 1] images.

All attacks are untargeted and ascend the cross-entropy of the true label.
Every iterate is projected onto the epsilon ball around the clean input and
then clipped to [0, 1].
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .nn import ModelGraph, input_gradient
from .rng import Rng
from .tensor import ShapeError, Tensor


@dataclass
class AttackConfig:
    epsilon: float = 0.2
    alpha: float = 0.05
    steps: int = 10
    random_start: bool = False
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.alpha <= self.epsilon:
            raise ValueError(f"need 0 < alpha <= epsilon, got alpha={self.alpha}, epsilon={self.epsilon}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AdvExample:
    x_adv: np.ndarray
    x_clean: np.ndarray
    true_label: np.ndarray
    pred_before: np.ndarray
    pred_after: np.ndarray
    iterations: int
    wall_time: float
    queries: int
    method: str = "pgd"

    @property
    def fooled(self) -> np.ndarray:
        return self.pred_after != self.true_label

    @property
    def accuracy(self) -> float:
        return float(np.mean(self.pred_after == self.true_label))


def ce_sum(labels):
    """Summed cross-entropy, so per-sample gradients do not shrink with batch size."""
    labels = np.asarray(labels)
    return lambda logits: T.neg(T.tsum(T.gather_rows(T.log_softmax(logits, 1), labels)))


def loss_gradient(model: ModelGraph, x: np.ndarray, labels) -> np.ndarray:
    g, _ = input_gradient(model, x, ce_sum(labels))
    return g


def project(x_new: np.ndarray, x_clean: np.ndarray, epsilon: float) -> np.ndarray:
    """Project onto the epsilon ball around ``x_clean``, then clip to [0, 1]."""
    eps = x_clean.dtype.type(epsilon)
    return np.clip(np.clip(x_new, x_clean - eps, x_clean + eps), 0, 1)


def _prepare(model: ModelGraph, x, labels):
    x = np.asarray(x, dtype=T.default_dtype())
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) != len(x):
        raise ShapeError(f"{len(x)} inputs but {len(labels)} labels")
    if x.size and (x.min() < 0 or x.max() > 1):
        raise ValueError("attack inputs must lie in [0, 1]")
    return x, labels


def _finish(model, x, labels, x_adv, steps, t0, queries, method) -> AdvExample:
    wall = time.perf_counter() - t0
    return AdvExample(x_adv, x, labels, model.predict(x), model.predict(x_adv), steps, wall, queries, method)


def fgsm(model: ModelGraph, x, labels, epsilon: float) -> AdvExample:
    t0 = time.perf_counter()
    x, labels = _prepare(model, x, labels)
    g = loss_gradient(model, x, labels)
    x_adv = np.clip(x + x.dtype.type(epsilon) * np.sign(g), 0, 1)
    return _finish(model, x, labels, x_adv, 1, t0, 1, "fgsm")


def masked_pgd(model: ModelGraph, x, labels, mask, cfg: AttackConfig) -> AdvExample:
    """PGD whose every step is gated elementwise by ``mask`` (None = ungated)."""
    t0 = time.perf_counter()
    x, labels = _prepare(model, x, labels)
    m = None
    if mask is not None:
        m = np.asarray(getattr(mask, "values", mask), dtype=x.dtype)
        if m.shape != x.shape:
            raise ShapeError(f"mask shape {m.shape} does not match input shape {x.shape}")
    alpha = x.dtype.type(cfg.alpha)
    x_adv = x.copy()
    if cfg.random_start:
        noise = ((Rng(cfg.seed).uniform(x.shape) * 2.0 - 1.0) * cfg.epsilon).astype(x.dtype)
        x_adv = project(x + (noise if m is None else m * noise), x, cfg.epsilon)
    for _ in range(cfg.steps):
        s = np.sign(loss_gradient(model, x_adv, labels))
        step = alpha * s if m is None else alpha * (m * s)
        x_adv = project(x_adv + step, x, cfg.epsilon)
    return _finish(model, x, labels, x_adv, cfg.steps, t0, cfg.steps, "pgd" if m is None else "masked-pgd")


def pgd(model: ModelGraph, x, labels, cfg: AttackConfig) -> AdvExample:
    return masked_pgd(model, x, labels, None, cfg)


def sinifgsm(model: ModelGraph, x, labels, cfg: AttackConfig, scales: int = 5, momentum: float = 1.0) -> AdvExample:
    """Scale-invariant Nesterov iterative FGSM.

    Each step looks ahead along the accumulated momentum, averages the loss
    gradient over the copies x/2**i (i < scales), L1-normalises it per sample
    and folds it into the momentum, whose sign drives the update.
    """
    if scales < 1:
        raise ValueError(f"scales must be >= 1, got {scales}")
    t0 = time.perf_counter()
    x, labels = _prepare(model, x, labels)
    alpha = x.dtype.type(cfg.alpha)
    mu = x.dtype.type(momentum)
    x_adv = x.copy()
    if cfg.random_start:
        noise = Rng(cfg.seed).uniform(x.shape) * 2.0 - 1.0
        x_adv = project(x + (cfg.epsilon * noise).astype(x.dtype), x, cfg.epsilon)
    acc = np.zeros_like(x)
    axes = tuple(range(1, x.ndim))
    for _ in range(cfg.steps):
        x_nes = x_adv + alpha * mu * acc
        g = np.zeros_like(x)
        for i in range(scales):
            scale = x.dtype.type(2.0 ** -i)
            g = g + loss_gradient(model, x_nes * scale, labels) * scale
        g = g / x.dtype.type(scales)
        norm = np.mean(np.abs(g), axis=axes, keepdims=True)
        acc = mu * acc + g / np.where(norm > 0, norm, 1).astype(x.dtype)
        x_adv = project(x_adv + alpha * np.sign(acc), x, cfg.epsilon)
    return _finish(model, x, labels, x_adv, cfg.steps, t0, cfg.steps * scales, "sinifgsm")


def unrolled_masked_pgd(model: ModelGraph, x, labels, mask: Tensor, cfg: AttackConfig, k: int = 3) -> Tensor:
    """``k`` masked PGD steps that stay differentiable with respect to ``mask``.

    The sign tensors are computed on the current iterate and treated as
    constants.  Clipping keeps its exact forward value; coordinates where it
    binds carry no gradient.
    """
    if k < 1:
        raise ValueError(f"unroll depth k must be >= 1, got {k}")
    x, labels = _prepare(model, x, labels)
    if mask.shape != x.shape:
        raise ShapeError(f"mask shape {mask.shape} does not match input shape {x.shape}")
    eps = x.dtype.type(cfg.epsilon)
    lo = np.maximum(x - eps, 0)
    hi = np.minimum(x + eps, 1)
    cur = Tensor(x)
    for _ in range(k):
        s = np.sign(loss_gradient(model, cur.data, labels))
        cur = T.clamp_to(cur + T.mul(mask, Tensor(s)) * float(cfg.alpha), lo, hi)
    return cur
