"""Pixelwise attribution: gradient saliency, Integrated Gradients and epsilon-LRP.

All explainers work on batches ``x`` of shape (N, C, H, W) and return an
:class:`Explanation` whose attribution has the same shape.  Targets default
to each sample's predicted class.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .nn import ModelGraph, input_gradient
from .tensor import ShapeError

METHODS = ("gradient", "ig", "lrp")


@dataclass
class Explanation:
    attribution: np.ndarray
    method: str
    target: np.ndarray
    metadata: dict = field(default_factory=dict)

    @property
    def shape(self):
        return self.attribution.shape

    def __getitem__(self, idx) -> "Explanation":
        idx = np.atleast_1d(np.arange(len(self.target))[idx])
        return Explanation(self.attribution[idx], self.method, self.target[idx], dict(self.metadata))


def _targets(model: ModelGraph, x: np.ndarray, target) -> np.ndarray:
    if target is None:
        return model.predict(x)
    t = np.broadcast_to(np.asarray(target, dtype=np.int64), (len(x),))
    return np.array(t)


def _target_logit_sum(target: np.ndarray):
    return lambda logits: T.tsum(T.gather_rows(logits, target))


def gradient_saliency(model: ModelGraph, x, target=None) -> Explanation:
    """Plain input gradient of the target logit.  Diagnostic aid only."""
    x = np.asarray(x, dtype=T.default_dtype())
    tgt = _targets(model, x, target)
    g, _ = input_gradient(model, x, _target_logit_sum(tgt))
    return Explanation(g, "gradient", tgt)


def integrated_gradients(model: ModelGraph, x, target=None, baseline=None, steps: int = 64) -> Explanation:
    """Right-Riemann Integrated Gradients of the target logit.

    attr_i = (x_i - b_i) * mean_{k=1..m} dF/dx_i at b + (k/m)(x - b).
    """
    x = np.asarray(x, dtype=T.default_dtype())
    baseline = np.zeros_like(x) if baseline is None else np.asarray(baseline, dtype=x.dtype)
    if baseline.shape != x.shape:
        raise ShapeError(f"baseline shape {baseline.shape} does not match input {x.shape}")
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    tgt = _targets(model, x, target)
    objective = _target_logit_sum(tgt)
    diff = x - baseline
    total = np.zeros(x.shape, dtype=np.float64)
    comp = np.zeros_like(total)  # Kahan compensation: keeps the m-term sum at working precision
    for k in range(1, steps + 1):
        g, _ = input_gradient(model, baseline + (k / steps) * diff, objective)
        y = g - comp
        t = total + y
        comp = (t - total) - y
        total = t
    attr = (diff * (total / steps)).astype(x.dtype)
    return Explanation(attr, "ig", tgt, {"steps": steps})


def lrp_epsilon(model: ModelGraph, x, target=None, eps: float = 1e-6) -> Explanation:
    """Epsilon-rule LRP starting from the target logit.

    Denominators exclude biases, so relevance is conserved layer to layer up
    to the epsilon absorption.  Max-pooling routes relevance to each window's
    argmax.
    """
    if eps <= 0:
        raise ValueError(f"eps must be > 0, got {eps}")
    x = np.asarray(x, dtype=T.default_dtype())
    for spec in model.layers:
        if spec.kind not in ("dense", "conv2d", "relu", "maxpool2d", "flatten"):
            raise ValueError(f"LRP has no rule for layer kind {spec.kind!r}")
    acts = model.trace(x)
    tgt = _targets(model, x, target)
    logits = acts[-1]
    rows = np.arange(len(x))
    rel = np.zeros_like(logits)
    rel[rows, tgt] = logits[rows, tgt]
    for i in reversed(range(len(model.layers))):
        spec = model.layers[i]
        a = acts[i]
        if spec.kind in ("relu",):
            continue
        if spec.kind == "flatten":
            rel = rel.reshape(a.shape)
        elif spec.kind == "maxpool2d":
            k = spec.params.get("k", 2)
            _, onehot = T.maxpool_argmax(a, k)
            rel = T.unpool(rel, onehot, k)
        elif spec.kind == "dense":
            w = model.params[f"{i}.weight"].data
            s = rel / _stabilize(a @ w, eps)
            rel = a * (s @ w.T)
        elif spec.kind == "conv2d":
            w = model.params[f"{i}.weight"].data
            stride, pad = spec.params.get("stride", 1), spec.params.get("padding", 0)
            z, _ = T.conv2d_forward(a, w, stride, pad)
            s = rel / _stabilize(z, eps)
            rel = a * T.conv2d_input_grad(s, w, a.shape, stride, pad)
    return Explanation(rel.astype(x.dtype), "lrp", tgt, {"eps": eps})


def _stabilize(z: np.ndarray, eps: float) -> np.ndarray:
    return z + eps * np.where(z >= 0, 1.0, -1.0).astype(z.dtype)


def explain(model: ModelGraph, x, method: str = "ig", target=None, **kw) -> Explanation:
    if method == "ig":
        return integrated_gradients(model, x, target, **kw)
    if method == "lrp":
        return lrp_epsilon(model, x, target, **kw)
    if method == "gradient":
        return gradient_saliency(model, x, target)
    raise ValueError(f"unknown explanation method {method!r}; expected one of {METHODS}")


def normalize01(e) -> np.ndarray:
    """Per-sample min-max scaling to [0, 1].  Constant samples map to 0.5.

    Accepts an :class:`Explanation` or an array whose first axis is the batch.
    """
    v = np.asarray(e.attribution if isinstance(e, Explanation) else e, dtype=np.float64)
    flat = v.reshape(len(v), -1)
    lo = flat.min(axis=1, keepdims=True)
    span = flat.max(axis=1, keepdims=True) - lo
    const = span == 0
    out = np.where(const, 0.5, (flat - lo) / np.where(const, 1.0, span))
    return out.reshape(v.shape)


class ExplanationCache:
    """Reuse explanations per key, recomputing after ``refresh_every`` queries.

    ``refresh_every=0`` never recomputes.
    """

    def __init__(self, refresh_every: int = 0):
        self.refresh_every = refresh_every
        self._store: dict = {}
        self.hits = 0
        self.misses = 0

    def get(self, key, compute):
        entry = self._store.get(key)
        if entry is not None and (self.refresh_every == 0 or entry[1] < self.refresh_every):
            entry[1] += 1
            self.hits += 1
            return entry[0]
        value = compute()
        self._store[key] = [value, 1]
        self.misses += 1
        return value
