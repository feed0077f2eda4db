"""Attention masks from a random convex mix of LRP and IG attributions.

For every sample a weight ``a ~ U[0, 1)`` is drawn and ``b = 1 - a``; when
``a < thresh`` both are flipped.  The mask is::

    mix = 1 - (b * normalize01(lrp) + a * normalize01(ig))

so pixels the explanations agree are important receive small weights and the
attack is steered toward low-saliency regions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .explain import Explanation, normalize01
from .rng import Rng
from .tensor import ShapeError

PROVENANCES = ("mute", "xunet", "constant")


@dataclass
class MuteConfig:
    thresh: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.thresh <= 1.0:
            raise ValueError(f"thresh must be in [0, 1], got {self.thresh}")


@dataclass
class AttentionMask:
    values: np.ndarray
    provenance: str = "mute"
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown mask provenance {self.provenance!r}")
        v = np.asarray(self.values)
        if v.size and (np.nanmin(v) < 0.0 or np.nanmax(v) > 1.0 or not np.all(np.isfinite(v))):
            raise ValueError("attention mask values must lie in [0, 1]")

    @property
    def shape(self):
        return self.values.shape


def mix_weights(a, thresh: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    """Apply the conditional swap to drawn IG weights ``a``; returns (a, b)."""
    a = np.asarray(a, dtype=np.float64)
    b = 1.0 - a
    swap = a < thresh
    return np.where(swap, 1.0 - a, a), np.where(swap, 1.0 - b, b)


def draw_weights(n: int, cfg: MuteConfig, rng: Rng | None = None, indices=None) -> np.ndarray:
    """Raw ``a`` draws, one per sample.

    With ``rng`` the draws come from that stream in order; otherwise sample
    ``i`` uses its own stream ``Rng(cfg.seed).spawn(indices[i])`` so a
    sample's weight does not depend on how the data is batched.
    """
    if rng is not None:
        return rng.uniform(n)
    indices = np.arange(n) if indices is None else np.asarray(indices)
    root = Rng(cfg.seed)
    return np.array([root.spawn(int(i)).uniform() for i in indices], dtype=np.float64)


def mute(lrp, ig, cfg: MuteConfig | None = None, rng: Rng | None = None, indices=None) -> AttentionMask:
    """Mix LRP and IG attributions (batched, first axis = sample) into a mask."""
    cfg = cfg or MuteConfig()
    lrp_v = lrp.attribution if isinstance(lrp, Explanation) else np.asarray(lrp)
    ig_v = ig.attribution if isinstance(ig, Explanation) else np.asarray(ig)
    if lrp_v.shape != ig_v.shape:
        raise ShapeError(f"mute: LRP shape {lrp_v.shape} does not match IG shape {ig_v.shape}")
    n = len(lrp_v)
    drawn = draw_weights(n, cfg, rng, indices)
    a, b = mix_weights(drawn, cfg.thresh)
    bshape = (n,) + (1,) * (lrp_v.ndim - 1)
    combined = b.reshape(bshape) * normalize01(lrp_v) + a.reshape(bshape) * normalize01(ig_v)
    mix = np.clip(1.0 - combined, 0.0, 1.0)
    return AttentionMask(mix, "mute", {"a": a, "b": b, "drawn": drawn, "thresh": cfg.thresh})


def constant_mask(shape, value: float) -> AttentionMask:
    if not 0.0 <= value <= 1.0:
        raise ValueError(f"constant mask value must be in [0, 1], got {value}")
    return AttentionMask(np.full(shape, float(value)), "constant", {"value": value})
