"""Classifier training and self-supervised X-UNet mask training."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .attacks import AttackConfig, masked_pgd, pgd, unrolled_masked_pgd
from .data import Dataset
from .explain import ExplanationCache, integrated_gradients, lrp_epsilon
from .monitor import cosine_similarity_batch
from .mute import MuteConfig, mute
from .nn import ModelGraph
from .rng import Rng
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass
class LossWeights:
    stealth: float = 1.0
    mask: float = 1.0
    accuracy: float = 1.0

    def __post_init__(self):
        w = (self.stealth, self.mask, self.accuracy)
        if min(w) < 0 or not any(w):
            raise ValueError(f"loss weights must be >= 0 and not all zero, got {w}")


@dataclass
class TrainConfig:
    epochs: int = 5
    batch_size: int = 50
    lr: float = 0.01
    optimizer: str = "sgd+momentum"
    momentum: float = 0.9
    seed: int = 0
    unroll: int = 3
    weights: LossWeights = field(default_factory=LossWeights)
    attack: AttackConfig = field(default_factory=AttackConfig)
    mute: MuteConfig = field(default_factory=MuteConfig)
    ig_steps: int = 32
    lrp_eps: float = 1e-6
    cache_every: int = 0
    val_size: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.lr < 0:
            raise ValueError(f"learning rate must be >= 0, got {self.lr}")
        if self.optimizer not in ("sgd", "sgd+momentum"):
            raise ValueError(f"optimizer must be 'sgd' or 'sgd+momentum', got {self.optimizer!r}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")


class SGD:
    def __init__(self, params: list[Tensor], lr: float, momentum: float = 0.0):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in params]

    def step(self, grads: list[np.ndarray]) -> None:
        lr = self.lr
        for p, v, g in zip(self.params, self.velocity, grads):
            if self.momentum:
                v *= self.momentum
                v += g
                g = v
            p.data = (p.data - p.data.dtype.type(lr) * g).astype(p.dtype)


def _optimizer(model: ModelGraph, cfg: TrainConfig) -> SGD:
    return SGD(model.parameters(), cfg.lr, cfg.momentum if cfg.optimizer == "sgd+momentum" else 0.0)


def _batches(n: int, size: int, rng: Rng):
    order = rng.permutation(n)
    for i in range(0, n, size):
        yield order[i:i + size]


def train_classifier(model: ModelGraph, ds: Dataset, cfg: TrainConfig) -> list[dict]:
    """Mini-batch cross-entropy training.  Returns one log row per epoch."""
    model.requires_grad_(True)
    opt = _optimizer(model, cfg)
    rng = Rng(cfg.seed)
    params = model.parameters()
    rows = []
    for epoch in range(cfg.epochs):
        losses, correct = [], 0
        for idx in _batches(len(ds), cfg.batch_size, rng):
            x = Tensor(ds.images[idx])
            logits = model(x)
            loss = T.cross_entropy(logits, ds.labels[idx])
            opt.step(T.grad(loss, params))
            losses.append(loss.item() * len(idx))
            correct += int((logits.data.argmax(axis=1) == ds.labels[idx]).sum())
        row = {"epoch": epoch + 1, "loss": sum(losses) / len(ds), "accuracy": correct / len(ds)}
        log.info("classifier epoch %d loss %.4f acc %.3f", row["epoch"], row["loss"], row["accuracy"])
        rows.append(row)
    return rows


def accuracy(model: ModelGraph, x, labels) -> float:
    return float(np.mean(model.predict(x) == np.asarray(labels)))


# ---------------------------------------------------------------------------
# X-UNet
# ---------------------------------------------------------------------------

def expand_mask(mask: Tensor, channels: int) -> Tensor:
    """Repeat a one-channel mask across ``channels`` input channels."""
    if mask.shape[1] == channels:
        return mask
    if mask.shape[1] != 1:
        raise T.ShapeError(f"cannot expand a {mask.shape[1]}-channel mask to {channels} channels")
    return T.concat([mask] * channels, 1)


def soft_accuracy(model: ModelGraph, x: Tensor, labels) -> Tensor:
    """Mean predicted probability of the true class."""
    return T.mean(T.exp(T.gather_rows(T.log_softmax(model(x), 1), labels)))


def xunet_loss(model_cls: ModelGraph, mask: Tensor, data, labels, mix, weights: LossWeights,
               attack: AttackConfig, unroll: int = 3) -> tuple[Tensor, dict]:
    """Three-term self-supervised loss on a batch.

    term1 = mean |adv_m - data| for the unrolled mask-gated attack,
    term2 = mean |mask - mix|,
    term3 = max(0, softacc(adv_m) - softacc(adv_vanilla)).
    """
    data = np.asarray(data, dtype=mask.dtype)
    mix = np.asarray(getattr(mix, "values", mix), dtype=mask.dtype)
    if mask.shape[1] == 1 and mix.shape[1] > 1:
        mix = mix.mean(axis=1, keepdims=True)
    if mix.shape != mask.shape or data.shape[0] != mask.shape[0] or data.shape[2:] != mask.shape[2:]:
        raise T.ShapeError(f"xunet_loss: mask {mask.shape}, mix {mix.shape}, data {data.shape} must agree")
    gate = expand_mask(mask, data.shape[1])
    with model_cls.frozen():
        adv_m = unrolled_masked_pgd(model_cls, data, labels, gate, attack, unroll)
        with T.no_grad():
            adv_v = unrolled_masked_pgd(model_cls, data, labels, T.ones(data.shape), attack, unroll)
            soft_v = soft_accuracy(model_cls, adv_v, labels).item()
        term1 = T.mean(T.absolute(adv_m - Tensor(data)))
        term2 = T.mean(T.absolute(mask - Tensor(mix)))
        term3 = T.relu(soft_accuracy(model_cls, adv_m, labels) + (-soft_v))
    total = term1 * weights.stealth + term2 * weights.mask + term3 * weights.accuracy
    return total, {"term1": term1.item(), "term2": term2.item(), "term3": term3.item(), "total": total.item()}


def mute_targets(model_cls: ModelGraph, images, cfg: TrainConfig, indices=None, chunk: int = 500) -> np.ndarray:
    """Alg. 1 masks for ``images`` with per-sample weight streams."""
    indices = np.arange(len(images)) if indices is None else np.asarray(indices)
    out = []
    for i in range(0, len(images), chunk):
        x = images[i:i + chunk]
        ig = integrated_gradients(model_cls, x, steps=cfg.ig_steps)
        lrp = lrp_epsilon(model_cls, x, eps=cfg.lrp_eps)
        out.append(mute(lrp, ig, cfg.mute, indices=indices[i:i + chunk]).values)
    return np.concatenate(out).astype(T.default_dtype())


def xunet_masks(xunet: ModelGraph, images, chunk: int = 200) -> np.ndarray:
    """X-UNet masks for ``images``, repeated across the input channels."""
    with T.no_grad():
        m = np.concatenate([xunet(Tensor(images[i:i + chunk])).data for i in range(0, len(images), chunk)])
    return np.repeat(m, images.shape[1], axis=1) if m.shape[1] != images.shape[1] else m


def train_xunet(xunet: ModelGraph, model_cls: ModelGraph, ds: Dataset, cfg: TrainConfig,
                val: Dataset | None = None) -> list[dict]:
    """Fit X-UNet masks with the three-term loss; the classifier stays frozen.

    Returns one row per epoch, preceded by an ``epoch`` 0 row holding the
    loss at initialisation.
    """
    if any(p.requires_grad for p in model_cls.parameters()):
        raise ValueError("train_xunet needs a frozen classifier: call model_cls.requires_grad_(False) first")
    xunet.requires_grad_(True)
    before = model_cls.param_hash()
    opt = _optimizer(xunet, cfg)
    rng = Rng(cfg.seed)
    params = xunet.parameters()
    cache = ExplanationCache(cfg.cache_every)
    mix_all = cache.get("train", lambda: mute_targets(model_cls, ds.images, cfg))
    rows = [{"epoch": 0, **xunet_eval_loss(xunet, model_cls, ds, mix_all, cfg)}]
    for epoch in range(cfg.epochs):
        mix_all = cache.get("train", lambda: mute_targets(model_cls, ds.images, cfg))
        sums = {"total": 0.0, "term1": 0.0, "term2": 0.0, "term3": 0.0}
        for idx in _batches(len(ds), cfg.batch_size, rng):
            mask = xunet(Tensor(ds.images[idx]))
            total, terms = xunet_loss(model_cls, mask, ds.images[idx], ds.labels[idx], mix_all[idx],
                                      cfg.weights, cfg.attack, cfg.unroll)
            opt.step(T.grad(total, params))
            for k in sums:
                sums[k] += terms[k] * len(idx)
        row = {"epoch": epoch + 1, **{k: v / len(ds) for k, v in sums.items()}}
        if val is not None and len(val):
            row.update(validate_xunet(xunet, model_cls, val, cfg))
        log.info("xunet epoch %d %s", epoch + 1, row)
        rows.append(row)
    if model_cls.param_hash() != before:
        raise RuntimeError("classifier parameters changed during X-UNet training")
    return rows


def xunet_eval_loss(xunet: ModelGraph, model_cls: ModelGraph, ds: Dataset, mix, cfg: TrainConfig) -> dict:
    """Dataset-mean loss terms without updating anything (same batching as training)."""
    sums = {"total": 0.0, "term1": 0.0, "term2": 0.0, "term3": 0.0}
    for i in range(0, len(ds), cfg.batch_size):
        idx = np.arange(i, min(i + cfg.batch_size, len(ds)))
        with T.no_grad():
            mask = xunet(Tensor(ds.images[idx]))
        _, terms = xunet_loss(model_cls, mask, ds.images[idx], ds.labels[idx], mix[idx],
                              cfg.weights, cfg.attack, cfg.unroll)
        for k in sums:
            sums[k] += terms[k] * len(idx)
    return {k: v / len(ds) for k, v in sums.items()}


def validate_xunet(xunet: ModelGraph, model_cls: ModelGraph, val: Dataset, cfg: TrainConfig) -> dict:
    """Mean IG stealth of the X-UNet-guided attack and its accuracy gap to vanilla PGD."""
    masks = xunet_masks(xunet, val.images)
    adv_m = masked_pgd(model_cls, val.images, val.labels, masks, cfg.attack)
    adv_v = pgd(model_cls, val.images, val.labels, cfg.attack)
    ref = integrated_gradients(model_cls, val.images, steps=cfg.ig_steps)
    cand = integrated_gradients(model_cls, adv_m.x_adv, steps=cfg.ig_steps)
    return {"val_stealth": float(np.mean(cosine_similarity_batch(ref, cand))),
            "val_dacc": adv_m.accuracy - adv_v.accuracy}


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
