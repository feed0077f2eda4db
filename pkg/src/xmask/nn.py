"""Layer library and the three model builders (MLP, convnet, X-UNet)."""

from __future__ import annotations

import contextlib
import copy
import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .rng import Rng
from .tensor import ShapeError, Tensor

LAYER_KINDS = ("dense", "conv2d", "deconv2d", "maxpool2d", "relu", "slu", "sigmoid", "flatten", "skip-concat")
PARAM_KINDS = ("dense", "conv2d", "deconv2d")


@dataclass
class LayerSpec:
    """One layer of a sequential graph.

    Any layer may carry ``save_as`` in ``params`` to stash its output for a
    later ``skip-concat`` layer naming it as ``source``.
    """

    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": _jsonable(self.params)}

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        params = dict(d.get("params", {}))
        if "kernel" in params:
            params["kernel"] = tuple(params["kernel"])
        return cls(d["kind"], params)


def _jsonable(params: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in params.items()}


# ---------------------------------------------------------------------------
# Activation and initialisation
# ---------------------------------------------------------------------------

def slu(x: Tensor, a: float = 0.5) -> Tensor:
    """max(0, x) + a*sin(x), with the ReLU part's derivative at 0 taken as 0."""
    if not np.isfinite(a):
        raise ValueError(f"SLU coefficient must be finite, got {a}")
    return T.relu(x) + T.sin(x) * float(a)


def slu_np(x: np.ndarray, a: float = 0.5) -> np.ndarray:
    return np.maximum(0.0, x) + a * np.sin(x)


def init_variance(in_c: int, out_c: int, kernel=(1, 1)) -> float:
    """1 / (((in_c + out_c) / 2) * kh * kw).  Dense layers use a 1x1 kernel."""
    kh, kw = kernel
    if min(in_c, out_c, kh, kw) < 1:
        raise ValueError(f"channels and kernel sizes must be >= 1, got {(in_c, out_c, kh, kw)}")
    return 1.0 / (((in_c + out_c) / 2.0) * kh * kw)


def init_conv(in_c: int, out_c: int, kernel, rng: Rng, transposed: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Zero-mean normal weights with :func:`init_variance` and zero biases.

    Layout is (out_c, in_c, kh, kw), or (in_c, out_c, kh, kw) when ``transposed``.
    """
    kh, kw = kernel
    std = np.sqrt(init_variance(in_c, out_c, kernel))
    shape = (in_c, out_c, kh, kw) if transposed else (out_c, in_c, kh, kw)
    return rng.normal(shape, std=std), np.zeros(out_c)


def init_dense(n_in: int, n_out: int, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
    std = np.sqrt(init_variance(n_in, n_out))
    return rng.normal((n_in, n_out), std=std), np.zeros(n_out)


# ---------------------------------------------------------------------------
# Graph
# ---------------------------------------------------------------------------

def _out_shape(spec: LayerSpec, shape: tuple, stash: dict) -> tuple:
    p = spec.params
    k = spec.kind
    if k == "dense":
        if len(shape) != 1 or shape[0] != p["in_features"]:
            raise ShapeError(f"dense expects ({p['in_features']},), got {shape}")
        return (p["out_features"],)
    if k in ("conv2d", "deconv2d"):
        if len(shape) != 3 or shape[0] != p["in_ch"]:
            raise ShapeError(f"{k} expects {p['in_ch']} input channels, got {shape}")
        kh, kw = p["kernel"]
        s = p.get("stride", 1)
        if k == "conv2d":
            pad = p.get("padding", 0)
            h = (shape[1] + 2 * pad - kh) // s + 1
            w = (shape[2] + 2 * pad - kw) // s + 1
        else:
            h = (shape[1] - 1) * s + kh
            w = (shape[2] - 1) * s + kw
        if h < 1 or w < 1:
            raise ShapeError(f"{k} produces empty output from {shape}")
        return (p["out_ch"], h, w)
    if k == "maxpool2d":
        kk = p.get("k", 2)
        if len(shape) != 3 or shape[1] % kk or shape[2] % kk:
            raise ShapeError(f"maxpool2d({kk}) cannot pool {shape}")
        return (shape[0], shape[1] // kk, shape[2] // kk)
    if k == "flatten":
        return (int(np.prod(shape)),)
    if k == "skip-concat":
        src = stash.get(p["source"])
        if src is None:
            raise ShapeError(f"skip-concat source {p['source']!r} not saved earlier")
        if len(src) != 3 or src[1:] != shape[1:]:
            raise ShapeError(f"skip-concat: {src} does not match {shape}")
        return (shape[0] + src[0],) + shape[1:]
    return shape


class ModelGraph:
    """A sequential network with optional skip concatenations.

    ``output`` is ``"logits"`` for classifiers and ``"mask"`` for X-UNet.
    """

    def __init__(self, kind: str, layers: list[LayerSpec], input_shape: tuple, output: str,
                 params: dict[str, Tensor] | None = None):
        self.kind = kind
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.output = output
        self.params: dict[str, Tensor] = params if params is not None else {}
        self.output_shape = self.infer_shapes()[-1]

    def infer_shapes(self) -> list[tuple]:
        shapes = [self.input_shape]
        stash: dict = {}
        for spec in self.layers:
            shapes.append(_out_shape(spec, shapes[-1], stash))
            if "save_as" in spec.params:
                stash[spec.params["save_as"]] = shapes[-1]
        return shapes

    def __repr__(self) -> str:
        return f"ModelGraph({self.kind}, {len(self.layers)} layers, in={self.input_shape}, out={self.output_shape})"

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def requires_grad_(self, flag: bool = True) -> "ModelGraph":
        for p in self.params.values():
            p.requires_grad = flag
        return self

    @contextlib.contextmanager
    def frozen(self):
        """Temporarily stop recording gradients for the parameters."""
        prev = [p.requires_grad for p in self.params.values()]
        self.requires_grad_(False)
        try:
            yield self
        finally:
            for p, flag in zip(self.params.values(), prev):
                p.requires_grad = flag

    def param_hash(self) -> str:
        h = hashlib.sha256()
        for name, p in self.params.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    def clone(self) -> "ModelGraph":
        params = {k: Tensor(v.data.copy(), requires_grad=v.requires_grad, dtype=v.dtype)
                  for k, v in self.params.items()}
        return ModelGraph(self.kind, copy.deepcopy(self.layers), self.input_shape, self.output, params)

    def astype(self, dtype) -> "ModelGraph":
        for p in self.params.values():
            p.data = p.data.astype(dtype)
        return self

    def _check_input(self, x: Tensor) -> None:
        if tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError(f"{self.kind} expects inputs (N, {', '.join(map(str, self.input_shape))}), got {x.shape}")

    def forward(self, x: Tensor) -> Tensor:
        self._check_input(x)
        stash: dict[str, Tensor] = {}
        h = x
        for i, spec in enumerate(self.layers):
            h = self._apply(i, spec, h, stash)
            if "save_as" in spec.params:
                stash[spec.params["save_as"]] = h
        return h

    def trace(self, x: np.ndarray) -> list[np.ndarray]:
        """Activations entering each layer, plus the final output, without recording."""
        with T.no_grad():
            self._check_input(T.as_tensor(x))
            acts = [np.asarray(x)]
            stash: dict[str, Tensor] = {}
            h = T.as_tensor(x)
            for i, spec in enumerate(self.layers):
                h = self._apply(i, spec, h, stash)
                if "save_as" in spec.params:
                    stash[spec.params["save_as"]] = h
                acts.append(h.data)
        return acts

    def _apply(self, i: int, spec: LayerSpec, h: Tensor, stash: dict) -> Tensor:
        k = spec.kind
        p = spec.params
        if k == "dense":
            return T.linear(h, self.params[f"{i}.weight"], self.params[f"{i}.bias"])
        if k == "conv2d":
            return T.conv2d(h, self.params[f"{i}.weight"], self.params[f"{i}.bias"],
                            p.get("stride", 1), p.get("padding", 0))
        if k == "deconv2d":
            return T.conv_transpose2d(h, self.params[f"{i}.weight"], self.params[f"{i}.bias"], p.get("stride", 2))
        if k == "maxpool2d":
            return T.maxpool2d(h, p.get("k", 2))
        if k == "relu":
            return T.relu(h)
        if k == "slu":
            return slu(h, p.get("a", 0.5))
        if k == "sigmoid":
            return T.sigmoid(h)
        if k == "flatten":
            return T.flatten(h)
        if k == "skip-concat":
            return T.concat([h, stash[p["source"]]], axis=1)
        raise ValueError(f"unknown layer kind {k!r}")

    def logits(self, x) -> np.ndarray:
        with T.no_grad():
            return self.forward(T.as_tensor(x)).data

    def predict(self, x, batch: int = 1000) -> np.ndarray:
        x = np.asarray(x)
        return np.concatenate([self.logits(x[i:i + batch]).argmax(axis=1) for i in range(0, len(x), batch)])


def input_gradient(model: ModelGraph, x: np.ndarray, objective) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of ``objective(model(x))`` with respect to ``x``; also returns the model output."""
    with model.frozen(), T.enable_grad():
        xt = Tensor(x, requires_grad=True)
        out = model(xt)
        (g,) = T.grad(objective(out), [xt])
    return g, out.data


def init_params(layers: list[LayerSpec], rng: Rng) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}
    for i, spec in enumerate(layers):
        p = spec.params
        if spec.kind == "dense":
            w, b = init_dense(p["in_features"], p["out_features"], rng)
        elif spec.kind == "conv2d":
            w, b = init_conv(p["in_ch"], p["out_ch"], p["kernel"], rng)
        elif spec.kind == "deconv2d":
            w, b = init_conv(p["in_ch"], p["out_ch"], p["kernel"], rng, transposed=True)
        else:
            continue
        params[f"{i}.weight"] = Tensor(w, requires_grad=True)
        params[f"{i}.bias"] = Tensor(b, requires_grad=True)
    return params


def _dense(n_in, n_out):
    return LayerSpec("dense", {"in_features": n_in, "out_features": n_out})


def _conv(cin, cout, k=3, pad=1, **extra):
    return LayerSpec("conv2d", {"in_ch": cin, "out_ch": cout, "kernel": (k, k), "stride": 1, "padding": pad, **extra})


def build_mlp(input_shape=(1, 28, 28), hidden=(256, 128), classes: int = 10, seed: int = 0) -> ModelGraph:
    layers = [LayerSpec("flatten")]
    n = int(np.prod(input_shape))
    for width in hidden:
        layers += [_dense(n, width), LayerSpec("relu")]
        n = width
    layers.append(_dense(n, classes))
    return ModelGraph("mlp", layers, input_shape, "logits", init_params(layers, Rng(seed)))


def build_convnet(input_shape=(3, 32, 32), classes: int = 10, widths=(16, 32, 64), hidden: int = 128,
                  seed: int = 0) -> ModelGraph:
    c, h, w = input_shape
    layers = []
    for width in widths:
        layers += [_conv(c, width), LayerSpec("relu"), LayerSpec("maxpool2d", {"k": 2})]
        c, h, w = width, h // 2, w // 2
    layers += [LayerSpec("flatten"), _dense(c * h * w, hidden), LayerSpec("relu"), _dense(hidden, classes)]
    return ModelGraph("convnet", layers, input_shape, "logits", init_params(layers, Rng(seed)))


def build_xunet(input_shape=(1, 28, 28), widths=(16, 32, 64), a: float = 0.5, seed: int = 0) -> ModelGraph:
    """Three-level UNet: conv+SLU+maxpool encoder, deconv+SLU decoder, skip
    concatenations and a 1x1 conv + sigmoid head producing a one-channel mask."""
    c, h, w = input_shape
    if h % 4 or w % 4:
        raise ShapeError(f"X-UNet needs spatial dims divisible by 4, got {(h, w)}")
    w1, w2, w3 = widths
    act = LayerSpec("slu", {"a": a})
    layers = [
        _conv(c, w1), LayerSpec("slu", {"a": a, "save_as": "enc1"}), LayerSpec("maxpool2d", {"k": 2}),
        _conv(w1, w2), LayerSpec("slu", {"a": a, "save_as": "enc2"}), LayerSpec("maxpool2d", {"k": 2}),
        _conv(w2, w3), copy.deepcopy(act),
        LayerSpec("deconv2d", {"in_ch": w3, "out_ch": w2, "kernel": (2, 2), "stride": 2}), copy.deepcopy(act),
        LayerSpec("skip-concat", {"source": "enc2"}),
        _conv(2 * w2, w2), copy.deepcopy(act),
        LayerSpec("deconv2d", {"in_ch": w2, "out_ch": w1, "kernel": (2, 2), "stride": 2}), copy.deepcopy(act),
        LayerSpec("skip-concat", {"source": "enc1"}),
        _conv(2 * w1, w1), copy.deepcopy(act),
        _conv(w1, 1, k=1, pad=0), LayerSpec("sigmoid"),
    ]
    return ModelGraph("xunet", layers, input_shape, "mask", init_params(layers, Rng(seed)))


def build_model(kind: str, input_shape, seed: int = 0, **kw) -> ModelGraph:
    builders = {"mlp": build_mlp, "convnet": build_convnet, "xunet": build_xunet}
    if kind not in builders:
        raise ValueError(f"unknown model kind {kind!r}; expected one of {sorted(builders)}")
    return builders[kind](input_shape=tuple(input_shape), seed=seed, **kw)
