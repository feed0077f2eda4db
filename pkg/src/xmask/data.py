"""Dataset loaders, checkpoints and image/tensor export.

Formats
-------
IDX (MNIST)
    big-endian; ``00 00 08 03`` + u32 N, H, W + N*H*W u8 pixels for images,
    ``00 00 08 01`` + u32 N + N u8 labels for labels.
CIFAR-10 binary
    records of 3073 bytes: label byte, then 1024 R, 1024 G, 1024 B bytes.
Checkpoint ``XMK1``
    4 magic bytes, u32 little-endian metadata length n, n bytes of JSON
    metadata, then every parameter as little-endian float32 in metadata order.
Tensor ``XMT1``
    4 magic bytes, u32 ndim, ndim * u32 dims (all little-endian), float32 data.
PGM
    binary P5, maxval 255, byte = floor(v * 255 + 0.5).
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import LayerSpec, ModelGraph, PARAM_KINDS
from .rng import Rng
from .tensor import Tensor

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801
CIFAR_RECORD = 3073
CKPT_MAGIC = b"XMK1"
CKPT_VERSION = 1
TENSOR_MAGIC = b"XMT1"


class FormatError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    name: str = "dataset"
    split: str = "train"
    classes: int = 10

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.images.ndim != 4:
            raise ValueError(f"images must be (N, C, H, W), got {self.images.shape}")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise ValueError("pixel values must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def shape(self) -> tuple:
        return self.images.shape[1:]

    def subset(self, idx, split: str | None = None) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.name, split or self.split, self.classes)

    def split_at(self, n: int) -> tuple["Dataset", "Dataset"]:
        return self.subset(slice(0, n), "train"), self.subset(slice(n, None), "test")


# ---------------------------------------------------------------------------
# IDX
# ---------------------------------------------------------------------------

def _read(path) -> bytes:
    with open(path, "rb") as f:
        return f.read()


def _idx_header(buf: bytes, path, magic: int, ndim: int) -> tuple[int, ...]:
    if len(buf) < 4 + 4 * ndim:
        raise FormatError(f"{path}: truncated IDX header ({len(buf)} bytes)")
    got = struct.unpack(">I", buf[:4])[0]
    if got != magic:
        raise FormatError(f"{path}: bad IDX magic 0x{got:08x}, expected 0x{magic:08x}")
    return struct.unpack(f">{ndim}I", buf[4:4 + 4 * ndim])


def load_idx(images_path, labels_path, name: str = "mnist", split: str = "train") -> Dataset:
    ibuf = _read(images_path)
    n, h, w = _idx_header(ibuf, images_path, IDX_IMAGES, 3)
    body = ibuf[16:]
    if len(body) != n * h * w:
        raise FormatError(f"{images_path}: expected {n * h * w} pixel bytes, found {len(body)}")
    lbuf = _read(labels_path)
    (nl,) = _idx_header(lbuf, labels_path, IDX_LABELS, 1)
    if len(lbuf) - 8 != nl:
        raise FormatError(f"{labels_path}: expected {nl} label bytes, found {len(lbuf) - 8}")
    if nl != n:
        raise FormatError(f"image count {n} does not match label count {nl}")
    pixels = np.frombuffer(body, dtype=np.uint8).reshape(n, 1, h, w)
    labels = np.frombuffer(lbuf, dtype=np.uint8, offset=8).astype(np.int64)
    classes = max(10, int(labels.max()) + 1) if n else 10
    return Dataset((pixels / 255.0).astype(T.default_dtype()), labels, name, split, classes)


def to_bytes(images: np.ndarray) -> np.ndarray:
    return np.floor(np.asarray(images, dtype=np.float64) * 255.0 + 0.5).astype(np.uint8)


def write_idx(ds: Dataset, images_path, labels_path) -> None:
    n, c, h, w = ds.images.shape
    if c != 1:
        raise ValueError(f"IDX images must have one channel, got {c}")
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES, n, h, w))
        f.write(to_bytes(ds.images).tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS, n))
        f.write(np.asarray(ds.labels, dtype=np.uint8).tobytes())


# ---------------------------------------------------------------------------
# CIFAR-10 binary
# ---------------------------------------------------------------------------

def load_cifar10(paths, name: str = "cifar10", split: str = "train") -> Dataset:
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    images, labels = [], []
    for path in paths:
        buf = _read(path)
        if len(buf) == 0 or len(buf) % CIFAR_RECORD:
            raise FormatError(f"{path}: length {len(buf)} is not a positive multiple of {CIFAR_RECORD}")
        rec = np.frombuffer(buf, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        if rec[:, 0].max() >= 10:
            raise FormatError(f"{path}: label {int(rec[:, 0].max())} out of range [0, 10)")
        labels.append(rec[:, 0].astype(np.int64))
        images.append(rec[:, 1:].reshape(-1, 3, 32, 32))
    pixels = np.concatenate(images)
    return Dataset((pixels / 255.0).astype(T.default_dtype()), np.concatenate(labels), name, split, 10)


def write_cifar10(ds: Dataset, path) -> None:
    if ds.images.shape[1:] != (3, 32, 32):
        raise ValueError(f"CIFAR-10 records need 3x32x32 images, got {ds.images.shape[1:]}")
    rec = np.concatenate([np.asarray(ds.labels, dtype=np.uint8)[:, None],
                          to_bytes(ds.images).reshape(len(ds), -1)], axis=1)
    with open(path, "wb") as f:
        f.write(rec.tobytes())


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------

def synthetic_dataset(kind: str = "blobs", n: int = 1000, shape=(1, 28, 28), classes: int = 10,
                      seed: int = 0, noise: float = 0.05) -> Dataset:
    """Separable synthetic images with balanced labels.

    ``bars``: one horizontal or vertical stroke whose row/column encodes the
    class.  ``blobs``: two Gaussian spots whose positions encode the class.
    Every sample gets position jitter, random intensity and uniform noise.
    Colour images additionally tint each class differently.
    """
    if n < classes:
        raise ValueError(f"need n >= classes, got n={n}, classes={classes}")
    c, h, w = shape
    rng = Rng(seed)
    labels = (np.arange(n) % classes)[rng.permutation(n)]
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    jitter = (rng.uniform((n, 2)) - 0.5) * 0.12 * min(h, w)
    intensity = 0.7 + 0.3 * rng.uniform(n)
    if kind == "bars":
        half = (classes + 1) // 2
        slot = labels % half
        pos = (slot + 1) * h / (half + 1)
        horizontal = labels < half
        coord = np.where(horizontal[:, None, None], yy[None], xx[None])
        centre = (pos + jitter[:, 0])[:, None, None]
        stroke = np.exp(-0.5 * ((coord - centre) / 1.2) ** 2)
        along = np.where(horizontal[:, None, None], xx[None], yy[None])
        extent = (np.abs(along - (w - 1) / 2 - jitter[:, 1][:, None, None]) < 0.35 * w).astype(float)
        img = stroke * extent
    elif kind == "blobs":
        ang = 2 * np.pi * labels / classes
        r = 0.28 * min(h, w)
        cy = h / 2 + r * np.sin(ang) + jitter[:, 0]
        cx = w / 2 + r * np.cos(ang) + jitter[:, 1]
        # a second, smaller spot on the opposite side, rotated by a class-dependent angle
        ang2 = ang + np.pi + 0.6 * (labels % 3 - 1)
        cy2 = h / 2 + 0.6 * r * np.sin(ang2) + jitter[:, 1]
        cx2 = w / 2 + 0.6 * r * np.cos(ang2) + jitter[:, 0]
        s = 0.1 * min(h, w)
        img = np.exp(-((yy[None] - cy[:, None, None]) ** 2 + (xx[None] - cx[:, None, None]) ** 2) / (2 * s * s))
        img = img + 0.7 * np.exp(-((yy[None] - cy2[:, None, None]) ** 2 + (xx[None] - cx2[:, None, None]) ** 2)
                                 / (2 * (0.7 * s) ** 2))
    else:
        raise ValueError(f"unknown synthetic kind {kind!r}; expected 'blobs' or 'bars'")
    img = img * intensity[:, None, None]
    imgs = np.repeat(img[:, None], c, axis=1)
    if c > 1:
        tint = 0.4 + 0.6 * np.stack([np.cos(2 * np.pi * (labels / classes + k / c)) * 0.5 + 0.5 for k in range(c)], 1)
        imgs = imgs * tint[:, :, None, None]
    imgs = imgs + noise * rng.uniform(imgs.shape)
    imgs = np.clip(imgs, 0.0, 1.0)
    return Dataset(imgs.astype(T.default_dtype()), labels.astype(np.int64), f"synthetic-{kind}", "train", classes)


def digits_dataset(seed: int = 0) -> Dataset:
    """scikit-learn's bundled 8x8 handwritten digits in MNIST layout.

    Each digit is bilinearly upsampled to 20x20 and centred in a 28x28 frame,
    like MNIST's 20x20 box.  Order is shuffled with ``seed``.  Offline
    stand-in for MNIST (1797 samples).
    """
    from scipy import ndimage
    from sklearn.datasets import load_digits

    d = load_digits()
    up = np.stack([ndimage.zoom(im / 16.0, 2.5, order=1) for im in d.images])
    imgs = np.zeros((len(up), 1, 28, 28))
    imgs[:, 0, 4:24, 4:24] = np.clip(up, 0.0, 1.0)
    order = Rng(seed).permutation(len(imgs))
    return Dataset(imgs[order].astype(T.default_dtype()), d.target[order].astype(np.int64), "digits", "train", 10)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def _expected_params(layers: list[LayerSpec]) -> list[str]:
    names = []
    for i, spec in enumerate(layers):
        if spec.kind in PARAM_KINDS:
            names += [f"{i}.weight", f"{i}.bias"]
    return names


def save_checkpoint(model: ModelGraph, path) -> None:
    meta = {
        "version": CKPT_VERSION,
        "kind": model.kind,
        "input_shape": list(model.input_shape),
        "output": model.output,
        "float_mode": T.get_float_mode(),
        "layers": [s.to_dict() for s in model.layers],
        "params": [{"name": k, "shape": list(v.shape)} for k, v in model.params.items()],
    }
    blob = json.dumps(meta, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for p in model.params.values():
            f.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())


def load_checkpoint(path) -> ModelGraph:
    buf = _read(path)
    if buf[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic {buf[:4]!r}, expected {CKPT_MAGIC!r}")
    if len(buf) < 8:
        raise FormatError(f"{path}: truncated checkpoint header")
    (n,) = struct.unpack("<I", buf[4:8])
    if len(buf) < 8 + n:
        raise FormatError(f"{path}: metadata needs {n} bytes, only {len(buf) - 8} present")
    try:
        meta = json.loads(buf[8:8 + n].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable checkpoint metadata: {exc}") from exc
    if meta.get("version") != CKPT_VERSION:
        raise FormatError(f"{path}: checkpoint version {meta.get('version')} unsupported (expected {CKPT_VERSION})")
    try:
        layers = [LayerSpec.from_dict(d) for d in meta["layers"]]
        names = [p["name"] for p in meta["params"]]
    except (KeyError, TypeError, ValueError, AttributeError) as exc:
        raise FormatError(f"{path}: malformed checkpoint metadata: {exc!r}") from exc
    expected = _expected_params(layers)
    if names != expected:
        raise FormatError(f"{path}: metadata lists {len(names)} parameter arrays but its "
                          f"{len(layers)} layers need {len(expected)}")
    need = sum(4 * int(np.prod(p["shape"])) for p in meta["params"])
    payload = buf[8 + n:]
    if len(payload) != need:
        raise FormatError(f"{path}: parameter payload is {len(payload)} bytes, expected {need}")
    params, off = {}, 0
    for p in meta["params"]:
        count = int(np.prod(p["shape"]))
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=off).reshape(p["shape"])
        off += 4 * count
        params[p["name"]] = Tensor(arr.astype(T.default_dtype()), requires_grad=True)
    model = ModelGraph(meta["kind"], layers, tuple(meta["input_shape"]), meta["output"], params)
    _check_param_shapes(model, path)
    return model


def _check_param_shapes(model: ModelGraph, path) -> None:
    for i, spec in enumerate(model.layers):
        p = spec.params
        if spec.kind == "dense":
            want = (p["in_features"], p["out_features"])
        elif spec.kind == "conv2d":
            want = (p["out_ch"], p["in_ch"]) + tuple(p["kernel"])
        elif spec.kind == "deconv2d":
            want = (p["in_ch"], p["out_ch"]) + tuple(p["kernel"])
        else:
            continue
        got = model.params[f"{i}.weight"].shape
        if got != want:
            raise FormatError(f"{path}: layer {i} weight has shape {got}, metadata implies {want}")
        if model.params[f"{i}.bias"].shape != (want[1] if spec.kind != "conv2d" else want[0],):
            raise FormatError(f"{path}: layer {i} bias shape {model.params[f'{i}.bias'].shape} is inconsistent")


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------

def pgm_bytes(img) -> bytes:
    a = np.asarray(img, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"PGM export needs a 2-D array, got shape {a.shape}")
    if not np.all(np.isfinite(a)) or a.min() < 0 or a.max() > 1:
        raise ValueError("PGM export needs values in [0, 1]")
    h, w = a.shape
    return f"P5\n{w} {h}\n255\n".encode() + to_bytes(a).tobytes()


def export_pgm(img, path) -> None:
    data = pgm_bytes(img)
    with open(path, "wb") as f:
        f.write(data)


def read_pgm(path) -> np.ndarray:
    buf = _read(path)
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PGM header")
        tokens.append(buf[start:pos])
    if tokens[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM")
    try:
        w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError as exc:
        raise FormatError(f"{path}: malformed PGM header: {exc}") from exc
    if maxval != 255:
        raise FormatError(f"{path}: maxval {maxval} unsupported (expected 255)")
    body = buf[pos + 1:]
    if len(body) != w * h:
        raise FormatError(f"{path}: expected {w * h} pixel bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w)


def save_tensor(arr, path) -> None:
    a = np.asarray(arr)
    with open(path, "wb") as f:
        f.write(TENSOR_MAGIC)
        f.write(struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape))
        f.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def load_tensor(path) -> np.ndarray:
    buf = _read(path)
    if buf[:4] != TENSOR_MAGIC:
        raise FormatError(f"{path}: bad tensor magic {buf[:4]!r}")
    if len(buf) < 8 or len(buf) < 8 + 4 * struct.unpack("<I", buf[4:8])[0]:
        raise FormatError(f"{path}: truncated tensor header")
    (ndim,) = struct.unpack("<I", buf[4:8])
    shape = struct.unpack(f"<{ndim}I", buf[8:8 + 4 * ndim])
    body = buf[8 + 4 * ndim:]
    need = 4 * int(np.prod(shape))
    if len(body) != need:
        raise FormatError(f"{path}: tensor payload is {len(body)} bytes, expected {need}")
    return np.frombuffer(body, dtype="<f4").reshape(shape).copy()
