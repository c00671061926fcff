# engine/model.py
"""
Small image classifier split into a feature extractor and a linear head:

    f = extractor(x)            (b, d)
    z = f @ head_W.T + head_b   (b, classes)

Trained with mini-batch SGD on cross-entropy using hand-written backprop.
Weights are kept at float32 precision (stored in float64 arrays) so the
UNGW file round-trip is bit-exact.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Literal, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from tqdm import tqdm

from config import settings
from engine.errors import FormatError, InputDomainError, TrainingFailure
from engine.numerics import RngStream, softmax

log = logging.getLogger("train")

Activation = Literal["relu", "identity"]


# ============================================================
# Types
# ============================================================

@dataclass(frozen=True)
class Layer:
    kind: Literal["conv", "dense"]
    weight: np.ndarray      # conv: (out, in, k, k); dense: (out, in)
    bias: np.ndarray        # (out,)
    activation: Activation = "relu"
    stride: int = 1
    padding: int = 0


@dataclass(frozen=True)
class ClassifierModel:
    layers: Tuple[Layer, ...]
    head_W: np.ndarray      # (classes, d)
    head_b: np.ndarray      # (classes,)
    input_shape: Tuple[int, int, int]

    @property
    def classes(self) -> int:
        return int(self.head_W.shape[0])

    @property
    def d(self) -> int:
        return int(self.head_W.shape[1])

    def head(self, f: np.ndarray) -> np.ndarray:
        return np.asarray(f, dtype=np.float64) @ self.head_W.T + self.head_b


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray      # (n, c, h, w) in [0, 1]
    labels: np.ndarray      # (n,) int64
    name: str = "dataset"
    classes: int = 0

    def __post_init__(self) -> None:
        if self.images.ndim != 4:
            raise InputDomainError(f"images must be (n, c, h, w), got {self.images.shape}")
        if self.images.shape[0] != self.labels.shape[0]:
            raise InputDomainError("image/label count mismatch")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise InputDomainError("image values must lie in [0, 1]")
        if self.labels.size and self.labels.min() < 0:
            raise InputDomainError("negative label")
        if self.classes == 0:
            object.__setattr__(self, "classes", int(self.labels.max()) + 1 if self.labels.size else 0)
        elif self.labels.size and self.labels.max() >= self.classes:
            raise InputDomainError(f"label out of range [0, {self.classes})")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def subset(self, idx: np.ndarray, name: Optional[str] = None) -> "Dataset":
        return Dataset(
            images=self.images[idx],
            labels=self.labels[idx],
            name=name or self.name,
            classes=self.classes,
        )


@dataclass(frozen=True)
class ArchConfig:
    classes: int
    conv_channels: Tuple[int, ...] = (8, 16)
    kernel: int = 3
    stride: int = 2
    feature_dim: int = 64
    target_accuracy: float = 0.97


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    epochs: int = 30
    lr: float = 0.05
    momentum: float = 0.9
    batch_size: int = 64
    holdout_fraction: float = 0.2
    split_seed: Optional[int] = None    # held-out split; falls back to `seed`

    @property
    def holdout_seed(self) -> int:
        return self.seed if self.split_seed is None else self.split_seed


# ============================================================
# Layer math
# ============================================================

def _act(h: np.ndarray, activation: Activation) -> np.ndarray:
    return np.maximum(h, 0.0) if activation == "relu" else h


def _conv_windows(x: np.ndarray, k: int, stride: int, padding: int) -> np.ndarray:
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    return sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]


def _conv_forward(x: np.ndarray, layer: Layer) -> np.ndarray:
    k = layer.weight.shape[2]
    win = _conv_windows(x, k, layer.stride, layer.padding)
    out = np.einsum("bchwij,ocij->bohw", win, layer.weight, optimize=True)
    return out + layer.bias[None, :, None, None]


def _conv_backward(x: np.ndarray, layer: Layer, dout: np.ndarray):
    k = layer.weight.shape[2]
    s, p = layer.stride, layer.padding
    win = _conv_windows(x, k, s, p)
    dw = np.einsum("bchwij,bohw->ocij", win, dout, optimize=True)
    db = dout.sum(axis=(0, 2, 3))

    h, w = x.shape[2], x.shape[3]
    oh, ow = dout.shape[2], dout.shape[3]
    dxp = np.zeros((x.shape[0], x.shape[1], h + 2 * p, w + 2 * p))
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + s * oh:s, j:j + s * ow:s] += np.einsum(
                "bohw,oc->bchw", dout, layer.weight[:, :, i, j], optimize=True
            )
    return dxp[:, :, p:p + h, p:p + w], dw, db


def _check_input(model: ClassifierModel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4 or tuple(x.shape[1:]) != tuple(model.input_shape):
        raise InputDomainError(
            f"expected input (b, {', '.join(map(str, model.input_shape))}), got {x.shape}"
        )
    return x


def _extract(layers: Sequence[Layer], x: np.ndarray, cache: Optional[list] = None) -> np.ndarray:
    a = x
    for layer in layers:
        if layer.kind == "dense" and a.ndim > 2:
            a = a.reshape(a.shape[0], -1)
        if cache is not None:
            cache.append(a)
        h = _conv_forward(a, layer) if layer.kind == "conv" else a @ layer.weight.T + layer.bias
        if cache is not None:
            cache.append(h)
        a = _act(h, layer.activation)
    return a.reshape(a.shape[0], -1)


# ============================================================
# Forward API
# ============================================================

def forward_features(model: ClassifierModel, x: np.ndarray) -> np.ndarray:
    return _extract(model.layers, _check_input(model, x))


def forward_logits(model: ClassifierModel, x: np.ndarray) -> np.ndarray:
    return model.head(forward_features(model, x))


def forward_probs(model: ClassifierModel, x: np.ndarray) -> np.ndarray:
    return softmax(forward_logits(model, x))


def predict(model: ClassifierModel, x: np.ndarray, batch_size: int = 512) -> np.ndarray:
    out = [np.argmax(forward_logits(model, x[i:i + batch_size]), axis=1)
           for i in range(0, len(x), batch_size)]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def accuracy(model: ClassifierModel, dataset: Dataset) -> float:
    if len(dataset) == 0:
        return 0.0
    return float(np.mean(predict(model, dataset.images) == dataset.labels))


def parameter_count(model: ClassifierModel) -> int:
    n = sum(l.weight.size + l.bias.size for l in model.layers)
    return int(n + model.head_W.size + model.head_b.size)


# ============================================================
# Backprop
# ============================================================

def cross_entropy_grads(
    model: ClassifierModel, x: np.ndarray, y: np.ndarray
) -> Tuple[float, List[Tuple[np.ndarray, np.ndarray]]]:
    """
    Mean cross-entropy and its gradient for every (weight, bias) pair,
    extractor layers first, head last.
    """
    x = _check_input(model, x)
    y = np.asarray(y, dtype=np.int64)
    cache: list = []
    f = _extract(model.layers, x, cache)
    z = f @ model.head_W.T + model.head_b
    p = softmax(z)
    n = x.shape[0]
    loss = float(-np.mean(np.log(np.maximum(p[np.arange(n), y], 1e-300))))

    dz = p.copy()
    dz[np.arange(n), y] -= 1.0
    dz /= n
    grads: List[Tuple[np.ndarray, np.ndarray]] = [(dz.T @ f, dz.sum(axis=0))]
    da = dz @ model.head_W

    for idx in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[idx]
        a_in, h = cache[2 * idx], cache[2 * idx + 1]
        da = da.reshape(h.shape)
        dh = da * (h > 0) if layer.activation == "relu" else da
        if layer.kind == "conv":
            da, dw, db = _conv_backward(a_in, layer, dh)
        else:
            dw, db = dh.T @ a_in, dh.sum(axis=0)
            da = dh @ layer.weight
        grads.insert(0, (dw, db))
    return loss, grads


# ============================================================
# Construction / training
# ============================================================

def _storage_precision(a: np.ndarray) -> np.ndarray:
    out = np.asarray(a, dtype=np.float32).astype(np.float64)
    out.setflags(write=False)
    return out


def freeze(model: ClassifierModel) -> ClassifierModel:
    """Copy with float32-exact, read-only weights."""
    layers = tuple(
        Layer(l.kind, _storage_precision(l.weight), _storage_precision(l.bias),
              l.activation, l.stride, l.padding)
        for l in model.layers
    )
    return ClassifierModel(layers, _storage_precision(model.head_W),
                           _storage_precision(model.head_b), tuple(model.input_shape))


def init_model(
    input_shape: Tuple[int, int, int], arch: ArchConfig, seed: int
) -> ClassifierModel:
    """Scaled-uniform init by fan-in; writable float64 weights."""
    rng = RngStream(seed)

    def uni(fan_in: int, shape) -> np.ndarray:
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, shape)

    c, h, w = input_shape
    layers: List[Layer] = []
    ch = c
    for out_ch in arch.conv_channels:
        fan = ch * arch.kernel * arch.kernel
        layers.append(Layer("conv", uni(fan, (out_ch, ch, arch.kernel, arch.kernel)),
                            uni(fan, (out_ch,)), "relu", arch.stride, arch.kernel // 2))
        pad = arch.kernel // 2
        h = (h + 2 * pad - arch.kernel) // arch.stride + 1
        w = (w + 2 * pad - arch.kernel) // arch.stride + 1
        ch = out_ch

    flat = ch * h * w
    if arch.feature_dim > 0:
        layers.append(Layer("dense", uni(flat, (arch.feature_dim, flat)),
                            uni(flat, (arch.feature_dim,)), "relu"))
        d = arch.feature_dim
    else:
        d = flat
    return ClassifierModel(tuple(layers), uni(d, (arch.classes, d)),
                           uni(d, (arch.classes,)), tuple(input_shape))


def split_holdout(dataset: Dataset, fraction: float, seed: int) -> Tuple[Dataset, Dataset]:
    n = len(dataset)
    order = RngStream(seed).spawn(0x5917).permutation(n)
    n_hold = int(round(n * fraction))
    hold, train = order[:n_hold], order[n_hold:]
    return (dataset.subset(np.sort(train), f"{dataset.name}/train"),
            dataset.subset(np.sort(hold), f"{dataset.name}/heldout"))


def train_classifier(
    dataset: Dataset, arch: ArchConfig, train: TrainConfig
) -> ClassifierModel:
    if len(dataset) == 0:
        raise InputDomainError("cannot train on an empty dataset")

    train_set, held = split_holdout(dataset, train.holdout_fraction, train.holdout_seed)
    model = init_model(tuple(dataset.images.shape[1:]), arch, train.seed)
    if train.epochs <= 0:
        return freeze(model)

    params: List[np.ndarray] = []
    for l in model.layers:
        params += [l.weight, l.bias]
    params += [model.head_W, model.head_b]
    velocity = [np.zeros_like(p) for p in params]

    rng = RngStream(train.seed).spawn(0xBA7C)
    n = len(train_set)
    acc = 0.0
    for epoch in tqdm(range(train.epochs), desc="train", disable=not settings.progress):
        order = rng.permutation(n)
        for start in range(0, n, train.batch_size):
            idx = order[start:start + train.batch_size]
            _, grads = cross_entropy_grads(model, train_set.images[idx], train_set.labels[idx])
            flat_grads = [g for pair in grads for g in pair]
            for p, v, g in zip(params, velocity, flat_grads):
                v *= train.momentum
                v -= train.lr * g
                p += v

        acc = accuracy(model, held) if len(held) else accuracy(model, train_set)
        log.info(f"epoch {epoch + 1}/{train.epochs} heldout_acc={acc:.4f}")
        if arch.target_accuracy > 0 and acc >= arch.target_accuracy:
            break

    model = freeze(model)
    acc = accuracy(model, held) if len(held) else accuracy(model, train_set)
    if acc < arch.target_accuracy:
        raise TrainingFailure(acc, arch.target_accuracy)
    return model


# ============================================================
# UNGW serialization
# ============================================================

MAGIC = b"UNGW"
VERSION = 1

_KIND_TAGS = {"conv": 0, "dense": 1, "head": 2}
_ACT_TAGS = {"identity": 0, "relu": 1}


def _pack_array(kind: str, activation: str, stride: int, padding: int,
                weight: np.ndarray, bias: np.ndarray) -> bytes:
    head = struct.pack("<BBBBB", _KIND_TAGS[kind], _ACT_TAGS[activation],
                       stride, padding, weight.ndim)
    head += struct.pack(f"<{weight.ndim}I", *weight.shape)
    return (head + np.asarray(weight, dtype="<f4").tobytes()
            + np.asarray(bias, dtype="<f4").tobytes())


def save_model(model: ClassifierModel, path: Path) -> None:
    path = Path(path)
    buf = bytearray(MAGIC)
    buf += struct.pack("<H", VERSION)
    buf += struct.pack("<4I", *model.input_shape, model.classes)
    buf += struct.pack("<I", len(model.layers) + 1)
    for l in model.layers:
        buf += _pack_array(l.kind, l.activation, l.stride, l.padding, l.weight, l.bias)
    buf += _pack_array("head", "identity", 1, 0, model.head_W, model.head_b)
    path.write_bytes(bytes(buf))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, n: int, what: str) -> bytes:
        if self.offset + n > len(self.data):
            raise FormatError(f"truncated while reading {what}", self.offset)
        out = self.data[self.offset:self.offset + n]
        self.offset += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def floats(self, count: int, what: str) -> np.ndarray:
        raw = self.take(4 * count, what)
        return _storage_precision(np.frombuffer(raw, dtype="<f4"))


def load_model(path: Path) -> ClassifierModel:
    data = Path(path).read_bytes()
    r = _Reader(data)
    if r.take(4, "magic") != MAGIC:
        raise FormatError("bad magic", 0)
    (version,) = r.unpack("<H", "version")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    c, h, w, classes = r.unpack("<4I", "header")
    (count,) = r.unpack("<I", "layer count")
    if count < 1:
        raise FormatError("model has no head", r.offset - 4)

    kinds = {v: k for k, v in _KIND_TAGS.items()}
    acts = {v: k for k, v in _ACT_TAGS.items()}
    layers: List[Layer] = []
    head: Optional[Tuple[np.ndarray, np.ndarray]] = None
    for i in range(count):
        at = r.offset
        kind_tag, act_tag, stride, padding, ndim = r.unpack("<BBBBB", f"layer {i} header")
        if kind_tag not in kinds or act_tag not in acts:
            raise FormatError(f"unknown tag in layer {i}", at)
        dims = r.unpack(f"<{ndim}I", f"layer {i} dims")
        weight = r.floats(int(np.prod(dims)), f"layer {i} weights").reshape(dims)
        bias = r.floats(int(dims[0]), f"layer {i} bias")
        if kinds[kind_tag] == "head":
            if i != count - 1:
                raise FormatError("head must be the last layer", at)
            head = (weight, bias)
        else:
            layers.append(Layer(kinds[kind_tag], weight, bias, acts[act_tag], stride, padding))
    if r.offset != len(data):
        raise FormatError("trailing bytes after model", r.offset)
    if head is None or head[0].shape[0] != classes:
        raise FormatError("missing or inconsistent head", r.offset)
    return ClassifierModel(tuple(layers), head[0], head[1], (c, h, w))
