# engine/datasets.py
"""Dataset sources: procedurally rendered shapes and IDX (MNIST-style) files."""
from __future__ import annotations

import gzip
import logging
import struct
from pathlib import Path
from typing import Callable, Dict

import numpy as np

from engine.errors import FormatError, InputDomainError
from engine.model import Dataset
from engine.numerics import RngStream

log = logging.getLogger("data")

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


# ============================================================
# Synthetic shapes
# ============================================================

def _stripes_h(yy, xx, side, rng):
    period = rng.integers(3, 5)
    phase = rng.integers(0, period)
    return ((yy + phase) % period) < period / 2


def _stripes_v(yy, xx, side, rng):
    return _stripes_h(xx, yy, side, rng)


def _checker(yy, xx, side, rng):
    cell = rng.integers(2, 4)
    oy, ox = rng.integers(0, cell, 2)
    return (((yy + oy) // cell) + ((xx + ox) // cell)) % 2 == 0


def _disc(yy, xx, side, rng):
    cy, cx = side / 2 + rng.uniform(-side / 8, side / 8, 2)
    r = side * rng.uniform(0.25, 0.35)
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def _frame(yy, xx, side, rng):
    inset = rng.integers(1, 3)
    thick = rng.integers(1, 3)
    lo, hi = inset, side - 1 - inset
    inside = (yy >= lo) & (yy <= hi) & (xx >= lo) & (xx <= hi)
    core = (yy >= lo + thick) & (yy <= hi - thick) & (xx >= lo + thick) & (xx <= hi - thick)
    return inside & ~core


def _diagonal(yy, xx, side, rng):
    period = rng.integers(4, 6)
    phase = rng.integers(0, period)
    return ((yy + xx + phase) % period) < period / 2


def _cross(yy, xx, side, rng):
    cy, cx = side // 2 + rng.integers(-side // 8, side // 8 + 1, 2)
    half = rng.integers(1, 3)
    return (np.abs(yy - cy) < half) | (np.abs(xx - cx) < half)


def _ring(yy, xx, side, rng):
    cy, cx = side / 2 + rng.uniform(-side / 10, side / 10, 2)
    r = side * rng.uniform(0.3, 0.4)
    d = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
    return np.abs(d - r) < 1.2


def _dots(yy, xx, side, rng):
    gap = rng.integers(3, 5)
    oy, ox = rng.integers(0, gap, 2)
    return (((yy + oy) % gap) == 0) & (((xx + ox) % gap) == 0)


def _triangle(yy, xx, side, rng):
    off = rng.integers(-side // 8, side // 8 + 1)
    return xx <= yy + off


PATTERNS: Dict[int, Callable] = {
    0: _stripes_h,
    1: _checker,
    2: _disc,
    3: _frame,
    4: _stripes_v,
    5: _diagonal,
    6: _cross,
    7: _ring,
    8: _dots,
    9: _triangle,
}


def gen_synthetic_dataset(
    classes: int, n: int, image_side: int, seed: int, noise: float = 0.1
) -> Dataset:
    """Grayscale shapes, one pattern family per class, balanced and seeded."""
    if not 2 <= classes <= 10:
        raise InputDomainError(f"classes must be in [2, 10] (got {classes})")
    if not 8 <= image_side <= 32:
        raise InputDomainError(f"image_side must be in [8, 32] (got {image_side})")
    if n < 0:
        raise InputDomainError(f"n must be >= 0 (got {n})")

    rng = RngStream(seed)
    labels = rng.permutation(n) % classes
    yy, xx = np.mgrid[0:image_side, 0:image_side]
    images = np.empty((n, 1, image_side, image_side), dtype=np.float64)
    for i, label in enumerate(labels):
        mask = PATTERNS[int(label)](yy, xx, image_side, rng).astype(np.float64)
        bg = rng.uniform(0.0, 0.3)
        fg = rng.uniform(0.6, 1.0)
        img = bg + (fg - bg) * mask + noise * rng.normal(0.0, 1.0, mask.shape)
        images[i, 0] = np.clip(img, 0.0, 1.0)
    return Dataset(images=images, labels=labels.astype(np.int64),
                   name=f"shapes{classes}-s{seed}", classes=classes)


# ============================================================
# IDX files
# ============================================================

def _read_bytes(path: Path) -> bytes:
    path = Path(path)
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as fh:
            return fh.read()
    return path.read_bytes()


def _idx_payload(data: bytes, magic: int, ndim: int, what: str):
    header = 4 + 4 * ndim
    if len(data) < 4:
        raise FormatError(f"{what}: truncated magic", len(data))
    (got,) = struct.unpack(">I", data[:4])
    if got != magic:
        raise FormatError(f"{what}: bad magic 0x{got:08x}, expected 0x{magic:08x}", 0)
    if len(data) < header:
        raise FormatError(f"{what}: truncated header", len(data))
    dims = struct.unpack(f">{ndim}I", data[4:header])
    expected = header + int(np.prod(dims))
    if len(data) < expected:
        raise FormatError(f"{what}: truncated payload, expected {expected} bytes", len(data))
    if len(data) > expected:
        raise FormatError(f"{what}: trailing bytes", expected)
    return dims, np.frombuffer(data, dtype=np.uint8, offset=header)


def load_idx_dataset(images_path: Path, labels_path: Path) -> Dataset:
    (n_img, rows, cols), pixels = _idx_payload(_read_bytes(images_path), IDX_IMAGES_MAGIC, 3, "images")
    (n_lab,), labels = _idx_payload(_read_bytes(labels_path), IDX_LABELS_MAGIC, 1, "labels")
    if n_img != n_lab:
        raise FormatError(f"image count {n_img} != label count {n_lab}", 4)

    images = pixels.reshape(n_img, 1, rows, cols).astype(np.float64) / 255.0
    log.info(f"{n_img} images loaded from {images_path}")
    return Dataset(images=images, labels=labels.astype(np.int64), name=Path(images_path).stem)
