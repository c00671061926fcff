# engine/numerics.py
"""
Dense-array primitives shared by every other engine module.

Arrays are numpy ndarrays. Batched operations treat axis 0 as the batch axis;
a 1-D array is a single sample. Reductions run in float64.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Literal, Tuple

import numpy as np

from engine.errors import InputDomainError, UndefinedMetricError

Norm = Literal["linf", "l2"]


# ============================================================
# Seeded randomness
# ============================================================

@dataclass
class RngStream:
    """
    Single-owner random stream on a counter-based bit generator (Philox),
    so equal seeds give equal draws on every platform.
    `counter` is the number of values drawn so far.
    """
    seed: int
    counter: int = 0
    _gen: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.seed = int(self.seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.Philox(self.seed))

    def _count(self, size) -> None:
        self.counter += int(np.prod(size)) if size is not None else 1

    def normal(self, loc: float = 0.0, scale: float = 1.0, size=None) -> np.ndarray:
        self._count(size)
        return self._gen.normal(loc, scale, size)

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None) -> np.ndarray:
        self._count(size)
        return self._gen.uniform(low, high, size)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        self._count(size)
        return self._gen.integers(low, high, size)

    def choice(self, options, size=None) -> np.ndarray:
        self._count(size)
        return self._gen.choice(np.asarray(options), size=size)

    def signs(self, size) -> np.ndarray:
        return self.choice([-1.0, 1.0], size=size)

    def permutation(self, n: int) -> np.ndarray:
        self._count(n)
        return self._gen.permutation(n)

    def permuted_rows(self, rows: int, n: int) -> np.ndarray:
        """Independent permutation of range(n) for each of `rows` rows."""
        self._count((rows, n))
        base = np.broadcast_to(np.arange(n), (rows, n))
        return self._gen.permuted(base, axis=1)

    def spawn(self, *keys: int) -> "RngStream":
        """Child stream derived from (seed, *keys); does not advance this stream."""
        ss = np.random.SeedSequence([self.seed, *[int(k) & 0xFFFFFFFF for k in keys]])
        return RngStream(int(ss.generate_state(1, dtype=np.uint64)[0]))


def derive_seed(seed: int, *keys: int) -> int:
    return RngStream(seed).spawn(*keys).seed


def batch_chunks(n: int, batch_size: int) -> List[np.ndarray]:
    """
    Split range(n) into ceil(n / batch_size) contiguous chunks whose sizes
    differ by at most one.
    """
    if n <= 0:
        return []
    if batch_size < 1:
        raise InputDomainError(f"batch_size must be >= 1 (got {batch_size})")
    return np.array_split(np.arange(n), -(-n // batch_size))


# ============================================================
# Elementwise / rowwise math
# ============================================================

def softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    shifted = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def one_hot(labels, classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if classes < 1:
        raise InputDomainError(f"classes must be >= 1 (got {classes})")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise InputDomainError(f"label out of range [0, {classes})")
    out = np.zeros((labels.size, classes), dtype=np.float64)
    out[np.arange(labels.size), labels] = 1.0
    return out


def sign(x: np.ndarray) -> np.ndarray:
    # np.sign already maps 0 -> 0
    return np.sign(x)


def minmax_normalize(
    g: np.ndarray, eps: float = 1e-12
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Per-row (g - min) / (max - min + eps).

    Returns (normalized, argmin, argmax). Ties resolve to the first index,
    which fixes the subgradient used when differentiating through this op.
    A constant row maps to zeros.
    """
    g = np.asarray(g, dtype=np.float64)
    if g.ndim == 1:
        out, lo, hi = minmax_normalize(g[None, :], eps)
        return out[0], lo[0], hi[0]
    if g.shape[-1] < 1:
        raise InputDomainError("minmax_normalize needs at least one column")
    if eps <= 0:
        raise InputDomainError(f"eps must be > 0 (got {eps})")
    rows = np.arange(g.shape[0])
    lo = np.argmin(g, axis=1)
    hi = np.argmax(g, axis=1)
    g_min = g[rows, lo][:, None]
    g_max = g[rows, hi][:, None]
    out = (g - g_min) / (g_max - g_min + eps)
    return out, lo, hi


# ============================================================
# Geometry
# ============================================================

def _as_batch(x: np.ndarray) -> np.ndarray:
    return x[None, ...] if x.ndim == 1 else x


def flat_norms(v: np.ndarray, norm: Norm) -> np.ndarray:
    """Per-sample norm over every axis but the first."""
    flat = _as_batch(np.asarray(v, dtype=np.float64))
    flat = flat.reshape(flat.shape[0], -1)
    if norm == "linf":
        return np.max(np.abs(flat), axis=1)
    if norm == "l2":
        return np.sqrt(np.sum(flat * flat, axis=1))
    raise InputDomainError(f"unknown norm {norm!r}")


def project_ball(
    x_adv: np.ndarray,
    x_orig: np.ndarray,
    norm: Norm,
    radius: float,
    box: Tuple[float, float] = (0.0, 1.0),
) -> np.ndarray:
    """
    Project onto {x : ||x - x_orig|| <= radius} then clamp to the box.
    The box clamp never moves a point away from x_orig (x_orig is in the box),
    so the result stays inside the ball.
    """
    x_adv = np.asarray(x_adv, dtype=np.float64)
    x_orig = np.asarray(x_orig, dtype=np.float64)
    if x_adv.shape != x_orig.shape:
        raise InputDomainError(f"shape mismatch {x_adv.shape} vs {x_orig.shape}")
    if radius < 0:
        raise InputDomainError(f"radius must be >= 0 (got {radius})")

    delta = x_adv - x_orig
    if norm == "linf":
        delta = np.clip(delta, -radius, radius)
    elif norm == "l2":
        n = flat_norms(delta, "l2")
        scale = np.minimum(1.0, radius / np.maximum(n, 1e-300))
        if delta.ndim == 1:
            delta = delta * scale[0]
        else:
            delta = delta * scale.reshape((-1,) + (1,) * (delta.ndim - 1))
    else:
        raise InputDomainError(f"unknown norm {norm!r}")
    return np.clip(x_orig + delta, box[0], box[1])


def pairwise_cosine(mat: np.ndarray, zero_tol: float = 1e-12) -> float:
    """
    Mean cosine similarity over all unordered pairs of rows.
    Rows with norm <= zero_tol are left out of every pair.
    """
    mat = np.asarray(mat, dtype=np.float64)
    mat = mat.reshape(mat.shape[0], -1)
    norms = np.sqrt(np.sum(mat * mat, axis=1))
    keep = norms > zero_tol
    if int(keep.sum()) < 2:
        raise UndefinedMetricError("pairwise cosine needs at least 2 nonzero rows")
    unit = mat[keep] / norms[keep][:, None]
    gram = unit @ unit.T
    iu = np.triu_indices(unit.shape[0], k=1)
    return float(np.clip(np.mean(gram[iu]), -1.0, 1.0))
