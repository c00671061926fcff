# engine/unig.py
"""
Gradient-unifying Hadamard module.

For a batch of features f (b, d) the module A (b, d) is re-optimized on every
forward call so that the per-sample feature gradients

    g_i   = W^T (softmax(W (A_i * f_i) + b) - c_i)     c_i = onehot(argmax(W f_i + b))
    ghat_i = A_i * g_i

become alike across the batch, while |A_ij - 1| <= delta keeps the output
close to the vanilla model. Only the linear head and A take part; the
extractor runs once per call.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from engine.errors import ConfigError, DegenerateBatchWarning, InputDomainError
from engine.model import ClassifierModel, Dataset, forward_features
from engine.numerics import RngStream, minmax_normalize, one_hot, softmax

log = logging.getLogger("unig")


# ============================================================
# Types
# ============================================================

@dataclass(frozen=True)
class UniGConfig:
    delta: float = 0.5
    p: int = 1
    alpha: float = 1.0
    eps_norm: float = 1e-12
    cascade_k: int = 0
    seed: int = 0
    frozen_p: bool = False   # treat softmax(z) inside g as constant w.r.t. A

    def __post_init__(self) -> None:
        if self.delta < 0:
            raise InputDomainError(f"delta must be >= 0 (got {self.delta})")
        if self.p < 1:
            raise InputDomainError(f"p must be >= 1 (got {self.p})")
        if self.alpha < 0:
            raise InputDomainError(f"alpha must be >= 0 (got {self.alpha})")
        if self.eps_norm <= 0:
            raise InputDomainError(f"eps_norm must be > 0 (got {self.eps_norm})")
        if self.cascade_k < 0:
            raise InputDomainError(f"cascade_k must be >= 0 (got {self.cascade_k})")


@dataclass
class UniGState:
    A: np.ndarray
    trace: List[float] = field(default_factory=list)   # loss before each update, then final
    forward_drift: float = 0.0                         # ||(A - 1) * f||_2 over the batch
    max_deviation: List[float] = field(default_factory=list)   # max|A - 1| at init, then after each update
    logits: Optional[np.ndarray] = None                # defended logits W (A * f) + b
    degenerate: bool = False


@dataclass(frozen=True)
class GradCache:
    p: np.ndarray   # softmax of defended logits (b, classes)
    c: np.ndarray   # one-hot vanilla prediction (b, classes)
    f: np.ndarray   # features (b, d)
    g: np.ndarray   # W^T (p - c) (b, d)


# ============================================================
# Module parameter
# ============================================================

def clip_A(A: np.ndarray, delta: float) -> np.ndarray:
    """Clip so that abs(A - 1) <= delta holds exactly in float arithmetic."""
    A = np.clip(np.asarray(A, dtype=np.float64), 1.0 - delta, 1.0 + delta)
    over = np.abs(A - 1.0) > delta
    while over.any():
        A[over] = np.nextafter(A[over], 1.0)
        over = np.abs(A - 1.0) > delta
    return A


def init_A(b: int, d: int, seed, delta: float = np.inf) -> np.ndarray:
    """A ~ N(1, 0.5) elementwise, clipped to the delta box. `seed` may be an RngStream."""
    if b < 1 or d < 1:
        raise InputDomainError(f"A needs b, d >= 1 (got {b}, {d})")
    rng = seed if isinstance(seed, RngStream) else RngStream(seed)
    A = rng.normal(1.0, 0.5, (b, d))
    return A if np.isinf(delta) else clip_A(A, delta)


# ============================================================
# Gradients and loss
# ============================================================

def feature_gradients(
    model: ClassifierModel, f: np.ndarray, A: np.ndarray
) -> Tuple[np.ndarray, GradCache]:
    f = np.asarray(f, dtype=np.float64)
    W = model.head_W
    c = one_hot(np.argmax(model.head(f), axis=1), model.classes)
    p = softmax(model.head(A * f))
    g = (p - c) @ W
    return A * g, GradCache(p=p, c=c, f=f, g=g)


def unification_loss(g_hat: np.ndarray, eps_norm: float = 1e-12) -> float:
    if g_hat.shape[0] < 2:
        return 0.0
    gbar, _, _ = minmax_normalize(g_hat, eps_norm)
    diff = gbar[:-1] - gbar[1:]
    return float(np.sum(diff * diff))


def grad_loss_wrt_A(
    model: ClassifierModel,
    f: np.ndarray,
    A: np.ndarray,
    cache: GradCache,
    eps_norm: float = 1e-12,
    frozen_p: bool = False,
) -> np.ndarray:
    """
    d loss / d A with c fixed and the min-max argmin/argmax indices fixed.
    Row i collects the terms of pairs (i-1, i) and (i, i+1).
    """
    b = A.shape[0]
    if b < 2:
        return np.zeros_like(A, dtype=np.float64)

    g_hat = A * cache.g
    gbar, lo, hi = minmax_normalize(g_hat, eps_norm)
    rows = np.arange(b)

    # d loss / d gbar
    diff = gbar[:-1] - gbar[1:]
    u = np.zeros_like(gbar)
    u[:-1] += 2.0 * diff
    u[1:] -= 2.0 * diff

    # back through (ghat - ghat[lo]) / (ghat[hi] - ghat[lo] + eps)
    denom = g_hat[rows, hi] - g_hat[rows, lo] + eps_norm
    s1 = u.sum(axis=1)
    s2 = (u * gbar).sum(axis=1)
    v = u / denom[:, None]
    v[rows, lo] -= s1 / denom
    v[rows, hi] -= s2 / denom
    v[rows, lo] += s2 / denom

    # ghat = A * g
    grad = v * cache.g
    if frozen_p:
        return grad

    # g = W^T (p - c), p = softmax(W (A * f) + b)
    W = model.head_W
    q = (v * A) @ W.T
    r = cache.p * q - cache.p * np.sum(cache.p * q, axis=1, keepdims=True)
    return grad + cache.f * (r @ W)


# ============================================================
# Forward calculation
# ============================================================

def _vanilla_state(model: ClassifierModel, f: np.ndarray) -> Tuple[np.ndarray, UniGState]:
    z = model.head(f)
    return softmax(z), UniGState(A=np.ones_like(f), logits=z, degenerate=True)


def unig_forward_features(
    model: ClassifierModel,
    f: np.ndarray,
    cfg: UniGConfig,
    rng: Optional[RngStream] = None,
) -> Tuple[np.ndarray, UniGState]:
    f = np.asarray(f, dtype=np.float64)
    b, d = f.shape
    if b < 2:
        warnings.warn(
            "batch of size 1 cannot be unified; returning the vanilla output",
            DegenerateBatchWarning,
            stacklevel=3,
        )
        log.warning("degenerate batch (b=1), vanilla output returned")
        return _vanilla_state(model, f)

    rng = rng if rng is not None else RngStream(cfg.seed)
    A = init_A(b, d, rng, cfg.delta)
    trace: List[float] = []
    deviation = [float(np.max(np.abs(A - 1.0)))]
    for _ in range(cfg.p):
        g_hat, cache = feature_gradients(model, f, A)
        trace.append(unification_loss(g_hat, cfg.eps_norm))
        grad = grad_loss_wrt_A(model, f, A, cache, cfg.eps_norm, cfg.frozen_p)
        A = clip_A(A - cfg.alpha * grad, cfg.delta)
        deviation.append(float(np.max(np.abs(A - 1.0))))

    g_hat, _ = feature_gradients(model, f, A)
    trace.append(unification_loss(g_hat, cfg.eps_norm))

    z = model.head(A * f)
    drift = float(np.linalg.norm((A - 1.0) * f))
    return softmax(z), UniGState(A=A, trace=trace, forward_drift=drift,
                                 max_deviation=deviation, logits=z)


def unig_forward(
    model: ClassifierModel,
    x: np.ndarray,
    cfg: UniGConfig,
    rng: Optional[RngStream] = None,
) -> Tuple[np.ndarray, UniGState]:
    return unig_forward_features(model, forward_features(model, x), cfg, rng)


# ============================================================
# Single test sample (cascading)
# ============================================================

def cascade_features(
    model: ClassifierModel,
    f_single: np.ndarray,
    reservoir_features: np.ndarray,
    cfg: UniGConfig,
    rng: RngStream,
) -> Tuple[np.ndarray, UniGState]:
    """Unify one feature row together with cfg.cascade_k reservoir rows; row 0 is returned."""
    if cfg.cascade_k < 1:
        raise ConfigError("single-sample mode needs cascade_k >= 1")
    n = reservoir_features.shape[0]
    if n == 0:
        raise ConfigError("cascade reservoir is empty")
    if n < cfg.cascade_k:
        raise ConfigError(f"cascade reservoir has {n} images, needs {cfg.cascade_k}")
    pick = rng.permutation(n)[:cfg.cascade_k]
    batch = np.concatenate([np.asarray(f_single, dtype=np.float64).reshape(1, -1),
                            reservoir_features[pick]], axis=0)
    probs, state = unig_forward_features(model, batch, cfg, rng)
    return probs[0], state


def cascade_single_sample(
    model: ClassifierModel,
    x_single: np.ndarray,
    reservoir: Dataset,
    cfg: UniGConfig,
    rng: Optional[RngStream] = None,
) -> np.ndarray:
    if len(reservoir) == 0:
        raise ConfigError("cascade reservoir is empty")
    x_single = np.asarray(x_single, dtype=np.float64).reshape((1,) + tuple(model.input_shape))
    rng = rng if rng is not None else RngStream(cfg.seed)
    probs, _ = cascade_features(
        model,
        forward_features(model, x_single)[0],
        forward_features(model, reservoir.images),
        cfg,
        rng,
    )
    return probs
