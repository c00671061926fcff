# engine/attacks.py
"""
Score-based query attacks driven in lockstep over a batch.

Each attack is a generator ("stepper") that yields one candidate batch per
oracle call and receives the margins of that batch back. The driver
(`run_attack`) owns query accounting, success detection, freezing and the
margin trace. Every stepper first yields the clean images, so query 1 is
always the unperturbed input.

The stepper keeps its current iterate in `x_cur` (updated in place); images
that never succeed report that iterate as their final adversarial example.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Generator, Literal, Optional, Tuple

import numpy as np
from scipy.fft import idctn

from engine.defenses import QueryOracle
from engine.errors import BudgetExhausted, InputDomainError
from engine.numerics import Norm, RngStream, flat_norms, project_ball, sign

log = logging.getLogger("attack")

AttackKind = Literal["square", "simba", "signhunter", "nes", "bandits"]
ATTACK_KINDS: Tuple[str, ...] = ("square", "simba", "signhunter", "nes", "bandits")

CHECKPOINTS: Tuple[int, ...] = (1, 10, 50, 100, 250, 500, 1000, 2500)

# budget fractions at which the square size is halved
SQUARE_HALVINGS: Tuple[float, ...] = (0.05, 0.2, 0.5, 0.8)


# ============================================================
# Types
# ============================================================

@dataclass(frozen=True)
class AttackConfig:
    kind: AttackKind = "square"
    norm: Norm = "linf"
    epsilon: float = 0.15
    budget: int = 2500                      # queries per image
    targeted: bool = False
    target_labels: Optional[Tuple[int, ...]] = None
    seed: int = 0

    # square
    p_init: float = 0.05
    # simba (0 -> epsilon / 4)
    simba_step: float = 0.0
    simba_basis: Literal["pixel", "dct"] = "pixel"
    # nes
    nes_samples: int = 10
    nes_sigma: float = 0.01
    nes_step: float = 0.01
    # bandits (tile 0 -> image side / 4)
    bandits_prior_lr: float = 0.1
    bandits_exploration: float = 0.1
    bandits_tile: int = 0
    bandits_fd_eta: float = 0.1
    bandits_step: float = 0.01

    # driver
    freeze: bool = True
    batch_composition: Literal["distinct", "identical"] = "distinct"

    def __post_init__(self) -> None:
        if self.kind not in ATTACK_KINDS:
            raise InputDomainError(f"unknown attack kind {self.kind!r}")
        if self.norm not in ("linf", "l2"):
            raise InputDomainError(f"unknown norm {self.norm!r}")
        if self.epsilon <= 0:
            raise InputDomainError(f"epsilon must be > 0 (got {self.epsilon})")
        if self.budget < 0:
            raise InputDomainError(f"budget must be >= 0 (got {self.budget})")
        if self.nes_samples < 1 or self.nes_sigma <= 0:
            raise InputDomainError("nes needs samples >= 1 and sigma > 0")
        if self.bandits_exploration <= 0 or self.bandits_fd_eta <= 0:
            raise InputDomainError("bandits needs exploration > 0 and fd_eta > 0")
        if not 0 < self.p_init <= 1:
            raise InputDomainError(f"p_init must be in (0, 1] (got {self.p_init})")

    @property
    def label(self) -> str:
        return f"{self.kind}{'-T' if self.targeted else ''}"


@dataclass
class AttackRun:
    x_orig: np.ndarray
    x_adv: np.ndarray
    best_margin: np.ndarray             # lowest margin seen per image (inf if never queried)
    queries: np.ndarray                 # per-image queries consumed
    success: np.ndarray                 # best_margin <= 0
    success_query: np.ndarray           # query count at first success (budget if never)
    checkpoints: Tuple[int, ...]
    trace: np.ndarray                   # (len(checkpoints), n) best margin after k queries
    extras: Dict[str, np.ndarray] = field(default_factory=dict)

    def __len__(self) -> int:
        return int(self.x_orig.shape[0])

    @property
    def perturbation(self) -> np.ndarray:
        return self.x_adv - self.x_orig

    def broken_within(self, budget: int) -> np.ndarray:
        return self.success & (self.success_query <= budget)


Stepper = Generator[np.ndarray, np.ndarray, None]


# ============================================================
# Loss
# ============================================================

def margin_loss(
    probs: np.ndarray,
    y: np.ndarray,
    targeted: bool = False,
    targets: Optional[np.ndarray] = None,
) -> np.ndarray:
    """
    Untargeted: probs[y] - max_{j != y} probs[j].
    Targeted:   max_{j != t} probs[j] - probs[t].
    The attack succeeds once the margin is <= 0.
    """
    probs = np.asarray(probs, dtype=np.float64)
    rows = np.arange(probs.shape[0])
    label = np.asarray(targets if targeted else y, dtype=np.int64)
    own = probs[rows, label]
    others = probs.copy()
    others[rows, label] = -np.inf
    best_other = others.max(axis=1)
    return best_other - own if targeted else own - best_other


# ============================================================
# Shared helpers
# ============================================================

def _direction(g: np.ndarray, norm: Norm) -> np.ndarray:
    if norm == "linf":
        return sign(g)
    n = flat_norms(g, "l2")
    return g / np.maximum(n, 1e-12).reshape((-1,) + (1,) * (g.ndim - 1))


def _unit(v: np.ndarray) -> np.ndarray:
    n = flat_norms(v, "l2")
    return v / np.maximum(n, 1e-12).reshape((-1,) + (1,) * (v.ndim - 1))


def _square_fraction(p_init: float, used_fraction: float) -> float:
    halvings = sum(used_fraction > t for t in SQUARE_HALVINGS)
    return p_init / (2 ** halvings)


def _upsample(prior: np.ndarray, tile: int, h: int, w: int) -> np.ndarray:
    up = np.repeat(np.repeat(prior, tile, axis=2), tile, axis=3)
    return up[:, :, :h, :w]


# ============================================================
# Steppers
# ============================================================

def _square_steps(x, x_cur, cfg: AttackConfig, rng: RngStream, extras) -> Stepper:
    n, c, h, w = x.shape
    eps = cfg.epsilon
    cur = (yield x.copy()).copy()

    # vertical stripes of width one
    stripe_mag = eps if cfg.norm == "linf" else eps / np.sqrt(c * h * w)
    init = x + stripe_mag * rng.signs((n, c, 1, w))
    init = project_ball(init, x, cfg.norm, eps)
    m = yield init
    x_cur[:] = init
    cur = m.copy()

    used = 2
    while True:
        p = _square_fraction(cfg.p_init, used / max(cfg.budget, 1))
        s = min(max(int(round(np.sqrt(p * h * w))), 1), h, w)
        vh = rng.integers(0, h - s + 1, n)
        vw = rng.integers(0, w - s + 1, n)
        vals = rng.signs((n, c))
        mag = eps if cfg.norm == "linf" else eps / np.sqrt(c * s * s)

        delta = x_cur - x
        for i in range(n):
            delta[i, :, vh[i]:vh[i] + s, vw[i]:vw[i] + s] = (mag * vals[i])[:, None, None]
        cand = project_ball(x + delta, x, cfg.norm, eps)

        m = yield cand
        used += 1
        acc = m < cur
        x_cur[acc] = cand[acc]
        cur[acc] = m[acc]


def _simba_basis(coord: np.ndarray, shape, basis: str) -> np.ndarray:
    n = coord.shape[0]
    q = np.zeros((n, int(np.prod(shape))))
    q[np.arange(n), coord] = 1.0
    q = q.reshape((n,) + tuple(shape))
    if basis == "dct":
        q = idctn(q, axes=(2, 3), norm="ortho")
    return q


def _simba_steps(x, x_cur, cfg: AttackConfig, rng: RngStream, extras) -> Stepper:
    n = x.shape[0]
    dim = int(np.prod(x.shape[1:]))
    step = cfg.simba_step or cfg.epsilon / 4.0
    cur = (yield x.copy()).copy()

    perm = rng.permuted_rows(n, dim)
    rows = np.arange(n)
    pos = np.zeros(n, dtype=np.int64)
    phase = np.ones(n)      # +1: trying +step, -1: trying -step
    while True:
        coord = perm[rows, pos % dim]
        q = _simba_basis(coord, x.shape[1:], cfg.simba_basis)
        cand = project_ball(x_cur + step * phase[:, None, None, None] * q, x, cfg.norm, cfg.epsilon)

        m = yield cand
        acc = m < cur
        x_cur[acc] = cand[acc]
        cur[acc] = m[acc]

        advance = acc | (phase < 0)
        pos[advance] += 1
        phase = np.where(advance, 1.0, -1.0)


def _signhunter_steps(x, x_cur, cfg: AttackConfig, rng: RngStream, extras) -> Stepper:
    n = x.shape[0]
    dim = int(np.prod(x.shape[1:]))
    scale = cfg.epsilon if cfg.norm == "linf" else cfg.epsilon / np.sqrt(dim)

    def point(signs: np.ndarray) -> np.ndarray:
        return project_ball(x + scale * signs.reshape(x.shape), x, cfg.norm, cfg.epsilon)

    cur = (yield x.copy()).copy()
    s = np.ones((n, dim))
    cand = point(s)
    m = yield cand
    x_cur[:] = cand
    cur = m.copy()

    level, i = 0, 0
    while True:
        chunk = -(-dim // (2 ** level))
        lo, hi = i * chunk, min((i + 1) * chunk, dim)
        trial = s.copy()
        trial[:, lo:hi] *= -1.0
        cand = point(trial)

        m = yield cand
        acc = m < cur
        s[acc] = trial[acc]
        x_cur[acc] = cand[acc]
        cur[acc] = m[acc]

        i += 1
        if hi >= dim:
            # finished a level; restart at the root after the finest one
            level = 0 if chunk == 1 else level + 1
            i = 0
        extras["signs"] = s


def _nes_pair(x_cur, sigma, u_j):
    return x_cur + sigma * u_j, x_cur - sigma * u_j


def _nes_combine(l_plus, l_minus, u, sigma: float) -> np.ndarray:
    """Antithetic estimate sum_j (l+_j - l-_j) u_j / (2 k sigma); u is (k, n, ...)."""
    k = u.shape[0]
    diff = np.stack(l_plus) - np.stack(l_minus)              # (k, n)
    diff = diff.reshape(diff.shape + (1,) * (u.ndim - 2))
    return np.sum(diff * u, axis=0) / (2.0 * k * sigma)


def estimate_gradient_nes(
    loss_fn: Callable[[np.ndarray], float],
    x: np.ndarray,
    sigma: float,
    n_pairs: int,
    rng: RngStream,
) -> np.ndarray:
    """NES antithetic gradient estimate of a scalar loss at a single point x."""
    x = np.asarray(x, dtype=np.float64)
    u = rng.normal(0.0, 1.0, (n_pairs, 1) + x.shape)
    l_plus, l_minus = [], []
    for j in range(n_pairs):
        xp, xm = _nes_pair(x, sigma, u[j, 0])
        l_plus.append(np.array([loss_fn(xp)]))
        l_minus.append(np.array([loss_fn(xm)]))
    return _nes_combine(l_plus, l_minus, u, sigma)[0]


def _nes_steps(x, x_cur, cfg: AttackConfig, rng: RngStream, extras) -> Stepper:
    eps, norm = cfg.epsilon, cfg.norm
    yield x.copy()
    while True:
        u = rng.normal(0.0, 1.0, (cfg.nes_samples,) + x.shape)
        l_plus, l_minus = [], []
        for j in range(cfg.nes_samples):
            xp, xm = _nes_pair(x_cur, cfg.nes_sigma, u[j])
            l_plus.append((yield project_ball(xp, x, norm, eps)))
            l_minus.append((yield project_ball(xm, x, norm, eps)))
        g = _nes_combine(l_plus, l_minus, u, cfg.nes_sigma)
        x_cur[:] = project_ball(x_cur - cfg.nes_step * _direction(g, norm), x, norm, eps)


def _bandits_steps(x, x_cur, cfg: AttackConfig, rng: RngStream, extras) -> Stepper:
    n, c, h, w = x.shape
    eps, norm = cfg.epsilon, cfg.norm
    tile = cfg.bandits_tile or max(min(h, w) // 4, 1)
    prior = np.zeros((n, c, -(-h // tile), -(-w // tile)))
    delta_exp, fd = cfg.bandits_exploration, cfg.bandits_fd_eta
    extras["prior"] = _upsample(prior, tile, h, w)

    yield x.copy()
    while True:
        u = rng.normal(0.0, 1.0, prior.shape)
        q1 = _unit(_upsample(prior + delta_exp * u, tile, h, w))
        q2 = _unit(_upsample(prior - delta_exp * u, tile, h, w))
        l1 = yield project_ball(x_cur + fd * q1, x, norm, eps)
        l2 = yield project_ball(x_cur + fd * q2, x, norm, eps)

        est = (l1 - l2) / (fd * delta_exp)
        prior = prior + cfg.bandits_prior_lr * est[:, None, None, None] * u
        up = _upsample(prior, tile, h, w)
        extras["prior"] = up
        x_cur[:] = project_ball(x_cur - cfg.bandits_step * _direction(up, norm), x, norm, eps)


_STEPPERS: Dict[str, Callable[..., Stepper]] = {
    "square": _square_steps,
    "simba": _simba_steps,
    "signhunter": _signhunter_steps,
    "nes": _nes_steps,
    "bandits": _bandits_steps,
}


# ============================================================
# Driver
# ============================================================

def _submit(oracle: QueryOracle, batch: np.ndarray, composition: str) -> np.ndarray:
    if composition == "distinct":
        return oracle.query(batch)
    # every candidate is sent as a batch of identical copies
    n = batch.shape[0]
    return np.stack([oracle.query(np.repeat(batch[i:i + 1], n, axis=0))[0] for i in range(n)])


def run_attack(oracle: QueryOracle, x: np.ndarray, y, cfg: AttackConfig) -> AttackRun:
    """
    Attack every image of the batch in lockstep: each iteration is one
    full-batch oracle call. Images that succeed (or run out of budget)
    resubmit their final point when `cfg.freeze` is set.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    n = x.shape[0]
    if n == 0:
        raise InputDomainError("run_attack needs a non-empty batch")
    if y.shape[0] != n:
        raise InputDomainError("label count does not match batch")

    checkpoints = tuple(k for k in CHECKPOINTS if k <= cfg.budget)
    trace = np.full((len(checkpoints), n), np.inf)
    best = np.full(n, np.inf)
    queries = np.zeros(n, dtype=np.int64)
    success = np.zeros(n, dtype=bool)
    x_adv = x.copy()
    x_cur = x.copy()
    extras: Dict[str, np.ndarray] = {}
    success_query = np.full(n, cfg.budget, dtype=np.int64)
    run = AttackRun(x.copy(), x_adv, best, queries, success, success_query,
                    checkpoints, trace, extras)
    if cfg.budget == 0:
        return run

    targets: Optional[np.ndarray] = None
    if cfg.targeted and cfg.target_labels is not None:
        targets = np.asarray(cfg.target_labels, dtype=np.int64)

    stepper = _STEPPERS[cfg.kind](x, x_cur, cfg, RngStream(cfg.seed), extras)
    cand = next(stepper)
    active = np.ones(n, dtype=bool)
    k = 0
    ci = 0
    while True:
        submit = np.where(active[:, None, None, None], cand, x_adv)
        try:
            probs = _submit(oracle, submit, cfg.batch_composition)
        except BudgetExhausted as e:
            log.info(f"{cfg.kind}: oracle budget exhausted at {e.count} queries")
            break
        if cfg.targeted and targets is None:
            targets = (y + 1) % probs.shape[1]
        margins = margin_loss(probs, y, cfg.targeted, targets)

        k += 1
        queries[active] += 1
        improved = active & (margins < best)
        best[improved] = margins[improved]
        hit = active & ~success & (margins <= 0)
        success |= hit
        success_query[hit] = queries[hit]
        x_adv[hit] = cand[hit]

        if cfg.freeze:
            active &= ~success
        active &= queries < cfg.budget
        while ci < len(checkpoints) and checkpoints[ci] <= k:
            trace[ci] = best
            ci += 1
        if not active.any():
            break
        cand = stepper.send(margins)

    stepper.close()
    trace[ci:] = best
    x_adv[~success] = x_cur[~success]
    log.debug(f"{cfg.kind}: {int(success.sum())}/{n} broken after {k} calls")
    return run


def _single(kind: str):
    def attack(oracle: QueryOracle, x: np.ndarray, y, cfg: AttackConfig) -> AttackRun:
        if cfg.kind != kind:
            raise InputDomainError(f"{kind}_attack called with kind={cfg.kind!r}")
        return run_attack(oracle, x, y, cfg)
    attack.__name__ = f"{kind}_attack"
    attack.__doc__ = f"Run the {kind} attack (see run_attack)."
    return attack


square_attack = _single("square")
simba_attack = _single("simba")
signhunter_attack = _single("signhunter")
nes_attack = _single("nes")
bandits_attack = _single("bandits")
