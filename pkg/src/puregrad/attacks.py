"""Adaptive attacks against the purification defense.

Two attackers share the EOT gradient machinery: projected gradient
descent under an L-infinity budget, and a low-frequency attack that
optimises per-pixel filter kernels plus an additive perturbation in
tanh space, constrained by a perceptual distance instead of a norm ball.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import autodiff as ag
from .autodiff import Tape, Tensor, tape_backward
from .errors import ConfigurationError
from .gradients import (
    DefensePipeline,
    GradMode,
    defense_outcomes,
    eot_paths,
    iteration_seed,
)
from .protocol import majority_vote
from .rng import derive_seed, stream

__all__ = [
    "FilterChain",
    "identity_weights",
    "color_kernel",
    "of_apply",
    "chain_apply",
    "perceptual_distance",
    "arctanh_reparam",
    "tanh_scale",
    "Adam",
    "AttackConfig",
    "AttackResult",
    "IterRecord",
    "success_of",
    "pgd_attack",
    "lf_attack",
]

SUCCESS_LEVELS = ("sp", "wor", "mv")
IDENTITY_LOGIT = 30.0


# ---------------------------------------------------------------------------
# optimizable guided filters


@dataclass(frozen=True)
class FilterChain:
    """A sequence of per-pixel filters given by their window shapes.

    sigma_c controls the fixed color kernel (inf disables it); by default
    each filter's color kernel is computed from its own input, with
    color_from_original switching all of them to the unfiltered image.
    """

    shapes: tuple = ((3, 3), (5, 5), (3, 3))
    sigma_c: float = 0.1
    color_from_original: bool = False

    def __post_init__(self):
        shapes = tuple(tuple(s) for s in self.shapes)
        if not shapes:
            raise ConfigurationError("filter chain must not be empty")
        for m, n in shapes:
            if m < 1 or n < 1 or m % 2 == 0 or n % 2 == 0:
                raise ConfigurationError("filter windows must have odd extents")
        if not (self.sigma_c > 0.0):
            raise ConfigurationError("sigma_c must be positive (inf allowed)")
        object.__setattr__(self, "shapes", shapes)


@lru_cache(maxsize=32)
def _window_geometry(h: int, w: int, m: int, n: int):
    """Flat gather indices, validity mask and center indices for (m, n)
    windows around every pixel of an (h, w) image; invalid neighbours
    point at 0 and are masked off."""
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    di, dj = np.meshgrid(
        np.arange(m) - m // 2, np.arange(n) - n // 2, indexing="ij"
    )
    ni = ii[:, :, None, None] + di[None, None]
    nj = jj[:, :, None, None] + dj[None, None]
    valid = (ni >= 0) & (ni < h) & (nj >= 0) & (nj < w)
    flat = np.where(valid, ni * w + nj, 0).reshape(h, w, m * n).astype(np.int64)
    mask = valid.astype(np.float64).reshape(h, w, m * n)
    center = np.broadcast_to((ii * w + jj)[:, :, None], (h, w, m * n)).astype(np.int64)
    for a in (flat, mask, center):
        a.setflags(write=False)
    return flat, mask, center


def identity_weights(chain: FilterChain, h: int, w: int) -> list:
    """Softmax logits that make every filter (near-)identity: a large
    logit on the center tap, zero elsewhere."""
    out = []
    for m, n in chain.shapes:
        theta = np.zeros((h, w, m * n))
        theta[:, :, (m // 2) * n + n // 2] = IDENTITY_LOGIT
        out.append(theta)
    return out


def color_kernel(x: Tensor, i: int, j: int, shape: tuple, sigma_c: float) -> np.ndarray:
    """Reference (m, n) color kernel at pixel (i, j): exp of the scaled
    squared intensity difference to the center, zero outside the image."""
    m, n = shape
    img = x.array
    h, w = img.shape
    out = np.zeros((m, n))
    for a in range(m):
        for b in range(n):
            ni, nj = i + a - m // 2, j + b - n // 2
            if 0 <= ni < h and 0 <= nj < w:
                if math.isinf(sigma_c):
                    out[a, b] = 1.0
                else:
                    d = img[i, j] - img[ni, nj]
                    out[a, b] = math.exp(-(d * d) / (2.0 * sigma_c ** 2))
    return out


def of_apply(x, theta, shape: tuple, sigma_c: float, color_src=None):
    """One optimizable filter: out = sum over the window of
    x_window * normalize(color_kernel * softmax(theta)).

    The output at each pixel is a convex combination of the in-image
    window values, so filtering cannot leave the input's value range.
    x, theta and color_src may be Vars or Tensors.
    """
    m, n = shape
    h, w = ag.value_of(x).shape
    if ag.value_of(theta).shape != (h, w, m * n):
        raise ConfigurationError("theta must have shape (h, w, m*n)")
    flat, mask, center = _window_geometry(h, w, m, n)
    if color_src is None:
        color_src = x
    win = ag.gather(x, flat)
    weight = ag.softmax(theta)
    if math.isinf(sigma_c):
        color = Tensor(mask)
    else:
        cwin = ag.gather(color_src, flat)
        cctr = ag.gather(color_src, center)
        diff2 = ag.square(ag.sub(cctr, cwin))
        color = ag.mul(ag.exp(ag.scale(diff2, -0.5 / sigma_c ** 2)), Tensor(mask))
    raw = ag.mul(color, weight)
    denom = ag.vsum(raw, axis=-1)
    v = ag.div(raw, ag.gather(denom, center))
    return ag.vsum(ag.mul(win, v), axis=-1)


def chain_apply(x, thetas: list, chain: FilterChain):
    """Apply every filter in order; thetas holds one logit tensor each."""
    if len(thetas) != len(chain.shapes):
        raise ConfigurationError("one theta per filter required")
    cur = x
    for theta, shape in zip(thetas, chain.shapes):
        src = x if chain.color_from_original else cur
        cur = of_apply(cur, theta, shape, chain.sigma_c, color_src=src)
    return cur


# ---------------------------------------------------------------------------
# perceptual distance proxy

_PROXY_FILTERS = 8
_PROXY_KSIZE = 3
_PROXY_SEED = 0x70726F7879  # fixed; the banks are part of the metric's identity


@lru_cache(maxsize=4)
def _proxy_bank(scale_idx: int) -> np.ndarray:
    g = stream(_PROXY_SEED, "perceptual-proxy", scale_idx)
    bank = g.standard_normal((_PROXY_FILTERS, _PROXY_KSIZE, _PROXY_KSIZE)) / 3.0
    bank.setflags(write=False)
    return bank


def _halve(img):
    """2x2 mean pool with stride 2 (even extents assumed)."""
    h, w = ag.value_of(img).shape
    pooled = ag.conv2d(img, Tensor(np.full((2, 2), 0.25)))
    ph, pw = h - 1, w - 1
    idx = (2 * np.arange(h // 2))[:, None] * pw + 2 * np.arange(w // 2)[None, :]
    return ag.gather(pooled, idx)


def _unit_features(img, bank: np.ndarray):
    """Per-filter activations, normalised to unit length across filters
    at every spatial position."""
    acts = [ag.conv2d(img, Tensor(bank[f])) for f in range(bank.shape[0])]
    ssq = ag.square(acts[0])
    for a in acts[1:]:
        ssq = ag.add(ssq, ag.square(a))
    norm = ag.sqrt(ag.shift(ssq, 1e-12))
    return [ag.div(a, norm) for a in acts]


def perceptual_distance(a, b):
    """Feature-space distance between two images at two scales.

    Unit-normalised activations of fixed random conv banks are compared
    by mean squared difference and averaged over scales and filters.
    Zero exactly when a and b are identical.
    """
    ha, wa = ag.value_of(a).shape
    if ag.value_of(b).shape != (ha, wa):
        raise ConfigurationError("images must share a shape")
    if ha // 2 < _PROXY_KSIZE or wa // 2 < _PROXY_KSIZE:
        raise ConfigurationError("image too small for the two-scale proxy")
    total = None
    xa, xb = a, b
    for s in range(2):
        if s == 1:
            xa, xb = _halve(xa), _halve(xb)
        bank = _proxy_bank(s)
        fa = _unit_features(xa, bank)
        fb = _unit_features(xb, bank)
        for qa, qb in zip(fa, fb):
            term = ag.vmean(ag.vmean(ag.square(ag.sub(qa, qb)), axis=-1))
            total = term if total is None else ag.add(total, term)
    return ag.scale(total, 1.0 / (2 * _PROXY_FILTERS))


# ---------------------------------------------------------------------------
# reparameterisation and optimiser

_ATANH_MARGIN = 1e-6


def arctanh_reparam(x: Tensor, min_val: float, max_val: float) -> Tensor:
    """Map box-constrained values to the unconstrained tanh preimage."""
    if not min_val < max_val:
        raise ConfigurationError("min_val must be below max_val")
    z = 2.0 * (x.array - min_val) / (max_val - min_val) - 1.0
    z = np.clip(z, -1.0 + _ATANH_MARGIN, 1.0 - _ATANH_MARGIN)
    return Tensor(np.arctanh(z))


def tanh_scale(u, min_val: float, max_val: float):
    """Inverse of arctanh_reparam; output always lies inside the box."""
    half = 0.5 * (max_val - min_val)
    return ag.shift(ag.scale(ag.shift(ag.tanh(u), 1.0), half), min_val)


class Adam(object):
    """Adam with explicit gradient accumulation across passes.

    accumulate() sums raw gradients; step() applies one update from the
    accumulated sum (bias-corrected moments, per-parameter learning rate)
    and is followed by zero_grad() in the usual loop.
    """

    def __init__(self, params, lrs, beta1=0.9, beta2=0.999, eps=1e-8):
        if len(params) != len(lrs):
            raise ConfigurationError("one learning rate per parameter")
        self.params = params
        self.lrs = list(lrs)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.g = [np.zeros_like(p) for p in params]

    def accumulate(self, grads):
        for buf, g in zip(self.g, grads):
            buf += g.array if isinstance(g, Tensor) else g

    def zero_grad(self):
        for buf in self.g:
            buf[:] = 0.0

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, lr, m, v, g in zip(self.params, self.lrs, self.m, self.v, self.g):
            m[:] = self.beta1 * m + (1.0 - self.beta1) * g
            v[:] = self.beta2 * v + (1.0 - self.beta2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---------------------------------------------------------------------------
# attack drivers


@dataclass(frozen=True)
class AttackConfig:
    """Shared attack settings; lf_* and filter fields only matter for the
    low-frequency attack, eps_inf/eta only for pgd."""

    kind: str = "pgd"
    eps_inf: float = 0.3
    iters: int = 50
    eot_n: int = 10
    success: str = "sp"
    eta: float | None = None
    min_val: float = 0.0
    max_val: float = 1.0
    seed: int = 0
    eot_steps: int = 2
    lf_copies: int = 5
    lr_delta: float = 0.008
    lr_filters: float = 0.05
    c: float = 1e4
    tau_p: float = 0.05
    chain: FilterChain = field(default_factory=FilterChain)

    def __post_init__(self):
        if self.kind not in ("pgd", "lf"):
            raise ConfigurationError(f"unknown attack kind {self.kind!r}")
        if self.success not in SUCCESS_LEVELS:
            raise ConfigurationError(f"unknown success level {self.success!r}")
        if self.eps_inf < 0.0 or self.iters < 0:
            raise ConfigurationError("eps_inf and iters must be non-negative")
        if self.eot_n < 1 or self.eot_steps < 1 or self.lf_copies < 1:
            raise ConfigurationError("eot_n, eot_steps and lf_copies must be >= 1")
        if not self.min_val < self.max_val:
            raise ConfigurationError("min_val must be below max_val")
        if self.eta is not None and self.eta <= 0.0:
            raise ConfigurationError("eta must be positive when given")
        if self.tau_p < 0.0 or self.c < 0.0:
            raise ConfigurationError("tau_p and c must be non-negative")

    @property
    def step_size(self) -> float:
        return self.eta if self.eta is not None else self.eps_inf / 4.0


@dataclass
class IterRecord:
    """One attack iteration as written to trace output."""

    iteration: int
    phase: str  # "iter" or "final"
    mean_loss: float
    dist: float
    preds: list
    outcomes: list
    success: bool


@dataclass
class AttackResult:
    x_adv: Tensor
    success: bool
    iterations: int
    final_preds: list
    final_outcomes: list
    trace: list


def success_of(level: str, preds, y: int) -> bool:
    """Whether a batch of per-copy predictions counts as a break."""
    if level == "sp":
        return preds[0] != y
    if level == "wor":
        return any(p != y for p in preds)
    if level == "mv":
        return majority_vote(preds) != y
    raise ConfigurationError(f"unknown success level {level!r}")


def pgd_attack(
    x: Tensor,
    y: int,
    cfg: AttackConfig,
    pipe: DefensePipeline,
    mode: GradMode,
    seed: int | None = None,
) -> AttackResult:
    """EOT-PGD under an L-infinity ball intersected with the value box.

    Each iteration evaluates the current iterate (n purification paths),
    stops early on success at that evaluated point, otherwise takes a
    signed step on the mean gradient.  After the budget the final iterate
    is judged by one last outcome-only evaluation.
    """
    seed = cfg.seed if seed is None else seed
    x0 = x.array
    lo = np.maximum(x0 - cfg.eps_inf, cfg.min_val)
    hi = np.minimum(x0 + cfg.eps_inf, cfg.max_val)
    cur = np.clip(x0, lo, hi)
    trace = []
    for it in range(cfg.iters):
        es = eot_paths(Tensor(cur), y, cfg.eot_n, pipe, mode, iteration_seed(seed, it))
        hit = success_of(cfg.success, es.preds, y)
        dist = float(np.max(np.abs(cur - x0)))
        trace.append(IterRecord(it, "iter", es.mean_loss(), dist, es.preds, es.outcomes, hit))
        if hit:
            return AttackResult(Tensor(cur), True, it + 1, es.preds, es.outcomes, trace)
        cur = np.clip(cur - cfg.step_size * np.sign(es.gradient.array), lo, hi)
        assert float(np.max(np.abs(cur - x0))) <= cfg.eps_inf + 1e-12
    es = defense_outcomes(Tensor(cur), y, cfg.eot_n, pipe, iteration_seed(seed, cfg.iters))
    hit = success_of(cfg.success, es.preds, y)
    dist = float(np.max(np.abs(cur - x0)))
    trace.append(IterRecord(cfg.iters, "final", es.mean_loss(), dist, es.preds, es.outcomes, hit))
    return AttackResult(Tensor(cur), hit, cfg.iters, es.preds, es.outcomes, trace)


def lf_attack(
    x: Tensor,
    y: int,
    cfg: AttackConfig,
    pipe: DefensePipeline,
    seed: int | None = None,
    mode: GradMode = GradMode("full-checkpoint"),
    grid: tuple | None = None,
) -> AttackResult:
    """Low-frequency attack: optimise filter logits and a tanh-space
    perturbation under a perceptual distance budget.

    x is the flat vector the defense consumes; grid says how to view it
    as an image for filtering (taken from x itself when it is 2-d).
    Every pass purifies lf_copies paths of the candidate and accumulates
    the gradient of  mean attack loss + c * max(dist - tau_p, 0)  into
    Adam, which steps once per eot_steps passes.  Success requires the
    batch condition and dist <= tau_p at the same candidate; on failure
    the original input is returned.
    """
    seed = cfg.seed if seed is None else seed
    if x.array.ndim == 2:
        grid = x.shape
    if grid is None:
        raise ConfigurationError("grid shape needed to view a flat input as an image")
    h, w = grid
    if h * w != x.size:
        raise ConfigurationError(f"grid {grid} does not match input size {x.size}")
    img = Tensor(x.array.reshape(h, w))
    flat_idx = np.arange(h * w, dtype=np.int64)
    chain = cfg.chain
    thetas = identity_weights(chain, h, w)
    delta = np.zeros((h, w))
    optim = Adam(
        thetas + [delta],
        [cfg.lr_filters] * len(thetas) + [cfg.lr_delta],
    )
    x_inv = arctanh_reparam(img, cfg.min_val, cfg.max_val)
    trace = []
    total_passes = cfg.iters * cfg.eot_steps
    for it in range(1, total_passes + 1):
        tape = Tape()
        tvars = [tape.input(Tensor(t)) for t in thetas]
        dvar = tape.input(Tensor(delta))
        x_adv_img = chain_apply(tanh_scale(ag.add(x_inv, dvar), cfg.min_val, cfg.max_val), tvars, chain)
        dist_var = perceptual_distance(img, x_adv_img)
        dist = float(ag.value_of(dist_var))
        x_adv_var = ag.gather(x_adv_img, flat_idx)  # exact flatten
        x_adv = Tensor(ag.value_of(x_adv_var).reshape(x.shape))
        es = eot_paths(x_adv, y, cfg.lf_copies, pipe, mode, iteration_seed(seed, it))
        hit = success_of(cfg.success, es.preds, y)
        trace.append(IterRecord(it, "iter", es.mean_loss(), dist, es.preds, es.outcomes, hit and dist <= cfg.tau_p))
        if hit and dist <= cfg.tau_p:
            return AttackResult(x_adv, True, it, es.preds, es.outcomes, trace)
        # classification term enters through its gradient at x_adv; the
        # penalty branch below is the exact subgradient of max(., 0)
        obj = ag.vsum(ag.mul(x_adv_var, Tensor(es.gradient.array.reshape(-1))))
        if dist > cfg.tau_p:
            obj = ag.add(obj, ag.scale(ag.shift(dist_var, -cfg.tau_p), cfg.c))
        cots = tape_backward(obj, Tensor(np.float64(1.0)), tvars + [dvar])
        optim.accumulate(cots)
        if it % cfg.eot_steps == 0:
            optim.step()
            optim.zero_grad()
    es = defense_outcomes(x, y, cfg.lf_copies, pipe, derive_seed(seed, "final"))
    trace.append(IterRecord(total_passes, "final", es.mean_loss(), 0.0, es.preds, es.outcomes, False))
    return AttackResult(x, False, total_passes, es.preds, es.outcomes, trace)
