"""Score models with closed-form ground truth.

The data distribution is an isotropic Gaussian mixture, so the noised
marginals and their score are available in closed form at every diffusion
time.  That makes every downstream gradient checkable against quadrature
or finite differences instead of against a trained network.

All evaluation paths are written with autodiff primitives, so the same
code runs on plain tensors (recording off) and on tape variables
(recording on) and produces bitwise-identical values either way.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ag
from .autodiff import Tensor
from .errors import ConfigurationError
from .rng import normal, stream
from .schedule import NoiseSchedule

__all__ = [
    "GaussianMixtureData",
    "marginal_params",
    "AnalyticMixtureScore",
    "MlpScore",
    "score_eval",
    "score_vjp",
    "squared_dists",
    "unit_gaussian",
    "make_stripe_mixture",
    "sample_dataset",
]


@dataclass(frozen=True)
class GaussianMixtureData:
    """Isotropic Gaussian mixture: weights (K,), means (K, d), shared sigma."""

    weights: np.ndarray
    means: np.ndarray
    sigma: float

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        m = np.asarray(self.means, dtype=np.float64)
        if w.ndim != 1 or m.ndim != 2 or w.shape[0] != m.shape[0]:
            raise ConfigurationError("weights must be (K,) and means (K, d)")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(m))):
            raise ConfigurationError("mixture parameters must be finite")
        if np.any(w <= 0.0) or abs(float(w.sum()) - 1.0) > 1e-12:
            raise ConfigurationError("weights must be positive and sum to 1")
        if not (self.sigma > 0.0 and math.isfinite(self.sigma)):
            raise ConfigurationError("sigma must be positive and finite")
        w = w.copy()
        m = m.copy()
        w.setflags(write=False)
        m.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", m)

    @property
    def n_components(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]


def unit_gaussian(dim: int) -> GaussianMixtureData:
    """Single standard-normal component; its score is exactly -x at all t."""
    return GaussianMixtureData(np.ones(1), np.zeros((1, dim)), 1.0)


def marginal_params(mix: GaussianMixtureData, t: float, sched: NoiseSchedule):
    """Noised-marginal parameters at time t.

    Component k of x(t) is N(sqrt(alpha) * mu_k, (alpha * sigma^2 + 1 - alpha) I).
    Returns (means_t, var_t) with means_t shaped (K, d).
    """
    a = sched.alpha(t)
    means_t = math.sqrt(a) * mix.means
    var_t = a * mix.sigma ** 2 + (1.0 - a)
    return means_t, var_t


def _tile_indices(k: int, d: int) -> np.ndarray:
    # Gather map that repeats a (d,) vector into (K, d).
    return np.tile(np.arange(d, dtype=np.int64), k).reshape(k, d)


def squared_dists(x, means: np.ndarray):
    """Per-component ||x - means[k]||^2 as a (K,) value; x may be a Var."""
    k, d = means.shape
    x_tiled = ag.gather(x, _tile_indices(k, d))
    diff = ag.sub(x_tiled, Tensor(means))
    return ag.vsum(ag.square(diff), axis=-1)


@dataclass(frozen=True)
class AnalyticMixtureScore:
    """Exact score of the noised mixture marginal.

    score(x, t) = -(x - sum_k r_k(x) m_k(t)) / v(t) with softmax
    responsibilities r computed from the stabilised component
    log-densities, so the unit Gaussian gives score(x, t) = -x exactly.
    """

    mix: GaussianMixtureData
    sched: NoiseSchedule

    def eval(self, x, t: float):
        means_t, var_t = marginal_params(self.mix, t, self.sched)
        d = self.mix.dim
        ssq = squared_dists(x, means_t)
        log_prior = np.log(self.mix.weights) - 0.5 * d * math.log(2.0 * math.pi * var_t)
        logits = ag.add(ag.scale(ssq, -0.5 / var_t), Tensor(log_prior))
        resp = ag.softmax(logits)
        mean_mix = ag.matmul(resp, Tensor(means_t))
        return ag.scale(ag.sub(x, mean_mix), -1.0 / var_t)


@dataclass(frozen=True)
class MlpScore:
    """Small fixed-weight tanh network s(x, t); stands in for a learned score.

    Weights are drawn once from a seeded stream, then frozen.  Gradients
    through it have no closed form, which is exactly what the finite
    difference checks are for.
    """

    dim: int
    hidden: int = 32
    seed: int = 0
    _params: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        g = stream(self.seed, "mlp-score")
        n_in = self.dim + 1
        w1 = g.standard_normal((self.hidden, n_in)) / math.sqrt(n_in)
        b1 = g.standard_normal(self.hidden) * 0.1
        w2 = g.standard_normal((self.dim, self.hidden)) * (0.5 / math.sqrt(self.hidden))
        b2 = g.standard_normal(self.dim) * 0.01
        for a in (w1, b1, w2, b2):
            a.setflags(write=False)
        object.__setattr__(self, "_params", (w1, b1, w2, b2))

    def eval(self, x, t: float):
        w1, b1, w2, b2 = self._params
        inp = ag.concat([x, Tensor(np.array([t]))])
        h = ag.tanh(ag.add(ag.matmul(Tensor(w1), inp), Tensor(b1)))
        return ag.add(ag.matmul(Tensor(w2), h), Tensor(b2))


def score_eval(model, x, t: float):
    """Evaluate a score model; polymorphic over Tensor and Var inputs."""
    return model.eval(x, t)


def score_vjp(model, x: Tensor, t: float, cotangent: Tensor) -> Tensor:
    """cotangent^T d score / d x via one recorded evaluation."""
    tape = ag.Tape()
    xv = tape.input(x)
    s = score_eval(model, xv, t)
    return ag.tape_backward(s, cotangent, [xv])[0]


def _stripe_template(k: int, rows: int, cols: int, g) -> np.ndarray:
    rr, cc = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    if k == 0:
        parity = rr % 2
    elif k == 1:
        parity = cc % 2
    elif k == 2:
        parity = (rr + cc) % 2
    else:
        # beyond three classes fall back to a seeded random sign pattern
        parity = (g.random((rows, cols)) < 0.5).astype(np.int64)
    return np.where(parity == 0, 1.0, -1.0).reshape(-1)


def make_stripe_mixture(
    n_classes: int = 3,
    grid: tuple[int, int] = (8, 8),
    sigma: float = 0.08,
    amplitude: float = 0.2,
    base: float = 0.5,
    seed: int = 0,
) -> GaussianMixtureData:
    """Toy image classes: striped patterns on a small grid.

    Class means are base +/- amplitude stripes (rows, columns, diagonals),
    any two of which differ on exactly half the pixels for the first three
    classes.  Pixel values stay within [base - amplitude, base + amplitude].
    """
    rows, cols = grid
    if n_classes < 1 or rows < 2 or cols < 2:
        raise ConfigurationError("need at least 1 class on a 2x2 or larger grid")
    g = stream(seed, "stripe-templates")
    means = np.stack(
        [base + amplitude * _stripe_template(k, rows, cols, g) for k in range(n_classes)]
    )
    weights = np.full(n_classes, 1.0 / n_classes)
    return GaussianMixtureData(weights, means, sigma)


def sample_dataset(
    mix: GaussianMixtureData,
    n_samples: int,
    seed: int,
    clip: tuple[float, float] | None = (0.0, 1.0),
):
    """Draw labelled samples, one per stream index so order never matters.

    Labels cycle through the classes round-robin.  Returns (samples, labels)
    with samples a list of (d,) Tensors.
    """
    labels = np.arange(n_samples, dtype=np.int64) % mix.n_components
    samples = []
    for i in range(n_samples):
        eps = normal(seed, "dataset", i, shape=(mix.dim,))
        x = mix.means[labels[i]] + mix.sigma * eps
        if clip is not None:
            x = np.clip(x, clip[0], clip[1])
        samples.append(Tensor(x))
    return samples, labels
