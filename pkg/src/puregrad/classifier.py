"""Downstream classifiers and the attack losses defined on their logits."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ag
from .autodiff import Tensor
from .errors import ConfigurationError
from .scoremodel import GaussianMixtureData, squared_dists

__all__ = [
    "BayesMixtureClassifier",
    "LinearSoftmaxClassifier",
    "predict",
    "max_margin_loss",
    "prob_y_loss",
    "loss_expr",
    "LOSS_KINDS",
]

LOSS_KINDS = ("max-margin", "prob-y")


@dataclass(frozen=True)
class BayesMixtureClassifier:
    """Exact posterior classifier for the mixture the data was drawn from.

    logit_k(x) = log pi_k - ||x - mu_k||^2 / (2 sigma^2) - d/2 log(2 pi sigma^2),
    i.e. unnormalised log posterior; argmax matches the Bayes decision.
    """

    mix: GaussianMixtureData

    @property
    def n_classes(self) -> int:
        return self.mix.n_components

    def logits(self, x):
        m = self.mix
        const = -0.5 * m.dim * math.log(2.0 * math.pi * m.sigma ** 2)
        log_prior = np.log(m.weights) + const
        ssq = squared_dists(x, m.means)
        return ag.add(ag.scale(ssq, -0.5 / m.sigma ** 2), Tensor(log_prior))


@dataclass(frozen=True)
class LinearSoftmaxClassifier:
    """Plain affine logits W x + b."""

    W: Tensor
    b: Tensor

    def __post_init__(self):
        if self.W.array.ndim != 2 or self.b.array.ndim != 1:
            raise ConfigurationError("W must be (C, d) and b (C,)")
        if self.W.shape[0] != self.b.shape[0]:
            raise ConfigurationError("W and b disagree on the class count")

    @property
    def n_classes(self) -> int:
        return self.b.shape[0]

    def logits(self, x):
        return ag.add(ag.matmul(self.W, x), self.b)


def predict(logits) -> int:
    """Argmax class; ties resolve to the smallest index."""
    return int(np.argmax(ag.value_of(logits)))


def _check_label(y: int, n: int) -> int:
    y = int(y)
    if not 0 <= y < n:
        raise ConfigurationError(f"label {y} outside 0..{n - 1}")
    return y


def max_margin_loss(logits, y: int):
    """logit_y - max over other classes; negative iff misclassified."""
    n = ag.value_of(logits).shape[0]
    y = _check_label(y, n)
    if n < 2:
        raise ConfigurationError("margin needs at least two classes")
    own = ag.gather(logits, np.array(y, dtype=np.int64))
    rest = np.array([j for j in range(n) if j != y], dtype=np.int64)
    other = ag.vmax(ag.gather(logits, rest))
    return ag.sub(own, other)


def prob_y_loss(logits, y: int):
    """Softmax probability of the true class."""
    n = ag.value_of(logits).shape[0]
    y = _check_label(y, n)
    return ag.gather(ag.softmax(logits), np.array(y, dtype=np.int64))


def loss_expr(kind: str, logits, y: int):
    if kind == "max-margin":
        return max_margin_loss(logits, y)
    if kind == "prob-y":
        return prob_y_loss(logits, y)
    raise ConfigurationError(f"unknown loss kind {kind!r}")
