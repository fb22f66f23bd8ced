"""Evaluation protocols: how per-copy attack outcomes become robustness.

An outcome matrix holds one row per sample and one 0/1 entry per
purification copy (1 = that copy misclassified).  The three aggregate
metrics differ only in how they collapse a row; the evaluation driver
differs in *which* outcomes form the decisive row for each sample.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError
from .gradients import DefensePipeline, defense_outcomes
from .rng import derive_seed

__all__ = [
    "OutcomeMatrix",
    "majority_vote",
    "wor_rob",
    "avg_rob",
    "mv_rob",
    "EvalConfig",
    "SampleRow",
    "MetricsReport",
    "evaluate_defense",
]


@dataclass(frozen=True)
class OutcomeMatrix:
    """Binary attack outcomes, shape (samples, copies)."""

    a: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.a)
        if m.ndim != 2 or m.size == 0:
            raise ConfigurationError("outcome matrix must be 2-d and non-empty")
        if not np.isin(m, (0, 1)).all():
            raise ConfigurationError("outcomes must be 0 or 1")
        m = m.astype(np.uint8)
        m.setflags(write=False)
        object.__setattr__(self, "a", m)

    @property
    def n_samples(self) -> int:
        return self.a.shape[0]

    @property
    def n_copies(self) -> int:
        return self.a.shape[1]


def majority_vote(labels) -> int:
    """Most frequent label; ties resolve to the smallest label."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1 or labels.size == 0:
        raise ConfigurationError("majority vote needs a non-empty label vector")
    if np.any(labels < 0):
        raise ConfigurationError("labels must be non-negative")
    return int(np.argmax(np.bincount(labels)))


def wor_rob(m: OutcomeMatrix) -> float:
    """Worst-case robustness: a sample stands only if every copy stood."""
    return float(1.0 - np.mean(np.max(m.a, axis=1)))


def avg_rob(m: OutcomeMatrix) -> float:
    """Average robustness over all sample/copy pairs."""
    return float(1.0 - np.mean(m.a))


def mv_rob(mv_preds, true_labels) -> float:
    """Majority-vote robustness from per-sample voted predictions."""
    mv_preds = np.asarray(mv_preds, dtype=np.int64)
    true_labels = np.asarray(true_labels, dtype=np.int64)
    if mv_preds.shape != true_labels.shape or mv_preds.ndim != 1 or mv_preds.size == 0:
        raise ConfigurationError("prediction and label vectors must match")
    return float(np.mean(mv_preds == true_labels))


@dataclass(frozen=True)
class EvalConfig:
    """Evaluation protocol settings.

    mode "wor": the decisive row is the attack's outcomes at the returned
    sample.  mode "mv": k-copy majority vote decides.  mode "sp-final":
    the returned sample is re-purified on r fresh replicas and counts as
    broken if any replica misclassifies (r = 1 is the legacy one-shot).
    fresh_eval redraws the decisive outcomes instead of reusing the
    attack's own evaluation.
    """

    mode: str = "sp-final"
    replicas: int = 20
    k: int = 9
    fresh_eval: bool = False

    def __post_init__(self):
        if self.mode not in ("sp-final", "wor", "mv"):
            raise ConfigurationError(f"unknown eval mode {self.mode!r}")
        if self.replicas < 1 or self.k < 1:
            raise ConfigurationError("replicas and k must be >= 1")


@dataclass
class SampleRow:
    """Per-sample evaluation record for reporting."""

    index: int
    label: int
    clean_pred: int
    clean_correct: bool
    attack_success: bool
    iterations: int
    outcomes: list
    preds: list
    broken: bool


@dataclass
class MetricsReport:
    mode: str
    clean_acc: float
    robust_acc: float
    wor: float
    mv: float
    avg: float
    matrix: OutcomeMatrix
    rows: list


def _clean_copies(eval_cfg: EvalConfig) -> int:
    return eval_cfg.k if eval_cfg.mode == "mv" else 1


def _evaluate_sample(j, x, y, attack_fn, eval_cfg, pipe, seed) -> SampleRow:
    y = int(y)
    sample_seed = derive_seed(seed, "sample", j)

    clean = defense_outcomes(x, y, _clean_copies(eval_cfg), pipe, derive_seed(sample_seed, "clean"))
    if eval_cfg.mode == "mv":
        clean_pred = majority_vote(clean.preds)
    else:
        clean_pred = clean.preds[0]

    res = attack_fn(x, y, derive_seed(sample_seed, "attack"))

    if eval_cfg.mode == "sp-final":
        rep = defense_outcomes(
            res.x_adv, y, eval_cfg.replicas, pipe, derive_seed(sample_seed, "final")
        )
        preds, outcomes = rep.preds, rep.outcomes
    elif eval_cfg.fresh_eval:
        n = eval_cfg.k if eval_cfg.mode == "mv" else len(res.final_outcomes)
        rep = defense_outcomes(res.x_adv, y, n, pipe, derive_seed(sample_seed, "fresh"))
        preds, outcomes = rep.preds, rep.outcomes
    else:
        preds, outcomes = list(res.final_preds), list(res.final_outcomes)

    if eval_cfg.mode == "mv":
        if eval_cfg.k > len(preds):
            raise ConfigurationError(
                f"mv wants {eval_cfg.k} copies but only {len(preds)} are available"
            )
        preds = preds[: eval_cfg.k]
        outcomes = outcomes[: eval_cfg.k]
        broken = majority_vote(preds) != y
    else:
        broken = any(outcomes)

    return SampleRow(
        index=j,
        label=y,
        clean_pred=clean_pred,
        clean_correct=clean_pred == y,
        attack_success=bool(res.success),
        iterations=res.iterations,
        outcomes=list(outcomes),
        preds=list(preds),
        broken=bool(broken),
    )


def evaluate_defense(
    dataset,
    attack_fn,
    eval_cfg: EvalConfig,
    pipe: DefensePipeline,
    seed: int,
    mapper=map,
) -> MetricsReport:
    """Attack every sample and aggregate under the chosen protocol.

    dataset is (samples, labels); attack_fn(x, y, seed) returns an
    AttackResult-shaped object (x_adv, success, iterations, final_preds,
    final_outcomes).  Clean accuracy uses the protocol's own prediction
    rule: one copy for sp-final/wor, a k-copy majority for mv.  Samples
    are independent, so any order-preserving mapper (e.g. a thread
    pool's) yields identical results.
    """
    samples, labels = dataset
    if len(samples) == 0 or len(samples) != len(labels):
        raise ConfigurationError("dataset must be non-empty and consistent")
    rows = list(
        mapper(
            lambda args: _evaluate_sample(args[0], args[1], args[2], attack_fn, eval_cfg, pipe, seed),
            [(j, x, int(y)) for j, (x, y) in enumerate(zip(samples, labels))],
        )
    )
    mv_preds = [majority_vote(r.preds) for r in rows] if eval_cfg.mode == "mv" else []
    matrix = OutcomeMatrix(np.array([r.outcomes for r in rows], dtype=np.uint8))
    clean_acc = float(np.mean([r.clean_correct for r in rows]))
    robust_acc = float(1.0 - np.mean([r.broken for r in rows]))
    mv_metric = (
        mv_rob(mv_preds, [int(v) for v in labels]) if eval_cfg.mode == "mv" else float("nan")
    )
    return MetricsReport(
        mode=eval_cfg.mode,
        clean_acc=clean_acc,
        robust_acc=robust_acc,
        wor=wor_rob(matrix),
        mv=mv_metric,
        avg=avg_rob(matrix),
        matrix=matrix,
        rows=rows,
    )
