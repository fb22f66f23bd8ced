"""Controlled gradient-flaw experiments.

Each experiment compares a faithful gradient g_f with a deliberately
flawed one g_nf under the same stochastic path and reports

    g_d = ||g_f - g_nf||_2          (absolute deviation)
    g_e = g_d / max(||g_f||_2, eps) (relative deviation)

The flaws studied: estimator variance across EOT sizes, injected solver
time drift, dropping the guidance chain-rule term, and backpropagating a
coarse surrogate against states produced by the fine process.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ag
from .autodiff import Tape, Tensor, tape_backward
from .errors import ConfigurationError
from .gradients import (
    DefensePipeline,
    GradMode,
    GradResult,
    checkpoint_backward,
    eot_gradient,
    loss_cotangent,
    _coarse_config,
)
from .purifier import make_sampler, purify_forward, reverse_step, step_noise_for
from .rng import derive_seed

__all__ = [
    "rel_error",
    "FlawReport",
    "eot_variance_experiment",
    "time_drift_experiment",
    "guidance_omission_experiment",
    "surrogate_mismatch_experiment",
    "flawed_surrogate_backward",
]

_EPS = 1e-12


def rel_error(g_f: Tensor, g_nf: Tensor):
    """(g_d, g_e) between a faithful and a flawed gradient."""
    if g_f.shape != g_nf.shape:
        raise ConfigurationError("gradients must share a shape")
    g_d = float(np.linalg.norm(g_f.array - g_nf.array))
    g_e = g_d / max(float(np.linalg.norm(g_f.array)), _EPS)
    return g_d, g_e


@dataclass
class FlawReport:
    """One experiment's sweep: xs is the swept quantity, the parallel
    lists hold the measured deviations (entries may be nan where a
    metric does not apply)."""

    experiment: str
    xs: list
    g_d: list
    g_e: list
    trials: int
    seed: int


def _single_path_grad(pipe: DefensePipeline, x: Tensor, y: int, seed: int) -> GradResult:
    cfg = replace(pipe.cfg, copies=1)
    outputs, state = purify_forward(x, cfg, pipe.model, pipe.sched, seed)
    _, cot, _ = loss_cotangent(pipe, outputs[0], y)
    return checkpoint_backward(cot, state, pipe.model, pipe.sched, copy=0)


def eot_variance_experiment(
    pipe: DefensePipeline,
    x: Tensor,
    y: int,
    n_grid=(4, 16, 64),
    trials: int = 20,
    seed: int = 0,
    mode: GradMode = GradMode("full-checkpoint"),
) -> FlawReport:
    """Spread of the EOT gradient across re-seeds, per sample count N.

    For each N the gradient is estimated `trials` times on fresh paths and
    the mean over i of max_j ||g_i - g_j||_2 is reported in g_d.  With
    zero_noise set on the purifier all estimates coincide and the spread
    is exactly zero.
    """
    if trials < 1:
        raise ConfigurationError("need at least one trial")
    g_d_mean = []
    for n in n_grid:
        grads = [
            eot_gradient(x, y, int(n), pipe, mode, derive_seed(seed, "trial", int(n), i)).array
            for i in range(trials)
        ]
        dists = np.array(
            [[np.linalg.norm(gi - gj) for gj in grads] for gi in grads]
        )
        g_d_mean.append(float(np.mean(np.max(dists, axis=1))))
    return FlawReport(
        experiment="eot-variance",
        xs=[int(n) for n in n_grid],
        g_d=g_d_mean,
        g_e=[float("nan")] * len(list(n_grid)),
        trials=trials,
        seed=seed,
    )


def time_drift_experiment(
    pipe: DefensePipeline,
    x: Tensor,
    y: int,
    tstar_grid=(0.02, 0.04, 0.06, 0.08, 0.1),
    delta_round: float = 2.0 ** -23,
    seed: int = 0,
) -> FlawReport:
    """Gradient error from a per-step solver time offset i * delta_round.

    The faithful and drifted runs share every noise draw (draws are keyed
    by step ordinal, not by time), so the deviation isolates the drift.
    delta_round = 0 must give g_d = g_e = 0 exactly.
    """
    g_ds, g_es = [], []
    for t_star in tstar_grid:
        base_cfg = replace(pipe.cfg, t_star=float(t_star), time_drift=0.0)
        drift_cfg = replace(base_cfg, time_drift=delta_round)
        g_f = _single_path_grad(replace(pipe, cfg=base_cfg), x, y, seed).total
        g_nf = _single_path_grad(replace(pipe, cfg=drift_cfg), x, y, seed).total
        g_d, g_e = rel_error(g_f, g_nf)
        g_ds.append(g_d)
        g_es.append(g_e)
    return FlawReport(
        experiment="time-drift",
        xs=[float(t) for t in tstar_grid],
        g_d=g_ds,
        g_e=g_es,
        trials=1,
        seed=seed,
    )


def guidance_omission_experiment(
    pipe: DefensePipeline,
    x: Tensor,
    y: int,
    tstar_grid=(0.006, 0.012, 0.024, 0.036),
    seed: int = 0,
) -> FlawReport:
    """Gradient error from dropping the guidance chain-rule term.

    One guided run per diffusion horizon; g_f is the full gradient, g_nf
    keeps only the direct part.  Longer guided chains accumulate more
    omitted paths, so g_e should grow with t*.
    """
    if not pipe.cfg.guidance.enabled:
        raise ConfigurationError("guidance omission needs a guided purifier")
    g_ds, g_es = [], []
    for t_star in tstar_grid:
        cfg = replace(pipe.cfg, t_star=float(t_star))
        res = _single_path_grad(replace(pipe, cfg=cfg), x, y, seed)
        g_d, g_e = rel_error(res.total, res.grad)
        g_ds.append(g_d)
        g_es.append(g_e)
    return FlawReport(
        experiment="guidance-omission",
        xs=[float(t) for t in tstar_grid],
        g_d=g_ds,
        g_e=g_es,
        trials=1,
        seed=seed,
    )


def flawed_surrogate_backward(
    x: Tensor,
    cfg,
    model,
    sched,
    seed: int,
    loss_fn,
    dt_bar: float,
    copy: int = 0,
) -> GradResult:
    """Coarse backward pass run against states recorded by the fine process.

    The fine forward pass is stored; the backward walk then pretends the
    trajectory was produced with step dt_bar, reading its step inputs from
    the fine states at the matching times and drawing noise under the
    coarse ordinals.  No replay check is possible: the recomputed states
    genuinely differ from the stored ones. With dt_bar = dt this collapses
    to the correct surrogate and the deviation is exactly zero.
    """
    coarse = _coarse_config(cfg, dt_bar)
    if cfg.rounds != 1:
        raise ConfigurationError("flawed surrogate is defined for a single round")
    ratio = int(round(dt_bar / cfg.dt))
    fine_cfg = replace(cfg, copies=max(cfg.copies, copy + 1))
    outputs, state = purify_forward(x, fine_cfg, model, sched, seed)
    out = outputs[copy]
    tape = Tape()
    ov = tape.input(out)
    cot = tape_backward(loss_fn(ov), Tensor(np.float64(1.0)), [ov])[0]

    sampler = make_sampler(coarse, x.shape, seed)
    steps_c = coarse.steps
    guided = coarse.guidance.enabled
    grad = cot.array
    g_grad = np.zeros_like(grad)
    fine_states = state.states[copy]
    for k in reversed(range(steps_c)):
        i = steps_c - k
        step_tape = Tape()
        xv = step_tape.input(fine_states[k * ratio])
        gv = step_tape.input(state.guide) if guided else None
        z = step_noise_for(coarse, sampler, k + 1, i, copy)
        nxt = reverse_step(xv, model, coarse, sched, i, z, gv)
        obj = ag.vsum(ag.mul(nxt, Tensor(grad)))
        wrt = [xv, gv] if guided else [xv]
        cots = tape_backward(obj, Tensor(np.float64(1.0)), wrt)
        grad = cots[0].array
        if guided:
            g_grad = g_grad + cots[1].array
    grad = np.sqrt(sched.alpha(cfg.t_star)) * grad
    return GradResult(Tensor(grad), Tensor(g_grad))


def surrogate_mismatch_experiment(
    pipe: DefensePipeline,
    x: Tensor,
    y: int,
    ratio_grid=(1, 2, 5, 10),
    trials: int = 10,
    seed: int = 0,
) -> FlawReport:
    """Coarse-against-fine backprop error per step-size ratio.

    g_f is the exact gradient of the fine process; g_nf backpropagates
    the coarse solver against the fine trajectory's states.  At ratio 1
    the coarse walk IS the fine walk, so the deviation is exactly zero;
    each extra skipped state adds error.  Values are means over
    fresh-path trials.
    """
    cfg = replace(pipe.cfg, copies=1)
    loss_fn = pipe.loss_fn(y)
    g_ds, g_es = [], []
    for r in ratio_grid:
        r = int(r)
        dt_bar = cfg.dt * r
        ds, es = [], []
        for i in range(trials):
            s = derive_seed(seed, "trial", r, i)
            g_f = _single_path_grad(pipe, x, y, s)
            g_nf = flawed_surrogate_backward(x, cfg, pipe.model, pipe.sched, s, loss_fn, dt_bar)
            g_d, g_e = rel_error(g_f.total, g_nf.total)
            ds.append(g_d)
            es.append(g_e)
        g_ds.append(float(np.mean(ds)))
        g_es.append(float(np.mean(es)))
    return FlawReport(
        experiment="surrogate-mismatch",
        xs=[int(r) for r in ratio_grid],
        g_d=g_ds,
        g_e=g_es,
        trials=trials,
        seed=seed,
    )
