"""Diffusion purification: forward diffuse plus a reverse denoising loop.

The forward pass records every intermediate state and draws all noise
from a counter-based sampler keyed by (copy, step ordinal).  The backward
engine replays single steps from those checkpoints, so the one repeated
rule here is: every state update goes through `reverse_step`, which is
written once with autodiff primitives and used verbatim in both phases.
That is what makes recomputed states bitwise-equal to stored ones.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ag
from .autodiff import Tensor
from .errors import ConfigurationError, NumericDivergenceError
from .rng import normal
from .schedule import NoiseSchedule
from .scoremodel import score_eval

__all__ = [
    "GuidanceSpec",
    "PurifyConfig",
    "NoiseSampler",
    "ns_sample",
    "diffuse",
    "calc_dx",
    "reverse_step",
    "PurifyState",
    "purify_forward",
]

SOLVERS = ("sde", "ddpm")
GUIDANCE_KINDS = ("none", "mse")


@dataclass(frozen=True)
class GuidanceSpec:
    """Optional guidance term pulling reverse steps toward g_aux(x).

    kind "none" disables guidance entirely; "mse" adds the gradient of
    s * ||x_hat - guide||^2 to each ddpm step.  g_aux is the map producing
    the guide from the original input; only the identity is supported.
    """

    kind: str = "none"
    scale: float = 1.0
    g_aux: str = "identity"

    def __post_init__(self):
        if self.kind not in GUIDANCE_KINDS:
            raise ConfigurationError(f"unknown guidance kind {self.kind!r}")
        if self.g_aux != "identity":
            raise ConfigurationError(f"unknown guide map {self.g_aux!r}")
        if not math.isfinite(self.scale):
            raise ConfigurationError("guidance scale must be finite")

    @property
    def enabled(self) -> bool:
        return self.kind != "none"


@dataclass(frozen=True)
class PurifyConfig:
    """Static description of one purification run.

    t_star is the diffusion horizon, dt the (negative) reverse step, and
    steps = t_star / |dt| must land on an integer.  rounds chains whole
    diffuse+denoise passes; copies runs independent noise paths.
    time_drift shifts the time fed to beta/score at step i by i * drift
    (a controlled solver-time flaw, zero for a faithful run).  zero_noise
    replaces every draw with zeros, as a determinism control.
    """

    t_star: float
    dt: float
    solver: str = "sde"
    rounds: int = 1
    copies: int = 1
    guidance: GuidanceSpec = field(default_factory=GuidanceSpec)
    final_noise: bool = True
    time_drift: float = 0.0
    T_discrete: int | None = None
    zero_noise: bool = False

    def __post_init__(self):
        if not (0.0 <= self.t_star <= 1.0):
            raise ConfigurationError("t_star must lie in [0, 1]")
        if not (self.dt < 0.0 and math.isfinite(self.dt)):
            raise ConfigurationError("dt must be negative and finite")
        if self.solver not in SOLVERS:
            raise ConfigurationError(f"unknown solver {self.solver!r}")
        if self.rounds < 1 or self.copies < 1:
            raise ConfigurationError("rounds and copies must be >= 1")
        raw = self.t_star / abs(self.dt)
        if abs(raw - round(raw)) > 1e-9 * max(1.0, raw):
            raise ConfigurationError(
                f"t_star/|dt| = {raw} is not an integer step count"
            )
        if self.guidance.enabled and self.solver != "ddpm":
            raise ConfigurationError("mse guidance requires the ddpm solver")
        if self.T_discrete is not None and self.T_discrete < 1:
            raise ConfigurationError("T_discrete must be positive")
        if self.solver == "ddpm" and self.steps > self.T:
            raise ConfigurationError("more reverse steps than discrete chain length")

    @property
    def steps(self) -> int:
        return int(round(self.t_star / abs(self.dt)))

    @property
    def T(self) -> int:
        """Length of the discrete chain backing the ddpm solver."""
        return self.T_discrete if self.T_discrete is not None else int(round(1.0 / abs(self.dt)))

    @property
    def total_steps(self) -> int:
        return self.steps * self.rounds


@dataclass(frozen=True)
class NoiseSampler:
    """Counter-based noise source; sample(i, copy) is pure in its arguments.

    Step draws are keyed by the 1-based global step ordinal i (across
    rounds) and the copy index, initial diffusion draws by round and copy.
    The same object therefore serves the forward pass and any replay.
    """

    seed: int
    copies: int
    shape: tuple
    total_steps: int
    rounds: int
    zero: bool = False

    def sample(self, i: int, copy: int) -> Tensor:
        if not (1 <= i <= self.total_steps):
            raise ConfigurationError(f"step ordinal {i} outside 1..{self.total_steps}")
        if not (0 <= copy < self.copies):
            raise ConfigurationError(f"copy {copy} outside 0..{self.copies - 1}")
        if self.zero:
            return ag.zeros(self.shape)
        return Tensor(normal(self.seed, "purify-step", copy, i, shape=self.shape))

    def init_eps(self, round_idx: int, copy: int) -> Tensor:
        if not (0 <= round_idx < self.rounds):
            raise ConfigurationError(f"round {round_idx} outside 0..{self.rounds - 1}")
        if not (0 <= copy < self.copies):
            raise ConfigurationError(f"copy {copy} outside 0..{self.copies - 1}")
        if self.zero:
            return ag.zeros(self.shape)
        return Tensor(normal(self.seed, "purify-diffuse", copy, round_idx, shape=self.shape))


def ns_sample(sampler: NoiseSampler, i: int, copy: int = 0) -> Tensor:
    return sampler.sample(i, copy)


def make_sampler(cfg: PurifyConfig, shape: tuple, seed: int) -> NoiseSampler:
    return NoiseSampler(
        seed=seed,
        copies=cfg.copies,
        shape=shape,
        total_steps=cfg.total_steps,
        rounds=cfg.rounds,
        zero=cfg.zero_noise,
    )


def diffuse(x, t_star: float, eps, sched: NoiseSchedule):
    """x(t*) = sqrt(alpha) x + sqrt(1 - alpha) eps; t* = 0 returns x + 0*eps."""
    a = sched.alpha(t_star)
    return ag.add(ag.scale(x, math.sqrt(a)), ag.scale(eps, math.sqrt(1.0 - a)))


def _step_time(cfg: PurifyConfig, i: int) -> float:
    """Solver time for reverse step index i (i = steps .. 1), drift applied."""
    if cfg.solver == "sde":
        t = i * abs(cfg.dt) + i * cfg.time_drift
    else:
        t = i / cfg.T + i * cfg.time_drift
    return min(max(t, 0.0), 1.0)


def calc_dx(
    x_hat,
    model,
    t: float,
    dt: float,
    sched: NoiseSchedule,
    step_noise,
    *,
    solver: str = "sde",
    index: int = 0,
    T: int = 0,
    guidance: GuidanceSpec | None = None,
    guide=None,
):
    """One reverse-time update increment.

    sde:   dx = -1/2 beta(t) [x + 2 s(x, t)] dt + sqrt(beta(t) |dt|) z
    ddpm:  dx = (1 - r)/r x + beta_i / r s(x, t_i) + sqrt(beta_i) z,
           r = sqrt(1 - beta_i), plus -2 s_guidance beta_i (x - guide)
           when guidance is on.  t is the (possibly drifted) solver time;
           index and T are only read by the ddpm branch.
    """
    if solver == "sde":
        beta = sched.beta(t)
        s = score_eval(model, x_hat, t)
        det = ag.scale(ag.add(x_hat, ag.scale(s, 2.0)), -0.5 * beta * dt)
        return ag.add(det, ag.scale(step_noise, math.sqrt(beta * abs(dt))))
    beta_i = sched.discrete_beta(index, T)
    r = math.sqrt(1.0 - beta_i)
    s = score_eval(model, x_hat, t)
    det = ag.scale(ag.add(ag.scale(x_hat, 1.0 - r), ag.scale(s, beta_i)), 1.0 / r)
    dx = ag.add(det, ag.scale(step_noise, math.sqrt(beta_i)))
    if guidance is not None and guidance.enabled:
        if guide is None:
            raise ConfigurationError("guided step without a guide value")
        dx = ag.add(dx, ag.scale(ag.sub(x_hat, guide), -2.0 * guidance.scale * beta_i))
    return dx


def reverse_step(x_hat, model, cfg: PurifyConfig, sched: NoiseSchedule, i: int, step_noise, guide=None):
    """x(t_i) -> x(t_i + dt) for step index i; shared by forward and replay."""
    dx = calc_dx(
        x_hat,
        model,
        _step_time(cfg, i),
        cfg.dt,
        sched,
        step_noise,
        solver=cfg.solver,
        index=i,
        T=cfg.T if cfg.solver == "ddpm" else 0,
        guidance=cfg.guidance,
        guide=guide,
    )
    return ag.add(x_hat, dx)


def step_noise_for(cfg: PurifyConfig, sampler: NoiseSampler, ordinal: int, i: int, copy: int) -> Tensor:
    """Noise draw for global ordinal / step index i, honouring final_noise."""
    if cfg.solver == "ddpm" and i == 1 and not cfg.final_noise:
        return ag.zeros(sampler.shape)
    return sampler.sample(ordinal, copy)


@dataclass
class PurifyState:
    """Checkpoint record of a forward run: inputs to every reverse step.

    states[c][k] is the state entering global step k (0-based execution
    order) of copy c; round_outputs[c][r] is the state after round r.
    """

    cfg: PurifyConfig
    sampler: NoiseSampler
    guide: Tensor | None
    states: list
    round_outputs: list


def purify_forward(x: Tensor, cfg: PurifyConfig, model, sched: NoiseSchedule, seed: int):
    """Run all copies of the purifier on x.

    Returns (outputs, state): outputs[c] is copy c's final x_hat(0), state
    holds everything the checkpointed backward pass needs.  Copies are
    fully independent given the sampler, so their order of execution
    cannot change any value.
    """
    sampler = make_sampler(cfg, x.shape, seed)
    guide = x if cfg.guidance.enabled else None
    steps = cfg.steps
    outputs = []
    all_states = []
    all_round_outputs = []
    for copy in range(cfg.copies):
        cur = x
        states = []
        round_outputs = []
        ordinal = 0
        for r in range(cfg.rounds):
            cur = diffuse(cur, cfg.t_star, sampler.init_eps(r, copy), sched)
            for i in range(steps, 0, -1):
                ordinal += 1
                states.append(cur)
                z = step_noise_for(cfg, sampler, ordinal, i, copy)
                cur = reverse_step(cur, model, cfg, sched, i, z, guide)
                if not np.all(np.isfinite(ag.value_of(cur))):
                    raise NumericDivergenceError(ordinal)
            round_outputs.append(cur)
        outputs.append(cur)
        all_states.append(states)
        all_round_outputs.append(round_outputs)
    state = PurifyState(cfg, sampler, guide, all_states, all_round_outputs)
    return outputs, state


def single_copy(cfg: PurifyConfig) -> PurifyConfig:
    """The same run restricted to one copy (used by per-copy replays)."""
    return replace(cfg, copies=1) if cfg.copies != 1 else cfg
