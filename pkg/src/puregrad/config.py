"""Plain-text run configuration: `section.key = value` lines.

The format is deliberately tiny: one assignment per line, `#` comments,
no nesting, every key declared in a schema with a type and default.
Anything else is rejected with the offending line number, so a typo'd
key can never silently fall back to a default.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .attacks import AttackConfig, FilterChain
from .classifier import BayesMixtureClassifier
from .errors import ConfigurationError
from .gradients import DefensePipeline, GradMode
from .protocol import EvalConfig
from .purifier import GuidanceSpec, PurifyConfig
from .schedule import NoiseSchedule
from .scoremodel import (
    AnalyticMixtureScore,
    MlpScore,
    make_stripe_mixture,
    sample_dataset,
    unit_gaussian,
)

__all__ = ["RunConfig", "parse_config", "load_config", "DEFAULTS"]

# (type, default); types: int, float, bool, str
DEFAULTS = {
    "schedule.beta_min": ("float", 0.1),
    "schedule.beta_max": ("float", 20.0),
    "data.kind": ("str", "stripes"),  # stripes | gaussian
    "data.classes": ("int", 3),
    "data.grid": ("str", "8x8"),
    "data.dim": ("int", 8),
    "data.sigma": ("float", 0.08),
    "data.amplitude": ("float", 0.2),
    "data.base": ("float", 0.5),
    "data.seed": ("int", 0),
    "data.samples": ("int", 16),
    "data.clip": ("bool", True),
    "score.model": ("str", "analytic"),  # analytic | mlp
    "score.hidden": ("int", 32),
    "score.seed": ("int", 0),
    "purify.t_star": ("float", 0.1),
    "purify.dt": ("float", -1e-3),
    "purify.solver": ("str", "sde"),
    "purify.rounds": ("int", 1),
    "purify.copies": ("int", 1),
    "purify.final_noise": ("bool", True),
    "purify.time_drift": ("float", 0.0),
    "purify.T": ("int", 0),  # 0 = derive from dt
    "purify.zero_noise": ("bool", False),
    "guidance.kind": ("str", "none"),
    "guidance.scale": ("float", 1.0),
    "grad.mode": ("str", "full-checkpoint"),
    "grad.dt_bar": ("float", 0.0),  # 0 = unset
    "clf.kind": ("str", "bayes"),
    "loss.kind": ("str", "max-margin"),
    "attack.kind": ("str", "pgd"),
    "attack.eps_inf": ("float", 0.3),
    "attack.iters": ("int", 50),
    "attack.eot_n": ("int", 10),
    "attack.success": ("str", "sp"),
    "attack.eta": ("float", 0.0),  # 0 = eps/4
    "attack.min_val": ("float", 0.0),
    "attack.max_val": ("float", 1.0),
    "attack.eot_steps": ("int", 2),
    "attack.lf_copies": ("int", 5),
    "attack.lr_delta": ("float", 0.008),
    "attack.lr_filters": ("float", 0.05),
    "attack.c": ("float", 1e4),
    "attack.tau_p": ("float", 0.05),
    "attack.filters": ("str", "3x3,5x5,3x3"),
    "attack.sigma_c": ("float", 0.1),
    "attack.color_from_original": ("bool", False),
    "eval.mode": ("str", "sp-final"),
    "eval.replicas": ("int", 20),
    "eval.k": ("int", 9),
    "eval.fresh_eval": ("bool", False),
    "gradcheck.tol_oracle": ("float", 1e-10),
    "gradcheck.tol_fd": ("float", 1e-4),
    "gradcheck.fd_h": ("float", 1e-5),
    "flaws.experiment": ("str", "eot-variance"),
    "flaws.delta_round": ("float", 2.0 ** -23),
    "flaws.trials": ("int", 20),
    "flaws.n_grid": ("str", "4,16,64"),
    "flaws.tstar_grid": ("str", "0.02,0.04,0.06,0.08,0.1"),
    "flaws.guide_grid": ("str", "0.006,0.012,0.024,0.036"),
    "flaws.ratio_grid": ("str", "1,2,5,10"),
    "flaws.surrogate_trials": ("int", 10),
}


def _convert(kind: str, raw: str, lineno: int, key: str):
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            v = float(raw)
            if math.isnan(v):
                raise ValueError("nan")
            return v
        if kind == "bool":
            if raw.lower() in ("true", "yes", "1"):
                return True
            if raw.lower() in ("false", "no", "0"):
                return False
            raise ValueError(raw)
        return raw
    except ValueError:
        raise ConfigurationError(
            f"line {lineno}: value {raw!r} for {key} is not a valid {kind}"
        ) from None


def parse_config(text: str) -> dict:
    """Parse config text into a fully-defaulted {section.key: value} dict."""
    values = {k: d for k, (_, d) in DEFAULTS.items()}
    seen = set()
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigurationError(f"line {lineno}: expected `section.key = value`")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigurationError(f"line {lineno}: unknown key {key!r}")
        if key in seen:
            raise ConfigurationError(f"line {lineno}: duplicate key {key!r}")
        seen.add(key)
        values[key] = _convert(DEFAULTS[key][0], raw, lineno, key)
    return values


def _parse_grid(raw: str, key: str):
    try:
        return tuple(float(part) for part in raw.split(",") if part.strip())
    except ValueError:
        raise ConfigurationError(f"{key}: cannot parse grid {raw!r}") from None


def _parse_shape(raw: str, key: str):
    try:
        a, b = raw.lower().split("x")
        return int(a), int(b)
    except ValueError:
        raise ConfigurationError(f"{key}: expected `<rows>x<cols>`, got {raw!r}") from None


@dataclass(frozen=True)
class RunConfig:
    """Typed view over a parsed config with builders for every module."""

    values: dict

    def __getitem__(self, key: str):
        return self.values[key]

    def schedule(self) -> NoiseSchedule:
        return NoiseSchedule(self["schedule.beta_min"], self["schedule.beta_max"])

    def mixture(self):
        if self["data.kind"] == "gaussian":
            return unit_gaussian(self["data.dim"])
        if self["data.kind"] != "stripes":
            raise ConfigurationError(f"unknown data kind {self['data.kind']!r}")
        return make_stripe_mixture(
            n_classes=self["data.classes"],
            grid=_parse_shape(self["data.grid"], "data.grid"),
            sigma=self["data.sigma"],
            amplitude=self["data.amplitude"],
            base=self["data.base"],
            seed=self["data.seed"],
        )

    def grid_shape(self):
        return _parse_shape(self["data.grid"], "data.grid")

    def dataset(self, mixture=None):
        mix = mixture if mixture is not None else self.mixture()
        clip = (0.0, 1.0) if self["data.clip"] else None
        return sample_dataset(mix, self["data.samples"], self["data.seed"], clip)

    def score_model(self, mixture=None, sched=None):
        if self["score.model"] == "analytic":
            mix = mixture if mixture is not None else self.mixture()
            return AnalyticMixtureScore(mix, sched if sched is not None else self.schedule())
        if self["score.model"] != "mlp":
            raise ConfigurationError(f"unknown score model {self['score.model']!r}")
        dim = self.mixture().dim if mixture is None else mixture.dim
        return MlpScore(dim, self["score.hidden"], self["score.seed"])

    def purify(self) -> PurifyConfig:
        return PurifyConfig(
            t_star=self["purify.t_star"],
            dt=self["purify.dt"],
            solver=self["purify.solver"],
            rounds=self["purify.rounds"],
            copies=self["purify.copies"],
            guidance=GuidanceSpec(self["guidance.kind"], self["guidance.scale"]),
            final_noise=self["purify.final_noise"],
            time_drift=self["purify.time_drift"],
            T_discrete=self["purify.T"] or None,
            zero_noise=self["purify.zero_noise"],
        )

    def grad_mode(self) -> GradMode:
        dt_bar = self["grad.dt_bar"] or None
        return GradMode(self["grad.mode"], dt_bar)

    def classifier(self, mixture=None):
        if self["clf.kind"] != "bayes":
            raise ConfigurationError(f"unknown classifier kind {self['clf.kind']!r}")
        mix = mixture if mixture is not None else self.mixture()
        return BayesMixtureClassifier(mix)

    def pipeline(self) -> DefensePipeline:
        mix = self.mixture()
        sched = self.schedule()
        return DefensePipeline(
            cfg=self.purify(),
            model=self.score_model(mix, sched),
            sched=sched,
            clf=self.classifier(mix),
            loss=self["loss.kind"],
        )

    def attack(self) -> AttackConfig:
        shapes = tuple(
            _parse_shape(part.strip(), "attack.filters")
            for part in self["attack.filters"].split(",")
            if part.strip()
        )
        chain = FilterChain(
            shapes=shapes,
            sigma_c=self["attack.sigma_c"],
            color_from_original=self["attack.color_from_original"],
        )
        return AttackConfig(
            kind=self["attack.kind"],
            eps_inf=self["attack.eps_inf"],
            iters=self["attack.iters"],
            eot_n=self["attack.eot_n"],
            success=self["attack.success"],
            eta=self["attack.eta"] or None,
            min_val=self["attack.min_val"],
            max_val=self["attack.max_val"],
            eot_steps=self["attack.eot_steps"],
            lf_copies=self["attack.lf_copies"],
            lr_delta=self["attack.lr_delta"],
            lr_filters=self["attack.lr_filters"],
            c=self["attack.c"],
            tau_p=self["attack.tau_p"],
            chain=chain,
        )

    def eval_config(self) -> EvalConfig:
        return EvalConfig(
            mode=self["eval.mode"],
            replicas=self["eval.replicas"],
            k=self["eval.k"],
            fresh_eval=self["eval.fresh_eval"],
        )

    def flaw_grids(self):
        return {
            "n_grid": tuple(int(v) for v in _parse_grid(self["flaws.n_grid"], "flaws.n_grid")),
            "tstar_grid": _parse_grid(self["flaws.tstar_grid"], "flaws.tstar_grid"),
            "guide_grid": _parse_grid(self["flaws.guide_grid"], "flaws.guide_grid"),
            "ratio_grid": tuple(
                int(v) for v in _parse_grid(self["flaws.ratio_grid"], "flaws.ratio_grid")
            ),
        }


def load_config(path: str | None) -> RunConfig:
    """RunConfig from a file path; None means all defaults."""
    if path is None:
        return RunConfig(parse_config(""))
    with open(path, "r", encoding="utf-8") as fh:
        return RunConfig(parse_config(fh.read()))
