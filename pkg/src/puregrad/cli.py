"""Command-line entry point.

Subcommands: purify, gradcheck, attack, eval, flaws.  Every run writes
its artifacts into --out (CSV tables plus flat binary tensors) and a
manifest.txt echoing the configuration; the manifest is the only file
allowed to contain a timestamp, so reruns are byte-identical elsewhere.

Exit codes: 0 success, 1 gradcheck tolerance failure, 2 configuration
error, 3 numeric divergence or replay mismatch.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import __version__
from . import autodiff as ag
from .attacks import lf_attack, pgd_attack
from .autodiff import Tensor
from .classifier import loss_expr, predict
from .config import load_config
from .errors import ConfigurationError, NumericDivergenceError, ReplayIntegrityError
from .flaws import (
    eot_variance_experiment,
    guidance_omission_experiment,
    surrogate_mismatch_experiment,
    time_drift_experiment,
)
from .gradients import checkpoint_backward, full_tape_oracle, loss_cotangent
from .protocol import evaluate_defense
from .purifier import purify_forward
from .rng import derive_seed
from .tensorio import save_tensor, write_csv

EXIT_OK = 0
EXIT_GRADCHECK = 1
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _out_dir(args) -> str:
    out = args.out or os.environ.get("PUREGRAD_OUT") or f"puregrad-{args.subcommand}"
    os.makedirs(out, exist_ok=True)
    return out


def _mapper(jobs: int):
    if jobs <= 1:
        return map, None
    pool = ThreadPoolExecutor(max_workers=jobs)
    return pool.map, pool


def _write_manifest(out, args, rc, artifacts):
    lines = [
        f"tool = puregrad {__version__}",
        f"subcommand = {args.subcommand}",
        f"seed = {args.seed}",
        f"config = {args.config or '(defaults)'}",
        f"jobs = {getattr(args, 'jobs', 1)}",
        f"timestamp = {time.strftime('%Y-%m-%dT%H:%M:%S%z')}",
        "",
        "[resolved configuration]",
    ]
    lines += [f"{k} = {v}" for k, v in sorted(rc.values.items())]
    lines += ["", "[artifacts]"] + sorted(artifacts)
    with open(os.path.join(out, "manifest.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def _attack_fn(rc, pipe):
    acfg = rc.attack()
    mode = rc.grad_mode()
    if acfg.kind == "pgd":
        return lambda x, y, s: pgd_attack(x, y, acfg, pipe, mode, s)
    grid = rc.grid_shape()
    return lambda x, y, s: lf_attack(x, y, acfg, pipe, s, mode, grid=grid)


def cmd_purify(args, rc) -> int:
    out = _out_dir(args)
    pipe = rc.pipeline()
    samples, labels = rc.dataset()
    mapper, pool = _mapper(args.jobs)

    def one(j):
        x, y = samples[j], int(labels[j])
        outputs, _ = purify_forward(x, pipe.cfg, pipe.model, pipe.sched, derive_seed(args.seed, "sample", j))
        rows, tensors = [], []
        for c, o in enumerate(outputs):
            pred = predict(pipe.clf.logits(o))
            dist = float(np.linalg.norm(o.array - x.array))
            rows.append([j, c, y, pred, int(pred == y), dist])
            tensors.append((f"purified_{j:04d}_{c:02d}.bin", o))
        return rows, tensors

    results = list(mapper(one, range(len(samples))))
    if pool:
        pool.shutdown()
    artifacts = ["summary.csv"]
    all_rows = []
    for rows, tensors in results:
        all_rows.extend(rows)
        for name, t in tensors:
            save_tensor(os.path.join(out, name), t)
            artifacts.append(name)
    write_csv(os.path.join(out, "summary.csv"),
              ["sample", "copy", "label", "pred", "correct", "l2_change"], all_rows)
    _write_manifest(out, args, rc, artifacts)
    acc = float(np.mean([r[4] for r in all_rows])) if all_rows else float("nan")
    print(f"purified {len(samples)} samples x {pipe.cfg.copies} copies; accuracy {acc:.4f}")
    return EXIT_OK


def cmd_gradcheck(args, rc) -> int:
    out = _out_dir(args)
    pipe = rc.pipeline()
    cfg = pipe.cfg
    if cfg.copies != 1:
        raise ConfigurationError("gradcheck runs on a single copy; set purify.copies = 1")
    samples, labels = rc.dataset()
    x, y = samples[0], int(labels[0])
    seed = derive_seed(args.seed, "gradcheck")

    outputs, state = purify_forward(x, cfg, pipe.model, pipe.sched, seed)
    _, cot, _ = loss_cotangent(pipe, outputs[0], y)
    g_ck = checkpoint_backward(cot, state, pipe.model, pipe.sched).total.array
    oracle, _, _ = full_tape_oracle(x, cfg, pipe.model, pipe.sched, seed, pipe.loss_fn(y))
    g_or = oracle.total.array
    rel_oracle = float(np.linalg.norm(g_ck - g_or) / max(np.linalg.norm(g_or), 1e-300))

    def f(arr):
        outs, _ = purify_forward(Tensor(arr), cfg, pipe.model, pipe.sched, seed)
        return float(ag.value_of(loss_expr(pipe.loss, pipe.clf.logits(outs[0]), y)))

    h = rc["gradcheck.fd_h"]
    g_fd = np.zeros_like(x.array)
    flat = x.array.reshape(-1)
    for i in range(flat.size):
        e = np.zeros_like(flat)
        e[i] = h
        g_fd.reshape(-1)[i] = (f((flat + e).reshape(x.shape)) - f((flat - e).reshape(x.shape))) / (2 * h)
    rel_fd = float(np.linalg.norm(g_ck - g_fd) / max(np.linalg.norm(g_fd), 1e-300))

    write_csv(os.path.join(out, "gradcheck.csv"), ["metric", "value"],
              [["rel_oracle", rel_oracle], ["rel_fd", rel_fd],
               ["tol_oracle", rc["gradcheck.tol_oracle"]], ["tol_fd", rc["gradcheck.tol_fd"]]])
    _write_manifest(out, args, rc, ["gradcheck.csv"])
    print(f"checkpoint vs oracle: max relative error {rel_oracle:.3e}")
    print(f"checkpoint vs finite differences: max relative error {rel_fd:.3e}")
    ok = rel_oracle <= rc["gradcheck.tol_oracle"] and rel_fd <= rc["gradcheck.tol_fd"]
    print("gradcheck PASS" if ok else "gradcheck FAIL")
    return EXIT_OK if ok else EXIT_GRADCHECK


def cmd_attack(args, rc) -> int:
    out = _out_dir(args)
    pipe = rc.pipeline()
    samples, labels = rc.dataset()
    attack = _attack_fn(rc, pipe)
    mapper, pool = _mapper(args.jobs)

    def one(j):
        return attack(samples[j], int(labels[j]), derive_seed(args.seed, "sample", j))

    results = list(mapper(one, range(len(samples))))
    if pool:
        pool.shutdown()
    artifacts = ["outcomes.csv", "trace.csv"]
    outcome_rows, trace_rows = [], []
    for j, res in enumerate(results):
        bits = "".join(str(b) for b in res.final_outcomes)
        outcome_rows.append([j, int(labels[j]), int(res.success), res.iterations, bits])
        for r in res.trace:
            trace_rows.append([j, r.iteration, r.phase, r.mean_loss, r.dist, int(r.success)])
        name = f"adv_{j:04d}.bin"
        save_tensor(os.path.join(out, name), res.x_adv)
        artifacts.append(name)
    write_csv(os.path.join(out, "outcomes.csv"),
              ["sample", "label", "success", "iterations", "outcomes"], outcome_rows)
    write_csv(os.path.join(out, "trace.csv"),
              ["sample", "iteration", "phase", "mean_loss", "dist", "success"], trace_rows)
    _write_manifest(out, args, rc, artifacts)
    rate = float(np.mean([r.success for r in results]))
    print(f"attacked {len(samples)} samples; success rate {rate:.4f}")
    return EXIT_OK


def cmd_eval(args, rc) -> int:
    out = _out_dir(args)
    pipe = rc.pipeline()
    dataset = rc.dataset()
    attack = _attack_fn(rc, pipe)
    mapper, pool = _mapper(args.jobs)
    report = evaluate_defense(dataset, attack, rc.eval_config(), pipe, args.seed, mapper=mapper)
    if pool:
        pool.shutdown()
    write_csv(os.path.join(out, "metrics.csv"),
              ["mode", "clean_acc", "robust_acc", "wor_rob", "mv_rob", "avg_rob"],
              [[report.mode, report.clean_acc, report.robust_acc, report.wor, report.mv, report.avg]])
    write_csv(os.path.join(out, "samples.csv"),
              ["sample", "label", "clean_pred", "clean_correct", "attack_success",
               "iterations", "broken", "outcomes"],
              [[r.index, r.label, r.clean_pred, int(r.clean_correct), int(r.attack_success),
                r.iterations, int(r.broken), "".join(str(b) for b in r.outcomes)] for r in report.rows])
    write_csv(os.path.join(out, "matrix.csv"),
              [f"copy_{c}" for c in range(report.matrix.n_copies)],
              [list(row) for row in report.matrix.a])
    _write_manifest(out, args, rc, ["metrics.csv", "samples.csv", "matrix.csv"])
    print(
        f"mode {report.mode}: clean {report.clean_acc:.4f}, robust {report.robust_acc:.4f}, "
        f"wor {report.wor:.4f}, avg {report.avg:.4f}"
    )
    return EXIT_OK


def cmd_flaws(args, rc) -> int:
    out = _out_dir(args)
    pipe = rc.pipeline()
    samples, labels = rc.dataset()
    x, y = samples[0], int(labels[0])
    grids = rc.flaw_grids()
    name = args.experiment or rc["flaws.experiment"]
    seed = args.seed
    if name == "eot-variance":
        rep = eot_variance_experiment(pipe, x, y, grids["n_grid"], rc["flaws.trials"], seed)
    elif name == "time-drift":
        rep = time_drift_experiment(pipe, x, y, grids["tstar_grid"], rc["flaws.delta_round"], seed)
    elif name == "guidance-omission":
        rep = guidance_omission_experiment(pipe, x, y, grids["guide_grid"], seed)
    elif name == "surrogate-mismatch":
        rep = surrogate_mismatch_experiment(
            pipe, x, y, grids["ratio_grid"], rc["flaws.surrogate_trials"], seed
        )
    else:
        raise ConfigurationError(f"unknown flaw experiment {name!r}")
    write_csv(os.path.join(out, f"flaws_{rep.experiment}.csv"),
              ["x", "g_d", "g_e"],
              [[x_, d, e] for x_, d, e in zip(rep.xs, rep.g_d, rep.g_e)])
    _write_manifest(out, args, rc, [f"flaws_{rep.experiment}.csv"])
    for x_, d, e in zip(rep.xs, rep.g_d, rep.g_e):
        print(f"{rep.experiment} x={x_}: g_d={d:.6e} g_e={e:.6e}")
    return EXIT_OK


COMMANDS = {
    "purify": cmd_purify,
    "gradcheck": cmd_gradcheck,
    "attack": cmd_attack,
    "eval": cmd_eval,
    "flaws": cmd_flaws,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="puregrad", description=__doc__)
    sub = p.add_subparsers(dest="subcommand", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", default=None, help="path to a section.key = value file")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", default=None, help="output directory (or $PUREGRAD_OUT)")
        sp.add_argument("--jobs", type=int, default=1)
        if name == "flaws":
            sp.add_argument("--experiment", default=None,
                            help="override flaws.experiment from the config")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        rc = load_config(args.config)
        return COMMANDS[args.subcommand](args, rc)
    except ConfigurationError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericDivergenceError, ReplayIntegrityError) as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
