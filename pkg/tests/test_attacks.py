"""Filter machinery, perceptual proxy, Adam, and the two attack drivers."""

import math

import numpy as np
import pytest

from puregrad import autodiff as ag
from puregrad.autodiff import Tape, Tensor, tape_backward
from puregrad.classifier import BayesMixtureClassifier
from puregrad.errors import ConfigurationError
from puregrad.gradients import DefensePipeline, GradMode
from puregrad.purifier import PurifyConfig
from puregrad.schedule import NoiseSchedule
from puregrad.scoremodel import AnalyticMixtureScore, GaussianMixtureData
from puregrad.attacks import (
    Adam,
    AttackConfig,
    FilterChain,
    arctanh_reparam,
    chain_apply,
    color_kernel,
    identity_weights,
    lf_attack,
    of_apply,
    perceptual_distance,
    pgd_attack,
    success_of,
    tanh_scale,
)

from oracles import fd_gradient, reference_adam_step, reference_softmax


# ---------------------------------------------------------------------------
# optimizable filters


def test_filter_chain_validation():
    with pytest.raises(ConfigurationError):
        FilterChain(shapes=((2, 3),))
    with pytest.raises(ConfigurationError):
        FilterChain(shapes=((3, 0),))
    with pytest.raises(ConfigurationError):
        FilterChain(shapes=())
    with pytest.raises(ConfigurationError):
        FilterChain(sigma_c=0.0)
    with pytest.raises(ConfigurationError):
        FilterChain(sigma_c=-1.0)
    assert FilterChain(sigma_c=math.inf).sigma_c == math.inf
    # shapes normalise to tuples regardless of the input container
    assert FilterChain(shapes=[[3, 3]]).shapes == ((3, 3),)


def test_identity_weights_give_identity_filtering():
    rng = np.random.default_rng(11)
    x = Tensor(rng.uniform(0.1, 0.9, size=(5, 6)))
    chain = FilterChain()
    thetas = [Tensor(t) for t in identity_weights(chain, 5, 6)]
    out = ag.value_of(chain_apply(x, thetas, chain))
    assert np.max(np.abs(out - x.array)) < 1e-9


@pytest.mark.parametrize("sigma_c", [0.25, math.inf])
def test_of_apply_matches_per_pixel_loop(sigma_c):
    rng = np.random.default_rng(23)
    h, w, shape = 5, 4, (3, 3)
    x = Tensor(rng.uniform(size=(h, w)))
    theta = Tensor(rng.normal(size=(h, w, 9)))
    out = ag.value_of(of_apply(x, theta, shape, sigma_c))
    for i in range(h):
        for j in range(w):
            ck = color_kernel(x, i, j, shape, sigma_c).reshape(-1)
            raw = ck * reference_softmax(theta.array[i, j])
            v = raw / raw.sum()
            acc = 0.0
            for a in range(3):
                for b in range(3):
                    ni, nj = i + a - 1, j + b - 1
                    if 0 <= ni < h and 0 <= nj < w:
                        acc += x.array[ni, nj] * v[3 * a + b]
            assert out[i, j] == pytest.approx(acc, rel=1e-12, abs=1e-14)


def test_of_apply_output_stays_in_value_range():
    rng = np.random.default_rng(5)
    for trial in range(20):
        h, w = rng.integers(3, 8, size=2)
        shape = [(1, 1), (3, 3), (3, 5)][trial % 3]
        sigma_c = [0.1, math.inf][trial % 2]
        x = Tensor(rng.uniform(-2.0, 3.0, size=(h, w)))
        theta = Tensor(rng.normal(scale=2.0, size=(h, w, shape[0] * shape[1])))
        out = ag.value_of(of_apply(x, theta, shape, sigma_c))
        assert out.min() >= x.array.min() - 1e-12
        assert out.max() <= x.array.max() + 1e-12


def test_of_apply_theta_shape_checked():
    x = Tensor(np.zeros((4, 4)))
    with pytest.raises(ConfigurationError):
        of_apply(x, Tensor(np.zeros((4, 4, 8))), (3, 3), 0.1)


def test_of_apply_gradients_match_fd():
    rng = np.random.default_rng(31)
    x0 = rng.uniform(0.2, 0.8, size=(4, 4))
    th0 = rng.normal(scale=0.5, size=(4, 4, 9))

    def probe(xa, ta):
        val = of_apply(xa, ta, (3, 3), 0.3)
        return ag.vsum(ag.square(val))

    tape = Tape()
    xv = tape.input(Tensor(x0))
    tv = tape.input(Tensor(th0))
    gx, gt = tape_backward(probe(xv, tv), Tensor(np.float64(1.0)), [xv, tv])

    fx = fd_gradient(lambda a: float(ag.value_of(probe(Tensor(a), Tensor(th0)))), x0)
    ft = fd_gradient(lambda a: float(ag.value_of(probe(Tensor(x0), Tensor(a)))), th0)
    assert np.max(np.abs(gx.array - fx)) < 1e-6 * max(1.0, np.max(np.abs(fx)))
    assert np.max(np.abs(gt.array - ft)) < 1e-6 * max(1.0, np.max(np.abs(ft)))


def test_chain_apply_color_source_switch():
    rng = np.random.default_rng(7)
    x = Tensor(rng.uniform(size=(5, 5)))
    shapes = ((3, 3), (3, 3))
    thetas = [Tensor(rng.normal(size=(5, 5, 9))) for _ in shapes]

    orig = FilterChain(shapes=shapes, sigma_c=0.2, color_from_original=True)
    got = ag.value_of(chain_apply(x, thetas, orig))
    step1 = of_apply(x, thetas[0], (3, 3), 0.2, color_src=x)
    manual = ag.value_of(of_apply(step1, thetas[1], (3, 3), 0.2, color_src=x))
    assert np.array_equal(got, manual)

    own = FilterChain(shapes=shapes, sigma_c=0.2)
    got2 = ag.value_of(chain_apply(x, thetas, own))
    manual2 = ag.value_of(of_apply(step1, thetas[1], (3, 3), 0.2, color_src=step1))
    assert np.array_equal(got2, manual2)
    assert not np.array_equal(got, got2)


def test_chain_apply_requires_one_theta_per_filter():
    x = Tensor(np.zeros((4, 4)))
    chain = FilterChain(shapes=((3, 3), (3, 3)))
    with pytest.raises(ConfigurationError):
        chain_apply(x, [Tensor(np.zeros((4, 4, 9)))], chain)


# ---------------------------------------------------------------------------
# perceptual distance proxy


def test_perceptual_distance_zero_iff_identical():
    rng = np.random.default_rng(3)
    a = Tensor(rng.uniform(size=(6, 6)))
    assert float(ag.value_of(perceptual_distance(a, a))) == 0.0
    b = Tensor(a.array + 0.01 * rng.normal(size=(6, 6)))
    assert float(ag.value_of(perceptual_distance(a, b))) > 0.0


def test_perceptual_distance_symmetric():
    rng = np.random.default_rng(4)
    a = Tensor(rng.uniform(size=(7, 6)))
    b = Tensor(rng.uniform(size=(7, 6)))
    dab = ag.value_of(perceptual_distance(a, b))
    dba = ag.value_of(perceptual_distance(b, a))
    assert np.array_equal(dab, dba)


def test_perceptual_distance_grows_with_amplitude():
    rng = np.random.default_rng(9)
    a = Tensor(rng.uniform(0.2, 0.8, size=(8, 8)))
    n = rng.normal(size=(8, 8))
    small = float(ag.value_of(perceptual_distance(a, Tensor(a.array + 0.001 * n))))
    large = float(ag.value_of(perceptual_distance(a, Tensor(a.array + 0.05 * n))))
    assert 0.0 < small < large


def test_perceptual_distance_contracts():
    with pytest.raises(ConfigurationError):
        perceptual_distance(Tensor(np.zeros((6, 6))), Tensor(np.zeros((6, 7))))
    with pytest.raises(ConfigurationError):
        perceptual_distance(Tensor(np.zeros((4, 4))), Tensor(np.zeros((4, 4))))


def test_perceptual_distance_gradient_matches_fd():
    rng = np.random.default_rng(13)
    a0 = rng.uniform(0.2, 0.8, size=(6, 6))
    b0 = a0 + 0.05 * rng.normal(size=(6, 6))

    tape = Tape()
    bv = tape.input(Tensor(b0))
    (gb,) = tape_backward(
        perceptual_distance(Tensor(a0), bv), Tensor(np.float64(1.0)), [bv]
    )
    fb = fd_gradient(
        lambda z: float(ag.value_of(perceptual_distance(Tensor(a0), Tensor(z)))), b0
    )
    assert np.max(np.abs(gb.array - fb)) < 1e-4 * max(1.0, np.max(np.abs(fb)))


# ---------------------------------------------------------------------------
# reparameterisation and optimiser


def test_tanh_reparam_round_trip():
    rng = np.random.default_rng(17)
    x = Tensor(rng.uniform(0.05, 0.95, size=(3, 4)))
    back = ag.value_of(tanh_scale(arctanh_reparam(x, 0.0, 1.0), 0.0, 1.0))
    assert np.max(np.abs(back - x.array)) < 1e-12

    edge = Tensor(np.array([0.0, 1.0, 0.5]))
    out = ag.value_of(tanh_scale(arctanh_reparam(edge, 0.0, 1.0), 0.0, 1.0))
    assert np.all(np.isfinite(out))
    assert np.all((out >= 0.0) & (out <= 1.0))
    assert np.max(np.abs(out - edge.array)) < 1e-5

    with pytest.raises(ConfigurationError):
        arctanh_reparam(x, 1.0, 1.0)


def test_tanh_scale_respects_box():
    u = Tensor(np.array([-50.0, -1.0, 0.0, 2.0, 50.0]))
    out = ag.value_of(tanh_scale(u, -0.25, 0.75))
    assert np.all(out >= -0.25) and np.all(out <= 0.75)
    assert out[2] == pytest.approx(0.25, abs=1e-15)


def test_adam_matches_reference_updates():
    rng = np.random.default_rng(29)
    p1 = rng.normal(size=3)
    p2 = rng.normal(size=(2, 2))
    opt = Adam([p1, p2], [0.1, 0.02])

    r1, m1, v1 = p1.copy(), np.zeros(3), np.zeros((3,))
    r2, m2, v2 = p2.copy(), np.zeros((2, 2)), np.zeros((2, 2))
    for t in range(1, 6):
        g1 = rng.normal(size=3)
        g2 = rng.normal(size=(2, 2))
        opt.accumulate([g1, g2])
        opt.step()
        opt.zero_grad()
        r1, m1, v1 = reference_adam_step(r1, g1, m1, v1, t, 0.1)
        r2, m2, v2 = reference_adam_step(r2, g2, m2, v2, t, 0.02)
        assert np.array_equal(p1, r1)
        assert np.array_equal(p2, r2)
    assert opt.t == 5


def test_adam_accumulates_and_resets():
    p = np.zeros(2)
    opt = Adam([p], [0.5])
    opt.accumulate([np.array([1.0, -2.0])])
    opt.accumulate([Tensor(np.array([0.5, 0.5]))])
    assert np.array_equal(opt.g[0], np.array([1.5, -1.5]))
    opt.zero_grad()
    assert np.array_equal(opt.g[0], np.zeros(2))
    with pytest.raises(ConfigurationError):
        Adam([p], [0.1, 0.2])


# ---------------------------------------------------------------------------
# configs and success levels


@pytest.mark.parametrize(
    "kwargs",
    [
        {"kind": "carlini"},
        {"success": "all"},
        {"eps_inf": -0.1},
        {"iters": -1},
        {"eot_n": 0},
        {"eot_steps": 0},
        {"lf_copies": 0},
        {"min_val": 1.0, "max_val": 0.0},
        {"eta": 0.0},
        {"tau_p": -0.01},
        {"c": -1.0},
    ],
)
def test_attack_config_rejects(kwargs):
    with pytest.raises(ConfigurationError):
        AttackConfig(**kwargs)


def test_attack_config_step_size():
    assert AttackConfig(eps_inf=0.2).step_size == pytest.approx(0.05)
    assert AttackConfig(eps_inf=0.2, eta=0.013).step_size == 0.013


def test_success_levels():
    assert success_of("sp", [2, 0, 0], 0)
    assert not success_of("sp", [0, 2, 2], 0)
    assert success_of("wor", [0, 0, 1], 0)
    assert not success_of("wor", [0, 0, 0], 0)
    assert not success_of("mv", [0, 0, 1], 0)
    assert success_of("mv", [1, 1, 0], 0)
    with pytest.raises(ConfigurationError):
        success_of("sample", [0], 0)


# ---------------------------------------------------------------------------
# attack drivers on a small analytic pipeline


@pytest.fixture(scope="module")
def sched():
    return NoiseSchedule()


@pytest.fixture(scope="module")
def pipe6(sched):
    rng = np.random.default_rng(8)
    means = np.clip(0.5 + 0.35 * rng.normal(size=(3, 6)), 0.05, 0.95)
    mix = GaussianMixtureData(np.full(3, 1.0 / 3.0), means, 0.25)
    cfg = PurifyConfig(t_star=0.005, dt=-1e-3)
    model = AnalyticMixtureScore(mix, sched)
    return DefensePipeline(cfg, model, sched, BayesMixtureClassifier(mix), "prob-y")


@pytest.fixture(scope="module")
def pipe36(sched):
    rng = np.random.default_rng(21)
    means = np.clip(0.5 + 0.3 * rng.normal(size=(3, 36)), 0.05, 0.95)
    mix = GaussianMixtureData(np.full(3, 1.0 / 3.0), means, 0.3)
    cfg = PurifyConfig(t_star=0.004, dt=-1e-3)
    model = AnalyticMixtureScore(mix, sched)
    return DefensePipeline(cfg, model, sched, BayesMixtureClassifier(mix), "prob-y")


def test_pgd_respects_ball_and_box(pipe6):
    x0 = Tensor(pipe6.model.mix.means[0].copy())
    cfg = AttackConfig(eps_inf=0.05, iters=3, eot_n=2, success="wor", seed=5)
    res = pgd_attack(x0, 0, cfg, pipe6, GradMode("full-checkpoint"))
    assert float(np.max(np.abs(res.x_adv.array - x0.array))) <= 0.05 + 1e-12
    assert res.x_adv.array.min() >= 0.0 and res.x_adv.array.max() <= 1.0
    assert len(res.trace) <= cfg.iters + 1
    phases = {r.phase for r in res.trace}
    assert phases <= {"iter", "final"}
    for r in res.trace[:-1]:
        assert r.phase == "iter"


def test_pgd_is_deterministic(pipe6):
    x0 = Tensor(pipe6.model.mix.means[1].copy())
    cfg = AttackConfig(eps_inf=0.08, iters=2, eot_n=2, success="mv", seed=3)
    r1 = pgd_attack(x0, 1, cfg, pipe6, GradMode("full-checkpoint"))
    r2 = pgd_attack(x0, 1, cfg, pipe6, GradMode("full-checkpoint"))
    assert np.array_equal(r1.x_adv.array, r2.x_adv.array)
    assert [t.mean_loss for t in r1.trace] == [t.mean_loss for t in r2.trace]
    assert r1.final_preds == r2.final_preds


def test_pgd_early_exit_keeps_evaluated_iterate(pipe6):
    # the clean point classifies as 0, so claiming label 1 breaks at once
    x0 = Tensor(pipe6.model.mix.means[0].copy())
    cfg = AttackConfig(eps_inf=0.1, iters=4, eot_n=2, success="sp", seed=2)
    res = pgd_attack(x0, 1, cfg, pipe6, GradMode("bpda"))
    assert res.success
    assert res.iterations == 1
    assert res.trace[-1].phase == "iter"
    assert np.array_equal(res.x_adv.array, x0.array)


def test_pgd_zero_iters_evaluates_only(pipe6):
    x0 = Tensor(pipe6.model.mix.means[2].copy())
    cfg = AttackConfig(eps_inf=0.05, iters=0, eot_n=3, success="wor", seed=1)
    res = pgd_attack(x0, 2, cfg, pipe6, GradMode("bpda"))
    assert res.iterations == 0
    assert len(res.trace) == 1
    assert res.trace[0].phase == "final"
    assert np.array_equal(res.x_adv.array, x0.array)
    assert res.success == any(res.final_outcomes)


def test_lf_grid_contracts(pipe36):
    x = Tensor(np.full(36, 0.5))
    cfg = AttackConfig(kind="lf", iters=1, eot_steps=1, lf_copies=1)
    with pytest.raises(ConfigurationError):
        lf_attack(x, 0, cfg, pipe36)
    with pytest.raises(ConfigurationError):
        lf_attack(x, 0, cfg, pipe36, grid=(5, 6))


def test_lf_failure_returns_original_input(pipe36):
    x = Tensor(pipe36.model.mix.means[0].copy())
    chain = FilterChain(shapes=((3, 3),), sigma_c=0.2)
    cfg = AttackConfig(
        kind="lf", iters=2, eot_steps=1, lf_copies=1, success="mv",
        tau_p=1e-12, chain=chain, seed=4,
    )
    res = lf_attack(x, 0, cfg, pipe36, grid=(6, 6))
    assert not res.success
    assert np.array_equal(res.x_adv.array, x.array)
    assert res.iterations == cfg.iters * cfg.eot_steps
    assert len(res.trace) == res.iterations + 1
    assert res.trace[-1].phase == "final"
    assert res.trace[-1].dist == 0.0
    assert [r.iteration for r in res.trace[:-1]] == list(range(1, res.iterations + 1))


def test_lf_success_requires_distance_budget(pipe36):
    # wrong label on a clean point: the identity-initialised candidate
    # already breaks, and its distance is far under the budget
    x = Tensor(pipe36.model.mix.means[1].copy())
    chain = FilterChain(shapes=((3, 3),), sigma_c=0.2)
    cfg = AttackConfig(
        kind="lf", iters=2, eot_steps=1, lf_copies=1, success="mv",
        tau_p=0.05, chain=chain, seed=4,
    )
    res = lf_attack(x, 2, cfg, pipe36, grid=(6, 6))
    assert res.success
    assert res.iterations == 1
    assert res.trace[-1].dist <= cfg.tau_p
    assert np.max(np.abs(res.x_adv.array - x.array)) < 1e-6
    assert res.x_adv.array.min() >= 0.0 and res.x_adv.array.max() <= 1.0


def test_lf_is_deterministic(pipe36):
    x = Tensor(pipe36.model.mix.means[2].copy())
    chain = FilterChain(shapes=((3, 3),), sigma_c=0.2)
    cfg = AttackConfig(
        kind="lf", iters=2, eot_steps=2, lf_copies=1, success="mv",
        tau_p=1e-12, chain=chain, seed=6,
    )
    r1 = lf_attack(x, 2, cfg, pipe36, grid=(6, 6))
    r2 = lf_attack(x, 2, cfg, pipe36, grid=(6, 6))
    assert np.array_equal(r1.x_adv.array, r2.x_adv.array)
    assert [t.mean_loss for t in r1.trace] == [t.mean_loss for t in r2.trace]
    assert [t.dist for t in r1.trace] == [t.dist for t in r2.trace]
