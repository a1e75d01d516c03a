"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

Run with ``pytest -v tests/test_acceptance.py``; the summary at the end of the
session lists every criterion with its measured values.
"""

import math

import numpy as np
import pytest

from latephase.cli import main, read_csv
from latephase.config import load_config
from latephase.engine import (LatePhaseConfig, WeightPartition, collapse, member_predict_average,
                              spawn_partition)
from latephase.metrics import auroc, flatness_score, predictive_entropy
from latephase.models import (build_late_partition, cross_entropy, forward, init_params, mlp,
                              predict_logits, unflatten, flatten, loss_and_grads)
from latephase.nqp import (MomentState, NqpExperimentConfig, NqpProblem, moment_step,
                           nqp_scaling_experiment, steady_state_covariance,
                           time_averaged_covariance)
from latephase.numerics import RngStream, check_gradient
from latephase.optim import SwaState, swa_update
from latephase.training import Trainer, load_task

from conftest import random_psd, random_spd
from test_models import LATE_MODELS, random_net, sample_batch

pytestmark = pytest.mark.acceptance


# 1. NQP 1/K scaling

@pytest.fixture(scope="module")
def nqp_result():
    cfg = NqpExperimentConfig(n=20, K_list=(1, 2, 5, 10, 20), iters=1_000_000, k_avg=10_000,
                              seeds=(0, 1, 2, 3, 4))
    return nqp_scaling_experiment(cfg, methods=("late_phase", "full_ensemble"))


@pytest.mark.slow
def test_criterion_1a_full_ensemble_slope(nqp_result, criterion):
    slope = nqp_result.slopes["full_ensemble"]
    ok = -1.15 <= slope <= -0.85
    criterion("1a", "NQP full-ensemble log-log slope in [-1.15, -0.85]", ok, f"slope {slope:+.4f}")
    assert ok


@pytest.mark.slow
def test_criterion_1b_late_phase_slope(nqp_result, criterion):
    slope = nqp_result.slopes["late_phase"]
    ok = -1.15 <= slope <= -0.85
    criterion("1b", "NQP late-phase log-log slope in [-1.15, -0.85]", ok, f"slope {slope:+.4f}")
    assert ok


@pytest.mark.slow
def test_criterion_1c_methods_agree(nqp_result, criterion):
    late = nqp_result.aggregate("late_phase")
    full = nqp_result.aggregate("full_ensemble")
    ratios = {K: late[K] / full[K] for K in sorted(full)}
    worst = max(abs(r - 1) for r in ratios.values())
    ok = worst <= 0.25
    detail = ", ".join(f"K={K}: {r:.3f}" for K, r in ratios.items())
    criterion("1c", "NQP late-phase vs full ensemble within 25% at every K", ok,
              f"late/full ratios {detail}")
    assert ok


# 2. closed-form oracle

def test_criterion_2_closed_form_oracle(criterion):
    worst = 0.0
    for seed in range(20):
        gen = np.random.default_rng(seed)
        n = int(gen.integers(1, 6))
        H, S = random_spd(gen, n), random_psd(gen, n)
        p = NqpProblem(H, S, gen.standard_normal(n), batch_size=int(gen.integers(1, 4)))
        eta, K = 0.5, int(gen.integers(1, 6))
        target = steady_state_covariance(p, eta, K)
        m = MomentState(p.w_star.copy(), np.zeros((n, n)))
        for _ in range(400):
            m = moment_step(p, m, eta, K)
        worst = max(worst, float(np.max(np.abs(m.covariance - target))))
    sim_worst = 0.0
    for seed in range(3):
        gen = np.random.default_rng(100 + seed)
        H, S = random_spd(gen, 3), random_psd(gen, 3) + 0.1 * np.eye(3)
        p = NqpProblem(H, S, np.zeros(3))
        C = steady_state_covariance(p, 0.5, 4)
        emp = time_averaged_covariance(p, 0.5, 4, 1_000_000, RngStream(seed, 20))
        scale = np.sqrt(np.outer(np.diag(C), np.diag(C)))
        sim_worst = max(sim_worst, float(np.max(np.abs(emp - C) / scale)))
    ok = worst <= 1e-10 and sim_worst <= 0.05
    criterion(2, "moment recursion fixed point and simulated covariance", ok,
              f"recursion sup-norm {worst:.2e}; simulated max deviation {sim_worst:.2%}")
    assert worst <= 1e-10
    assert sim_worst <= 0.05


# 3. exact 1/K law

def test_criterion_3_exact_inverse_k(criterion):
    worst = 0.0
    for seed in range(5):
        gen = np.random.default_rng(seed)
        n = 5
        p = NqpProblem(random_spd(gen, n), random_psd(gen, n), np.zeros(n))
        c1 = steady_state_covariance(p, 0.3, 1)
        for K in (2, 4, 8):
            cK = steady_state_covariance(p, 0.3, K)
            worst = max(worst, float(np.max(np.abs(cK - c1 / K) / np.max(np.abs(c1 / K)))))
    ok = worst <= 4 * np.finfo(float).eps
    criterion(3, "steady-state covariance scales exactly as 1/K", ok,
              f"max relative deviation {worst:.1e}")
    assert ok


# 4. gradient correctness

def test_criterion_4_gradients(criterion):
    worst = {}
    for late_model in LATE_MODELS:
        worst[late_model] = 0.0
        for seed in range(20):
            spec, params, _, gen = random_net(seed, late_model)
            x, y = sample_batch(spec, params, gen)
            keys = sorted(params)
            _, grads = loss_and_grads(spec, params, None, x, y, update_stats=False)

            def f(vec):
                logits, _ = forward(spec, unflatten(vec, params, keys), None, x,
                                    train=True, update_stats=False)
                return cross_entropy(logits, y)

            report = check_gradient(f, flatten(grads, keys), flatten(params, keys), h=1e-4)
            worst[late_model] = max(worst[late_model], report.max_rel_error)
    ok = max(worst.values()) < 1e-4
    detail = ", ".join(f"{k or 'plain'} {v:.1e}" for k, v in worst.items())
    criterion(4, "finite-difference gradient checks over 20 nets per model", ok, detail)
    assert ok


# 5. reduction invariant

def test_criterion_5_reduction_invariant(criterion):
    overrides = ["data.n=200", "data.features=4", "data.classes=3", "model.hidden=[8]",
                 "train.epochs=50", "train.batch_size=10", "late.K=4", "late.T0=5.0",
                 "late.sigma0=0.0", "late.shared_minibatch=true", "late.gamma_theta=0.25",
                 "train.reestimate_bn=false"]
    cfg = load_config(None, overrides)
    train, test, _, _ = load_task(cfg)
    late = Trainer(cfg, train, test)
    base = Trainer(cfg, train, test, late_enabled=False)
    worst = 0.0
    steps = 0
    while not late.finished:
        late.step()
        base.step()
        steps += 1
        ref = base.partition.member(0)
        ref_buf = base.partition.buffers[0]
        for k in range(late.partition.K):
            member = late.partition.member(k)
            for name in ref:
                worst = max(worst, float(np.max(np.abs(member[name] - ref[name]))))
            for name in ref_buf:
                worst = max(worst, float(np.max(np.abs(late.partition.buffers[k][name]
                                                       - ref_buf[name]))))
    ok = worst <= 1e-10 and base.finished and late.partition.K == 4
    criterion(5, "sigma0=0, shared batches, gamma=1/K reproduces K=1 trajectory", ok,
              f"{steps} iterations, 50 epochs, max deviation {worst:.1e}")
    assert ok


# 6. linear collapse equivalence

def test_criterion_6_linear_collapse(criterion):
    worst = 0.0
    for late_model in ("last_layer_only", "hypernet"):
        for seed in range(5):
            if late_model == "last_layer_only":
                spec = mlp(6, [5, 4], 3, batchnorm=False, activation=False)
            else:
                spec = mlp(6, [], 3, batchnorm=False, late_model="hypernet",
                           include_last=False, hypernet_dim=3)
            params, buffers = init_params(spec, RngStream(seed, 10))
            _, late_keys = build_late_partition(spec, late_model)
            part = spawn_partition(WeightPartition.from_params(params, late_keys, buffers),
                                   LatePhaseConfig(K=5, sigma0=0.5), RngStream(seed, 12))
            x = np.random.default_rng(seed).standard_normal((100, 6))
            p, b = collapse(part)
            collapsed = predict_logits(spec, p, b, x)
            mean = member_predict_average(part, lambda q, c, z: predict_logits(spec, q, c, z), x)
            worst = max(worst, float(np.max(np.abs(collapsed - mean))))
    ok = worst <= 1e-12
    criterion(6, "collapsed prediction equals member average for linear nets", ok,
              f"max deviation {worst:.1e} over 100 inputs x 10 nets")
    assert ok


# 7. SWA exactness

def test_criterion_7_swa_exact(criterion):
    gen = np.random.default_rng(7)
    worst = 0.0
    for n in (1, 2, 10, 1000):
        st = SwaState()
        snaps = []
        for _ in range(n):
            p = {"a": gen.standard_normal((3, 2)), "b": gen.standard_normal(4) * 100}
            snaps.append(p)
            swa_update(st, p)
        for key in ("a", "b"):
            mean = np.mean([s[key] for s in snaps], axis=0)
            worst = max(worst, float(np.max(np.abs(st.average[key] - mean))))
        assert st.t == n
    ok = worst <= 1e-12
    criterion(7, "SWA average equals snapshot mean", ok, f"max deviation {worst:.1e}")
    assert ok


# 8. metric identities

def test_criterion_8_metric_identities(criterion):
    entropy_ok = all(predictive_entropy(np.full(C, 1.0 / C)) == math.log(C) for C in range(1, 101))
    entropy_ok &= all(predictive_entropy(np.eye(C)[C // 2]) == 0.0 for C in range(1, 20))
    gen = np.random.default_rng(8)
    anti = mono = 0
    for _ in range(1000):
        a = np.round(gen.normal(size=gen.integers(1, 40)), int(gen.integers(0, 3)))
        b = np.round(gen.normal(0.3, 1, size=gen.integers(1, 40)), int(gen.integers(0, 3)))
        anti += auroc(a, b).auroc + auroc(b, a).auroc != 1.0
        mono += auroc(np.exp(2 * a), np.exp(2 * b)).auroc != auroc(a, b).auroc
    H = random_spd(gen, 4)
    w = gen.standard_normal(4)
    loss = lambda v: 0.5 * float(v @ H @ v)
    zero, _ = flatness_score(loss, w, 0.0, 10, RngStream(0, 13))
    sigma, n = 0.1, 5000
    mean, std = flatness_score(loss, w, sigma, n, RngStream(1, 13))
    analytic = 0.5 * sigma**2 * float(np.sum(np.diag(H) * w**2))
    z = abs(mean - analytic) / (std / math.sqrt(n))
    ok = entropy_ok and anti == 0 and mono == 0 and zero == 0.0 and z <= 3
    criterion(8, "entropy, AUROC and flatness identities", ok,
              f"antisymmetry failures {anti}, monotone failures {mono}, flatness z={z:.2f}")
    assert ok


# 9. desk-scale behavioral check

@pytest.fixture(scope="module")
def seed_sweep(tmp_path_factory):
    out = tmp_path_factory.mktemp("behavior")
    args = ["sweep", "--out", str(out), "--set", "sweep.seed=[0, 1, 2, 3, 4, 5, 6, 7, 8, 9]"]
    assert main(args) == 0
    return out


@pytest.mark.slow
def test_criterion_9_late_phase_non_inferior(seed_sweep, criterion):
    rows = read_csv(seed_sweep / "sweep_runs.csv")
    acc = {m: [float(r["test_acc"]) for r in rows if r["model"] == m]
           for m in ("collapsed", "base")}
    assert len(acc["collapsed"]) == len(acc["base"]) == 10
    late_med = float(np.median(acc["collapsed"]))
    base_med = float(np.median(acc["base"]))
    diff_pp = 100 * (late_med - base_med)
    ok = diff_pp >= -0.5
    criterion(9, "late-phase BatchNorm median accuracy >= base median - 0.5pp", ok,
              f"late {100 * late_med:.2f}%, base {100 * base_med:.2f}%, difference {diff_pp:+.2f}pp")
    assert ok


# 10. OOD sanity

@pytest.fixture(scope="module")
def default_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("default") / "train"
    assert main(["train", "--out", str(out)]) == 0
    return out


@pytest.mark.slow
def test_criterion_10_ood_auroc(default_run, tmp_path, criterion):
    out = tmp_path / "ood"
    assert main(["ood", "--out", str(out), "--set", f"ood.checkpoint=\"{default_run}\"",
                 "--set", "ood.n=10000"]) == 0
    rows = {(r["model"], r["ood_set"]): float(r["auroc"]) for r in read_csv(out / "ood.csv")}
    far, null = rows[("collapsed", "far")], rows[("collapsed", "null")]
    ok = far > 0.9 and 0.45 <= null <= 0.55
    others = ", ".join(f"{m} {rows[(m, 'far')]:.3f}/{rows[(m, 'null')]:.3f}"
                       for m in ("base", "ensemble"))
    criterion(10, "entropy AUROC far > 0.9 and null in [0.45, 0.55]", ok,
              f"collapsed far {far:.3f}, null {null:.3f} (far/null: {others})")
    assert ok


# 11. reproducibility

def test_criterion_11_reproducible_csvs(tmp_path, criterion):
    common = ["--set", "data.n=400", "--set", "train.epochs=4", "--set", "late.T0=2.0",
              "--set", "late.K=3", "--set", "late.sigma0=0.05", "--seed", "7"]
    nqp = ["--set", "nqp.n=4", "--set", "nqp.iters=3000", "--set", "nqp.k_avg=500",
           "--set", "nqp.K_list=[1, 2]", "--seed", "7"]
    compared = []
    for tag in ("a", "b"):
        run = tmp_path / tag
        assert main(["train", "--out", str(run / "train")] + common) == 0
        assert main(["nqp", "--out", str(run / "nqp")] + nqp) == 0
        assert main(["flatness", "--out", str(run / "flat"), "--set",
                     f"flatness.checkpoint=\"{run / 'train'}\"", "--set", "flatness.n_samples=3",
                     "--seed", "7"]) == 0
        assert main(["ood", "--out", str(run / "ood"), "--set",
                     f"ood.checkpoint=\"{run / 'train'}\"", "--set", "ood.n=300"]) == 0
    files = ["train/metrics.csv", "train/summary.csv", "nqp/nqp.csv", "nqp/nqp_slopes.csv",
             "flat/flatness.csv", "ood/ood.csv", "ood/ood_scores.csv"]
    same = [name for name in files
            if (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()]
    ok = len(same) == len(files)
    criterion(11, "same config and seed give byte-identical metric CSVs", ok,
              f"{len(same)}/{len(files)} files identical")
    assert ok
