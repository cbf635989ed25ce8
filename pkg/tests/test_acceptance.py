"""Acceptance criteria 1-12. Each test records one PASS/FAIL line, printed at the end of the
session (see conftest.py). Run just this file with ``pytest tests/test_acceptance.py``."""
import math
import time

import numpy as np
import pytest

from aislab import cli, ipm, nn
from aislab.ais import AisConfig, NeuralAisGenerator, ais_loss, identity_generator
from aislab.ais_dp import BoundConfig, bound_report, campaign_instance, run_campaign
from aislab.mdp import toy_mdp, value_iteration
from aislab.toy import fsm_check, toy_report, two_class_partitions
from aislab.train import TrainConfig, evaluate, make_env, train_loop, validate_schedule

RESULTS = {}
SLACK = 1e-9


def record(n, ok, detail):
    RESULTS[n] = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(RESULTS[n])
    assert ok, detail


@pytest.fixture(scope="module")
def campaign():
    t0 = time.perf_counter()
    res = run_campaign(200)
    return res, time.perf_counter() - t0


def test_c01_toy_optimal_policy():
    t0 = time.perf_counter()
    res = value_iteration(toy_mdp(100.0, 0.95), 1e-10)
    dt = time.perf_counter() - t0
    pi = tuple(res.pi_star.greedy_actions().tolist())
    deterministic = bool(np.all(res.pi_star.action_probs.max(axis=1) == 1.0))
    record(1, pi == (0, 0, 1, 2) and deterministic and dt < 1.0, f"pi*={pi} in {dt:.3f}s")


def test_c02_codebook_equivalence():
    t0 = time.perf_counter()
    matches, decisions, detail, unreachable = fsm_check(100.0, 0.95, 12)
    dt = time.perf_counter() - t0
    record(2, matches and unreachable and dt < 5.0, f"{decisions} branch decisions, state 3 unreachable={unreachable}, {dt:.2f}s {detail}")


def test_c03_memoryless_failure():
    t0 = time.perf_counter()
    rep = toy_report(100.0, 0.95)
    dt = time.perf_counter() - t0
    gaps = {"".join(map(str, p)): rep.v_star[2] - rep.best_memoryless(p).value_state2 for p in two_class_partitions()}
    short = sorted(k for k, g in gaps.items() if not g >= 10.0)
    ok = not short and dt < 5.0
    detail = f"{len(rep.memoryless)} policies over {len(gaps)} partitions in {dt:.2f}s; smallest gap per partition " + ", ".join(f"{k}:{g:.2f}" for k, g in gaps.items())
    if short:
        detail += f"; partitions with gap < 10: {short}"
    record(3, ok, detail)


def test_c04_theorem_campaign(campaign):
    res, dt = campaign
    viol = [r for r in res.reports if r.delta_gap > r.thm1_rhs + SLACK]
    cor_viol = [r for r in res.reports if r.corollary_applies and r.thm1_rhs > r.cor_rhs + SLACK]
    applies = sum(r.corollary_applies for r in res.reports)
    ok = len(res.reports) == 600 and not viol and not cor_viol and res.n_violations == 0 and dt < 120
    record(4, ok, f"{len(res.reports)} reports, {len(viol)} theorem and {len(cor_viol)} corollary violations ({applies} corollary checks), {dt:.1f}s")


def test_c05_identity_degeneracy():
    t0 = time.perf_counter()
    worst = 0.0
    cfg = BoundConfig(raise_on_violation=False)
    for seed in range(50):
        mdp, _ = campaign_instance(1000 + seed)
        gen = identity_generator(mdp)
        for name in ("tv", "wasserstein", "mmd"):
            r = bound_report(mdp, gen, name, cfg)
            worst = max(worst, abs(r.eps), abs(r.delta), abs(r.delta_gap))
    dt = time.perf_counter() - t0
    record(5, worst <= 1e-9 and dt < 10.0, f"max |eps|,|delta|,|Delta| = {worst:.2e} over 50 MDPs, {dt:.2f}s")


def test_c06_value_span_and_lipschitz(campaign):
    res, _ = campaign
    span_bad = sum(r.constants["span_v"] > r.constants["span_r"] / (1 - r.gamma) + SLACK for r in res.reports)
    lip = [r for r in res.reports if r.ipm == "wasserstein" and r.gamma * r.constants["L_P"] * r.constants["L_f"] < 1]
    lip_bad = sum(r.constants["L_V_measured"] > r.constants["L_V"] + SLACK for r in lip)
    record(6, span_bad == 0 and lip_bad == 0, f"span: {span_bad}/{len(res.reports)} violations; Lipschitz: {lip_bad}/{len(lip)} violations")


def test_c07_ipm_correctness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    w_tv = 0.0
    for _ in range(500):
        n = int(rng.integers(2, 9))
        p, q = rng.dirichlet(np.ones(n)), rng.dirichlet(np.ones(n))
        w_tv = max(w_tv, abs(ipm.wasserstein_exact(p, q, ipm.DISCRETE) - ipm.tv_std(p, q)))
    anchor = 0.0
    for _ in range(50):
        xs = rng.normal(size=(6, 2))
        p, q = ipm.DiscreteDist(xs, rng.dirichlet(np.ones(6))), ipm.DiscreteDist(xs, rng.dirichlet(np.ones(6)))
        a = ipm.mmd_closed(p, q, ipm.distance_kernel(1.0, anchor=np.zeros(2)))
        b = ipm.mmd_closed(p, q, ipm.distance_kernel(1.0, anchor=rng.normal(size=2) * 3))
        anchor = max(anchor, abs(a - b))
    pinsker_bad = 0
    for _ in range(1000):
        n = int(rng.integers(2, 7))
        p, q = rng.dirichlet(np.ones(n)), rng.dirichlet(np.ones(n))
        chain = ipm.kl_and_pinsker(p, q, 1.0)
        w = ipm.wasserstein_exact(p, q, ipm.DISCRETE)
        pinsker_bad += not (w <= chain.tv_std + 1e-12 and chain.tv_std <= chain.w_upper + 1e-12)
    k = ipm.energy_kernel(1.0, ipm.DISCRETE)
    p, q = np.array([0.5, 0.3, 0.2]), np.array([0.2, 0.2, 0.6])
    target = ipm.mmd_closed(p, q, k) ** 2
    stats = np.array([ipm.mmd_u_statistic(rng.choice(3, 20, p=p), rng.choice(3, 20, p=q), k) for _ in range(10_000)])
    z = abs(stats.mean() - target) / (stats.std(ddof=1) / math.sqrt(len(stats)))
    dt = time.perf_counter() - t0
    ok = w_tv <= 1e-10 and anchor <= 1e-12 and pinsker_bad == 0 and z <= 3 and dt < 60
    record(7, ok, f"|W-tv| {w_tv:.1e}, anchor {anchor:.1e}, Pinsker violations {pinsker_bad}, U-stat z={z:.2f}, {dt:.1f}s")


def _gru_loss(xs):
    def loss(L):
        z = nn.Tensor(np.zeros((2, 4)))
        for x in xs:
            z = nn.gru_step(L, z, x)
        return nn.tsum(z * z)

    return loss


def test_c08_gradient_integrity():
    import types

    t0 = time.perf_counter()
    rng = np.random.default_rng(8)
    errs = {}
    p = nn.ParamSet(nn.init_mlp(rng, [3, 5, 2], "m"))
    x = rng.normal(size=(4, 3))
    errs["mlp"] = nn.grad_rel_error(lambda L: nn.tsum(nn.mlp(L, "m", x, 2) ** 2), p)
    errs["gru5"] = nn.grad_rel_error(_gru_loss(rng.normal(size=(5, 2, 3))), nn.ParamSet(nn.init_gru(rng, 3, 4)))
    batch = types.SimpleNamespace(states=rng.integers(0, 4, (3, 4)), actions=rng.integers(0, 3, (3, 3)), rewards=rng.normal(size=(3, 3)))
    cont = types.SimpleNamespace(states=rng.normal(size=(2, 4)), actions=rng.uniform(-1, 1, (2, 3)), rewards=rng.normal(size=(2, 3)))
    for variant, kernel in (("mmd", "mean"), ("mmd", "energy"), ("kl", "mean")):
        cfg = AisConfig(ipm_variant=variant, kernel=kernel)
        gen = NeuralAisGenerator.create(rng, 4, 3, 4, variant=variant, head_hidden=6, kernel=kernel)
        errs[f"ais-{variant}-{kernel}-tab"] = nn.grad_rel_error(lambda L: ais_loss(batch, gen, cfg, L).total, gen.params)
        gen = NeuralAisGenerator.create(rng, 1, 1, 4, tabular=False, variant=variant, head_hidden=6, kernel=kernel)
        errs[f"ais-{variant}-{kernel}-cont"] = nn.grad_rel_error(lambda L: ais_loss(cont, gen, cfg, L).total, gen.params)
    hp = nn.ParamSet(nn.init_linear(rng, 5, 4, "h"))
    feats, act = rng.normal(size=(3, 3)), nn.one_hot([0, 1, 1], 2)
    target = nn.one_hot([2, 0, 3], 4)
    errs["softmax-head"] = nn.grad_rel_error(lambda L: nn.tsum(nn.softmax_head(L, "h", feats, act) * target), hp)
    y = rng.normal(size=(3, 4))
    errs["gaussian-head"] = nn.grad_rel_error(lambda L: nn.tsum(nn.gaussian_log_prob(nn.gaussian_head(L, "h", feats, act)[0], -0.3, y)), hp)
    dt = time.perf_counter() - t0
    worst = max(errs, key=errs.get)
    record(8, errs[worst] < 1e-5 and dt < 30, f"{len(errs)} checks, worst {worst} rel err {errs[worst]:.1e}, {dt:.1f}s")


def test_c09_mmd_surrogate():
    rng = np.random.default_rng(9)
    m, x = rng.normal(size=5), rng.normal(size=5)
    _, grad = ipm.mmd_mean_surrogate(m, x)
    h = 1e-6
    num = np.array([(ipm.mmd_mean_surrogate(m + h * e, x)[0] - ipm.mmd_mean_surrogate(m - h * e, x)[0]) / (2 * h) for e in np.eye(5)])
    fd = np.linalg.norm(num - grad) / np.linalg.norm(grad)
    # model N(theta, I), data N(mu, S): with the mean-embedding kernel MMD^2 = |theta - mu|^2
    theta, mu = np.array([0.3, -1.0, 2.0]), np.array([1.0, 0.5, -0.5])
    L = rng.normal(size=(3, 3))
    xs = mu + rng.normal(size=(100_000, 3)) @ L.T
    g = np.array([ipm.mmd_mean_surrogate(theta, xi)[1] for xi in xs[:1000]])
    assert np.allclose(g, 2 * theta - 2 * xs[:1000])
    g = 2 * theta - 2 * xs
    se = g.std(axis=0, ddof=1) / math.sqrt(len(g))
    z = np.abs(g.mean(axis=0) - 2 * (theta - mu)) / se
    record(9, fd < 1e-6 and np.all(z <= 3), f"FD rel err {fd:.1e}; Monte-Carlo z-scores {np.round(z, 2).tolist()}")


def test_c10_schedule_contract():
    accept = [validate_schedule((0.6, 0.8)).ok, validate_schedule((0.6, 0.7, 0.9)).ok]
    reject = [(0.5, 0.8), (0.4, 0.8), (0.6, 0.5), (0.8, 0.6), (0.6, 0.6), (0.6, 0.9, 0.7), (0.7, 0.6, 0.9), (0.6, 0.7, 1.2), (0.6, 0.5, 0.9)]
    rejected = [not validate_schedule(r).ok for r in reject]
    record(10, all(accept) and all(rejected), f"accepted {sum(accept)}/2, rejected {sum(rejected)}/{len(reject)}")


C11_CONFIG = dict(gamma=0.95, partition=(1, 0, 0, 1), iterations=1000, batch_size=32, reward_scale=0.001)


def test_c11_ais_beats_memoryless():
    t0 = time.perf_counter()
    env = make_env("toy")
    scores = {}
    for agent in ("ais-ac", "memoryless"):
        cfg = TrainConfig(agent=agent, **C11_CONFIG)
        scores[agent] = np.array([evaluate(train_loop(env, cfg, s).agent, env, 2000, 100, cfg.gamma, s) for s in range(10)])
    dt = time.perf_counter() - t0
    qa = np.percentile(scores["ais-ac"], [25, 50, 75])
    qm = np.percentile(scores["memoryless"], [25, 50, 75])
    ok = qa[1] > qm[1] and qa[0] > qm[2] and dt < 600
    record(11, ok, f"ais-ac median {qa[1]:.1f} IQR [{qa[0]:.1f}, {qa[2]:.1f}] vs memoryless median {qm[1]:.1f} IQR [{qm[0]:.1f}, {qm[2]:.1f}], {dt:.0f}s")


def test_c12_determinism(tmp_path):
    same = []
    for cmd in (["bounds", "--random", "20", "--seed", "7"], ["train", "--env", "toy", "--seeds", "3", "--iterations", "10", "--seed", "5"]):
        outs = []
        for rep in ("a", "b"):
            out = tmp_path / f"{cmd[0]}_{rep}"
            assert cli.main(cmd + ["--out", str(out)]) == 0
            outs.append({p.name: p.read_bytes() for p in sorted(out.glob("*.csv"))})
        same.append(outs[0] == outs[1] and len(outs[0]) > 0)
    record(12, all(same), f"bounds identical={same[0]}, train identical={same[1]}")


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q"]))
