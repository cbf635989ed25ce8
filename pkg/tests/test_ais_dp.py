import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from aislab import ipm
from aislab.ais import TabularAisGenerator, identity_generator, measure_eps_delta, pad_generator, quantizer_ais
from aislab.ais_dp import (
    BoundConfig,
    BoundReport,
    SLACK,
    bound_report,
    campaign_instance,
    counterexample,
    delta_gap,
    feature_closure,
    feature_lipschitz_constants,
    kappa,
    lipschitz_recursion,
    lipschitz_value_fixpoint,
    run_campaign,
    solve_ais_dp,
    span_bound_check,
)
from aislab.exceptions import BoundViolation, ClosureError
from aislab.mdp import TabularMdp, random_mdp, toy_mdp, value_iteration


def _scaled(mdp, c):
    return TabularMdp(mdp.transitions, c * mdp.rewards, mdp.discount)


# closure ---------------------------------------------------------------------------


def test_identity_closure_is_state_set():
    mdp = random_mdp(5, 2, 0)
    assert feature_closure(identity_generator(mdp), mdp).features == list(range(5))


def test_quantizer_closure_is_classes():
    mdp = toy_mdp()
    assert feature_closure(quantizer_ais(mdp, [1, 0, 0, 1]), mdp).features == [0, 1]


def test_closure_idempotent():
    mdp = random_mdp(4, 2, 1)
    gen = pad_generator(quantizer_ais(mdp, [0, 1, 1, 2]), 2)
    first = feature_closure(gen, mdp)
    # a fixpoint: updating any closure feature stays inside the closure
    assert set(np.unique(gen.update[first.features]).tolist()) <= set(first.features)
    assert feature_closure(gen, mdp).features == first.features == [0, 1, 2]


def test_closure_rejects_escaping_update():
    mdp = random_mdp(2, 1, 0)
    gen = identity_generator(mdp)
    bad = TabularAisGenerator.__new__(TabularAisGenerator)
    upd = gen.update.copy()
    upd[1, 0, 0] = 7
    for k, v in (("init_feature", gen.init_feature), ("update", upd), ("r_hat", gen.r_hat), ("p_hat", gen.p_hat)):
        object.__setattr__(bad, k, v)
    with pytest.raises(ClosureError):
        feature_closure(bad, mdp)


# dynamic program ----------------------------------------------------------------------


def test_identity_dp_matches_value_iteration():
    for seed in range(5):
        mdp = random_mdp(5, 3, seed)
        sol = solve_ais_dp(identity_generator(mdp), mdp)
        res = value_iteration(mdp, 1e-12)
        assert np.allclose(sol.v_hat, res.v_star, atol=1e-9)
        assert sol.greedy_actions.tolist() == res.pi_star.greedy_actions().tolist()


def test_single_feature_single_action():
    p = np.full((1, 3, 3), 1 / 3)
    mdp = TabularMdp(p, np.array([[1.0], [2.0], [3.0]]), 0.8)
    sol = solve_ais_dp(quantizer_ais(mdp, [0, 0, 0]), mdp)
    assert sol.v_hat[0] == pytest.approx(2.0 / 0.2, abs=1e-10)


def test_dp_residual_within_tol():
    for seed in range(10):
        mdp, part = campaign_instance(seed)
        sol = solve_ais_dp(quantizer_ais(mdp, part), mdp, tol=1e-10)
        assert sol.residual <= 1e-10
        assert np.allclose(sol.v_hat, sol.q_hat.max(axis=1))
        assert np.all(sol.q_hat[np.arange(len(sol.v_hat)), sol.greedy_actions] == sol.q_hat.max(axis=1))


# optimality gap ----------------------------------------------------------------------


def test_identity_gap_zero():
    mdp = random_mdp(6, 3, 4)
    gen = identity_generator(mdp)
    assert delta_gap(mdp, gen, solve_ais_dp(gen, mdp)) <= 1e-9


def test_toy_quantizer_gap_positive():
    mdp = toy_mdp()
    gen = quantizer_ais(mdp, [1, 0, 0, 1])
    assert delta_gap(mdp, gen, solve_ais_dp(gen, mdp), starts=[0, 1, 2]) > 1.0


def test_gap_invariant_to_padding():
    mdp = toy_mdp()
    gen = quantizer_ais(mdp, [1, 0, 0, 1])
    padded = pad_generator(gen, 4)
    a = delta_gap(mdp, gen, solve_ais_dp(gen, mdp))
    b = delta_gap(mdp, padded, solve_ais_dp(padded, mdp))
    assert a == b


# kappa ----------------------------------------------------------------------------------


def test_kappa_zero_for_constant_values():
    p = np.full((2, 3, 3), 1 / 3)
    mdp = TabularMdp(p, np.ones((3, 2)), 0.9)
    gen = quantizer_ais(mdp, [0, 1, 2])
    sol = solve_ais_dp(gen, mdp)
    assert kappa(gen, sol, "tv") <= 1e-12 and kappa(gen, sol, "wasserstein") <= 1e-12


def test_kappa_wasserstein_twice_tv_under_discrete_metric():
    for seed in range(10):
        mdp, part = campaign_instance(seed)
        gen = quantizer_ais(mdp, part)
        sol = solve_ais_dp(gen, mdp)
        assert kappa(gen, sol, "wasserstein") == pytest.approx(2 * kappa(gen, sol, "tv"), rel=1e-12, abs=1e-15)


def test_kappa_tv_below_half_span():
    for seed in range(20):
        mdp, part = campaign_instance(seed)
        gen = quantizer_ais(mdp, part)
        sol = solve_ais_dp(gen, mdp)
        assert kappa(gen, sol, "tv") <= 0.5 * ipm.span(sol.v_hat) + 1e-12


def test_kappa_mmd_bounds_integral_gap():
    # the RKHS norm controls |E_p g - E_q g| by kappa * MMD for every continuation g
    mdp = toy_mdp()
    gen = quantizer_ais(mdp, [1, 0, 0, 1])
    sol = solve_ais_dp(gen, mdp)
    k = kappa(gen, sol, "mmd")
    kern = ipm.distance_kernel(1.0, anchor=0, metric=ipm.DISCRETE)
    rng = np.random.default_rng(0)
    for _ in range(100):
        p, q = rng.dirichlet(np.ones(4), 2)
        for z, a in itertools.product(range(2), range(3)):
            g = sol.v_hat[gen.update[z, :, a]]
            assert abs(g @ p - g @ q) <= k * ipm.mmd_closed(p, q, kern) + 1e-9


# Lipschitz machinery ---------------------------------------------------------------------


def test_fixpoint_examples():
    assert lipschitz_value_fixpoint(1.5, 0.0, 3.0, 0.9) == 1.5
    assert lipschitz_value_fixpoint(1.0, 1.0, 1.0, 0.5) == 2.0
    assert math.isinf(lipschitz_value_fixpoint(1.0, 2.0, 1.0, 0.5))


def test_recursion_converges_to_fixpoint():
    it = lipschitz_recursion(0.7, 0.9, 1.0, 0.8)
    vals = [next(it) for _ in range(400)]
    assert vals[0] == 0.7
    assert all(b >= a for a, b in zip(vals, vals[1:]))
    assert vals[-1] == pytest.approx(lipschitz_value_fixpoint(0.7, 0.9, 1.0, 0.8), rel=1e-12)


def test_measured_lipschitz_below_fixpoint():
    for seed in range(100):
        mdp, part = campaign_instance(seed)
        gen = quantizer_ais(mdp, part)
        feats = feature_closure(gen, mdp).features
        if len(feats) < 2:
            continue
        c = feature_lipschitz_constants(gen, feats)
        bound = lipschitz_value_fixpoint(c["L_r"], c["L_P"], c["L_f"], mdp.discount)
        sol = solve_ais_dp(gen, mdp)
        assert ipm.lipschitz_fn(sol.v_hat[feats], ipm.DISCRETE, np.asarray(feats)) <= bound + SLACK


def test_span_lemma_constant_reward():
    p = np.full((2, 2, 2), 0.5)
    mdp = TabularMdp(p, np.full((2, 2), 4.0), 0.9)
    gen = identity_generator(mdp)
    span_v, bound = span_bound_check(solve_ais_dp(gen, mdp), gen, 0.9)
    assert span_v <= 1e-9 and bound == 0


def test_span_lemma_toy_identity():
    mdp = toy_mdp(100, 0.95)
    gen = identity_generator(mdp)
    span_v, bound = span_bound_check(solve_ais_dp(gen, mdp), gen, 0.95)
    assert span_v <= (1 + 100) / 0.05 and bound == pytest.approx((1 + 100) / 0.05)


def test_span_lemma_violation_raises():
    mdp = toy_mdp()
    gen = identity_generator(mdp)
    sol = solve_ais_dp(gen, mdp)
    fake = type(sol)(sol.q_hat, sol.v_hat * 1e3, sol.mu, sol.residual)
    with pytest.raises(BoundViolation):
        span_bound_check(fake, gen, 0.95)


# bound reports ------------------------------------------------------------------------------


@pytest.mark.parametrize("variant", ["tv", "wasserstein", "mmd"])
def test_identity_report_all_zero(variant):
    mdp = random_mdp(5, 2, 9)
    rep = bound_report(mdp, identity_generator(mdp), variant)
    assert rep.eps == 0 and rep.delta <= 1e-12 and rep.delta_gap <= 1e-9
    assert rep.thm1_rhs <= 1e-9 and rep.cor_rhs <= 1e-9 and not rep.violated


def test_toy_tv_corollary():
    mdp = toy_mdp()
    gen = quantizer_ais(mdp, [1, 0, 0, 1])
    rep = bound_report(mdp, gen, "tv")
    span_r = ipm.span(gen.r_hat)
    g = mdp.discount
    assert rep.cor_rhs == pytest.approx(2 * rep.eps / (1 - g) + g * rep.delta * span_r / (1 - g) ** 2)
    assert rep.delta_gap <= rep.cor_rhs


def test_wasserstein_corollary_omitted_when_update_uses_feature():
    mdp = random_mdp(2, 1, 3)
    upd = np.array([[[1], [1]], [[0], [0]]])
    gen = TabularAisGenerator(np.array([0, 1]), upd, mdp.rewards.copy(), np.transpose(mdp.transitions, (1, 0, 2)).copy())
    rep = bound_report(mdp, gen, "wasserstein")
    assert not rep.corollary_applies and math.isnan(rep.cor_rhs)
    assert any("depends on the current feature" in n for n in rep.notes)


def test_small_campaign_zero_violations():
    res = run_campaign(30, base_seed=100)
    assert len(res.rows) == 90 and res.n_violations == 0
    for rep in res.reports:
        assert rep.delta_gap <= rep.thm1_rhs + SLACK
        if rep.corollary_applies:
            assert rep.thm1_rhs <= rep.cor_rhs + SLACK


def test_campaign_csv_deterministic():
    a = run_campaign(5, base_seed=7).csv()
    b = run_campaign(5, base_seed=7).csv()
    assert a == b
    assert a.splitlines()[0] == ",".join(BoundReport.CSV_COLUMNS)


def test_forced_violation_emits_counterexample():
    mdp = toy_mdp()
    gen = quantizer_ais(mdp, [1, 0, 0, 1])
    rep = bound_report(mdp, gen, "tv")
    rep.thm1_rhs = -1.0
    doc = json.loads(counterexample(mdp, gen, rep))
    assert set(doc) == {"mdp", "generator", "report"}
    assert TabularMdp.from_json(json.dumps(doc["mdp"])).n_states == 4


def test_reward_scaling_invariance():
    mdp, part = campaign_instance(3)
    gen = quantizer_ais(mdp, part)
    c = 3.5
    mdp2 = _scaled(mdp, c)
    gen2 = quantizer_ais(mdp2, part)
    for variant in ("tv", "wasserstein", "mmd"):
        a = bound_report(mdp, gen, variant)
        b = bound_report(mdp2, gen2, variant)
        assert b.eps == pytest.approx(c * a.eps, rel=1e-9, abs=1e-12)
        assert b.delta_gap == pytest.approx(c * a.delta_gap, rel=1e-9, abs=1e-9)
        assert b.thm1_rhs == pytest.approx(c * a.thm1_rhs, rel=1e-9, abs=1e-9)
        assert b.cor_rhs == pytest.approx(c * a.cor_rhs, rel=1e-9, abs=1e-9)
    s1, s2 = solve_ais_dp(gen, mdp), solve_ais_dp(gen2, mdp2)
    assert np.allclose(s2.v_hat, c * s1.v_hat)
    assert np.array_equal(s1.greedy_actions, s2.greedy_actions)


def test_exact_information_state_has_zero_gap():
    # two copies of each state: a lossless but non-identity abstraction
    for seed in range(5):
        base = random_mdp(3, 2, seed)
        p = np.zeros((2, 6, 6))
        p[:, :3, :3] = base.transitions / 2
        p[:, :3, 3:] = base.transitions / 2
        p[:, 3:] = p[:, :3]
        mdp = TabularMdp(p, np.vstack([base.rewards, base.rewards]), base.discount)
        gen = quantizer_ais(mdp, [0, 1, 2, 0, 1, 2])
        ed = measure_eps_delta(mdp, gen, "tv")
        assert ed.eps <= 1e-12 and ed.delta <= 1e-12
        assert delta_gap(mdp, gen, solve_ais_dp(gen, mdp)) <= 1e-9


def test_refinement_can_increase_errors():
    # averaging models are not monotone under refinement: splitting {0,0,0,10,10,10}
    # into {0,0,0,10} and {10,10} raises the worst reward error from 5 to 7.5
    p = np.full((1, 6, 6), 1 / 6)
    mdp = TabularMdp(p, np.array([[0.0], [0.0], [0.0], [10.0], [10.0], [10.0]]), 0.9)
    coarse = measure_eps_delta(mdp, quantizer_ais(mdp, [0] * 6), "tv")
    fine = measure_eps_delta(mdp, quantizer_ais(mdp, [0, 0, 0, 0, 1, 1]), "tv")
    assert coarse.eps == 5.0 and fine.eps == 7.5


def test_full_refinement_reaches_zero():
    for seed in range(10):
        mdp, part = campaign_instance(seed)
        coarse = bound_report(mdp, quantizer_ais(mdp, part), "tv")
        fine = bound_report(mdp, quantizer_ais(mdp, range(mdp.n_states)), "tv")
        assert fine.eps <= coarse.eps and fine.delta <= coarse.delta + 1e-12 and fine.delta_gap <= coarse.delta_gap + 1e-9


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 100_000))
def test_theorem_bound_random(seed):
    mdp, part = campaign_instance(seed, max_states=5, max_actions=3)
    gen = quantizer_ais(mdp, part)
    for variant in ("tv", "wasserstein", "mmd"):
        rep = bound_report(mdp, gen, variant, BoundConfig(raise_on_violation=False))
        assert not rep.violated
