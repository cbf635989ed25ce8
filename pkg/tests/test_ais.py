import itertools
import types

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from aislab import nn
from aislab.ais import (
    AisConfig,
    NeuralAisGenerator,
    TabularAisGenerator,
    TabularLookup,
    ais_loss,
    ais_step,
    identity_generator,
    measure_eps_delta,
    measure_eps_delta_empirical,
    pad_generator,
    quantizer_ais,
    tabular_ais_loss,
)
from aislab.exceptions import ClosureError, InputError
from aislab.mdp import TabularMdp, random_mdp, sample_trajectory, StationaryPolicy, toy_mdp


def _batch(rng, n_states=4, n_actions=3, bsz=3, steps=3):
    return types.SimpleNamespace(
        states=rng.integers(0, n_states, (bsz, steps + 1)),
        actions=rng.integers(0, n_actions, (bsz, steps)),
        rewards=rng.normal(size=(bsz, steps)),
    )


def _mdp_batch(mdp, n, horizon, seed):
    rng = np.random.default_rng(seed)
    pol = StationaryPolicy.uniform(mdp.n_states, mdp.n_actions)
    trajs = [sample_trajectory(mdp, pol, horizon, rng) for _ in range(n)]
    return types.SimpleNamespace(
        states=np.array([t.states for t in trajs]),
        actions=np.array([t.actions for t in trajs]),
        rewards=np.array([t.rewards for t in trajs]),
    )


# tabular generators ----------------------------------------------------------


def test_identity_step_returns_next_state():
    gen = identity_generator(toy_mdp())
    for z, s, a in itertools.product(range(4), range(4), range(3)):
        assert ais_step(gen, z, s, a) == s


def test_step_outside_feature_set_raises():
    gen = identity_generator(toy_mdp())
    bad = TabularAisGenerator.__new__(TabularAisGenerator)
    upd = gen.update.copy()
    upd[0, 0, 0] = 9
    object.__setattr__(bad, "init_feature", gen.init_feature)
    object.__setattr__(bad, "update", upd)
    object.__setattr__(bad, "r_hat", gen.r_hat)
    object.__setattr__(bad, "p_hat", gen.p_hat)
    with pytest.raises(ClosureError):
        ais_step(bad, 0, 0, 0)


def test_tabular_updates_are_recursive():
    # equal (z, s', a) at the end of any two histories give the same next feature
    mdp = random_mdp(3, 2, 0)
    gen = quantizer_ais(mdp, [0, 1, 1])
    seen = {}
    for hist in itertools.product(range(3), range(2), range(3), range(2), range(3)):
        s0, a0, s1, a1, s2 = hist
        z1 = ais_step(gen, gen.init_feature[s0], s1, a0)
        z2 = ais_step(gen, z1, s2, a1)
        assert seen.setdefault((z1, s2, a1), z2) == z2


def test_identity_generator_has_zero_errors():
    for seed in range(5):
        mdp = random_mdp(4, 2, seed)
        for variant in ("tv", "wasserstein", "mmd"):
            ed = measure_eps_delta(mdp, identity_generator(mdp), variant)
            assert ed.eps == 0 and ed.delta <= 1e-12


def test_toy_two_class_eps():
    K = 100.0
    ed = measure_eps_delta(toy_mdp(K), quantizer_ais(toy_mdp(K), [0, 0, 1, 1]), "tv")
    assert ed.eps == pytest.approx(0.5 * (1 + K), abs=1e-12)


def test_wasserstein_delta_matches_tv_std():
    mdp = toy_mdp()
    gen = quantizer_ais(mdp, [1, 0, 0, 1])
    d_w = measure_eps_delta(mdp, gen, "wasserstein").delta
    d_tv = measure_eps_delta(mdp, gen, "tv").delta
    # the tv variant reports the L1 form, twice the classical distance
    assert d_w == pytest.approx(0.5 * d_tv, abs=1e-12)


def test_single_class_eps_half():
    p = np.full((1, 2, 2), 0.5)
    mdp = TabularMdp(p, np.array([[0.0], [1.0]]), 0.9)
    assert measure_eps_delta(mdp, quantizer_ais(mdp, [0, 0]), "tv").eps == 0.5


def test_identity_partition_zero_errors():
    mdp = random_mdp(5, 3, 2)
    ed = measure_eps_delta(mdp, quantizer_ais(mdp, range(5)), "mmd")
    assert ed.eps == 0 and ed.delta <= 1e-12


def test_quantizer_rows_are_convex_combinations():
    mdp = random_mdp(6, 2, 3)
    part = np.array([0, 1, 0, 2, 1, 0])
    gen = quantizer_ais(mdp, part, weights=np.arange(1.0, 7.0))
    for z in range(3):
        rows = mdp.transitions[:, part == z, :]
        assert np.all(gen.p_hat[z] >= rows.min(axis=1) - 1e-15)
        assert np.all(gen.p_hat[z] <= rows.max(axis=1) + 1e-15)


def test_quantizer_rejects_empty_class():
    with pytest.raises(InputError):
        quantizer_ais(random_mdp(3, 1, 0), [0, 2, 2])


def test_zero_errors_iff_partition_respects_equivalences():
    p = np.zeros((1, 3, 3))
    p[0, 0] = p[0, 1] = [0.2, 0.3, 0.5]
    p[0, 2] = [0.6, 0.2, 0.2]
    mdp = TabularMdp(p, np.array([[1.0], [1.0], [0.0]]), 0.9)
    good = measure_eps_delta(mdp, quantizer_ais(mdp, [0, 0, 1]), "tv")
    assert good.eps == 0 and good.delta <= 1e-15
    bad = measure_eps_delta(mdp, quantizer_ais(mdp, [0, 1, 1]), "tv")
    assert bad.eps > 0 and bad.delta > 0
    # same rewards but different rows: only delta is positive
    mdp2 = TabularMdp(p, np.ones((3, 1)), 0.9)
    mixed = measure_eps_delta(mdp2, quantizer_ais(mdp2, [0, 1, 1]), "tv")
    assert mixed.eps == 0 and mixed.delta > 0


def test_generator_json_round_trip():
    gen = quantizer_ais(toy_mdp(), [1, 0, 0, 1])
    back = TabularAisGenerator.from_json(gen.to_json())
    assert np.array_equal(back.update, gen.update) and np.array_equal(back.p_hat, gen.p_hat)


def test_padding_leaves_measurements_unchanged():
    mdp = toy_mdp()
    gen = quantizer_ais(mdp, [1, 0, 0, 1])
    a = measure_eps_delta(mdp, gen, "mmd")
    b = measure_eps_delta(mdp, pad_generator(gen, 3), "mmd")
    assert (a.eps, a.delta) == (b.eps, b.delta)


# tabular loss ----------------------------------------------------------------------


def test_perfect_generator_reward_loss_zero():
    mdp = toy_mdp()
    batch = _mdp_batch(mdp, 4, 6, 0)
    assert tabular_ais_loss(batch, identity_generator(mdp), AisConfig(lam=1.0)) == 0.0


def test_mmd_loss_minimum_on_deterministic_mdp():
    p = np.zeros((1, 3, 3))
    p[0, [0, 1, 2], [1, 2, 0]] = 1.0
    mdp = TabularMdp(p, np.zeros((3, 1)), 0.9)
    batch = _mdp_batch(mdp, 3, 5, 1)
    # model mean equals the one-hot next state at every step
    assert tabular_ais_loss(batch, identity_generator(mdp), AisConfig(lam=0.0)) == -1.0


# neural generator ------------------------------------------------------------------


def test_zero_params_neural_step_halves_feature():
    gen = NeuralAisGenerator.create(np.random.default_rng(0), 4, 3, 5).zero_params()
    z = np.linspace(-1, 1, 5)
    assert np.allclose(ais_step(gen, z, 2, 1), 0.5 * z)


def test_neural_updates_are_recursive():
    # the feature of an extended history depends on the past only through the prefix feature
    rng = np.random.default_rng(1)
    gen = NeuralAisGenerator.create(rng, 4, 3, 6)
    for _ in range(50):
        T = int(rng.integers(1, 6))
        states, actions = rng.integers(0, 4, (1, T + 1)), rng.integers(0, 3, (1, T))
        full = gen.features_np(states, actions)
        assert np.allclose(ais_step(gen, full[0, -2], states[0, -1], actions[0, -1]), full[0, -1], atol=1e-15)


@pytest.mark.parametrize("variant", ["mmd", "kl"])
def test_ais_loss_gradient_tabular(variant):
    rng = np.random.default_rng(2)
    gen = NeuralAisGenerator.create(rng, 4, 3, 4, variant=variant, head_hidden=6)
    batch = _batch(rng)
    cfg = AisConfig(ipm_variant=variant)
    assert nn.grad_rel_error(lambda L: ais_loss(batch, gen, cfg, L).total, gen.params) < 1e-5


def test_ais_loss_gradient_continuous_kl():
    rng = np.random.default_rng(3)
    gen = NeuralAisGenerator.create(rng, 1, 1, 4, tabular=False, variant="kl", head_hidden=6)
    batch = types.SimpleNamespace(states=rng.normal(size=(2, 4)), actions=rng.uniform(-1, 1, (2, 3)), rewards=rng.normal(size=(2, 3)))
    cfg = AisConfig(ipm_variant="kl")
    assert nn.grad_rel_error(lambda L: ais_loss(batch, gen, cfg, L).total, gen.params) < 1e-5


def test_ais_loss_gradient_continuous_mmd():
    rng = np.random.default_rng(4)
    gen = NeuralAisGenerator.create(rng, 1, 1, 4, tabular=False, head_hidden=6)
    batch = types.SimpleNamespace(states=rng.normal(size=(2, 4)), actions=rng.uniform(-1, 1, (2, 3)), rewards=rng.normal(size=(2, 3)))
    assert nn.grad_rel_error(lambda L: ais_loss(batch, gen, AisConfig(), L).total, gen.params) < 1e-5


def test_lambda_one_ignores_transition_head():
    rng = np.random.default_rng(5)
    gen = NeuralAisGenerator.create(rng, 4, 3, 4)
    batch = _batch(rng)
    _, g = nn.value_and_grad(lambda L: ais_loss(batch, gen, AisConfig(lam=1.0), L).total, gen.params)
    assert all(np.all(g[k] == 0) for k in gen.transition_keys)
    assert any(np.any(g[k] != 0) for k in g if k.startswith("reward."))


def test_mmd_term_gradient_is_two_m_minus_two_target():
    rng = np.random.default_rng(6)
    m = nn.Tensor(rng.normal(size=(5, 4)), requires_grad=True)
    target = np.eye(4)[rng.integers(0, 4, 5)]
    loss = nn.tsum((m - 2.0 * target) * m)
    g = nn.backward(loss, [m])[id(m)]
    assert np.allclose(g, 2 * m.value - 2 * target, atol=1e-14)


def test_kl_log_clip_counter():
    rng = np.random.default_rng(7)
    gen = NeuralAisGenerator.create(rng, 4, 3, 4, variant="kl")
    gen.params["trans.1.b"] = np.array([0.0, 0.0, 0.0, 1e4])
    batch = _batch(rng)
    batch.states[:, 1:] = 0
    ais_loss(batch, gen, AisConfig(ipm_variant="kl"))
    assert gen.counters["log_clipped"] == 9


def test_tv_variant_is_measurement_only():
    rng = np.random.default_rng(8)
    gen = NeuralAisGenerator.create(rng, 4, 3, 4)
    with pytest.raises(InputError):
        ais_loss(_batch(rng), gen, AisConfig(ipm_variant="tv"))


def test_config_rejects_bad_lambda():
    with pytest.raises(InputError):
        AisConfig(lam=1.5)


# empirical measurement ------------------------------------------------------------


def test_perfect_lookup_has_zero_eps_hat():
    mdp = toy_mdp()
    res = measure_eps_delta_empirical(mdp, TabularLookup(identity_generator(mdp)), 50)
    assert res.eps_hat == 0.0


def test_eps_hat_monotone_in_rollouts():
    mdp = toy_mdp()
    gen = TabularLookup(quantizer_ais(mdp, [1, 0, 0, 1]))
    vals = [measure_eps_delta_empirical(mdp, gen, n, seed=3).eps_hat for n in (1, 2, 5, 20, 100)]
    assert all(b >= a for a, b in zip(vals, vals[1:]))


def test_delta_hat_small_on_exact_model():
    # about 1e4 transitions in every (state, action) bin
    mdp = toy_mdp()
    res = measure_eps_delta_empirical(mdp, TabularLookup(identity_generator(mdp)), 10_000, horizon=12, seed=0)
    assert res.n_bins == 12 and res.n_bins_excluded == 0
    assert res.delta_hat < 0.05


def test_sparse_bins_are_excluded():
    mdp = toy_mdp()
    res = measure_eps_delta_empirical(mdp, TabularLookup(identity_generator(mdp)), 1, horizon=3)
    assert res.n_bins + res.n_bins_excluded == 12 and res.n_bins_excluded >= 9


def test_empirical_requires_rollouts():
    mdp = toy_mdp()
    with pytest.raises(InputError):
        measure_eps_delta_empirical(mdp, TabularLookup(identity_generator(mdp)), 0)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["tv", "wasserstein", "mmd"]))
def test_random_partition_errors_nonnegative(seed, variant):
    mdp = random_mdp(5, 2, seed)
    part = np.random.default_rng(seed).integers(0, 2, 5)
    part[:2] = [0, 1]
    ed = measure_eps_delta(mdp, quantizer_ais(mdp, part), variant)
    assert ed.eps >= 0 and ed.delta >= 0


@pytest.mark.parametrize("kernel", ["energy", "gaussian", "laplace"])
@pytest.mark.parametrize("tabular", [True, False])
def test_kernel_loss_gradients(kernel, tabular):
    rng = np.random.default_rng(9)
    if tabular:
        gen = NeuralAisGenerator.create(rng, 4, 3, 4, head_hidden=6, kernel=kernel)
        batch = _batch(rng)
    else:
        gen = NeuralAisGenerator.create(rng, 2, 1, 4, tabular=False, head_hidden=6, kernel=kernel)
        batch = types.SimpleNamespace(states=rng.normal(size=(2, 4, 2)), actions=rng.uniform(-1, 1, (2, 3)), rewards=rng.normal(size=(2, 3)))
    cfg = AisConfig(kernel=kernel, kernel_param=0.7)
    assert nn.grad_rel_error(lambda L: ais_loss(batch, gen, cfg, L).total, gen.params) < 1e-5


@pytest.mark.parametrize("kernel", ["energy", "gaussian", "laplace"])
def test_tabular_kernel_loss_is_exact_mmd(kernel):
    from aislab import ipm
    from aislab.ais import _training_kernel

    rng = np.random.default_rng(10)
    gen = NeuralAisGenerator.create(rng, 4, 3, 4, kernel=kernel)
    batch = _batch(rng, bsz=1, steps=1)
    cfg = AisConfig(lam=0.0, kernel=kernel)
    loss = float(ais_loss(batch, gen, cfg).total.value)
    z = gen.features_np(batch.states[:, :1], batch.actions[:, :0])[:, 0]
    p = gen.next_state_probs(z, batch.actions[:, 0])[0]
    s2 = int(batch.states[0, 1])
    kern = _training_kernel(cfg)
    pts = np.eye(4)
    exact = ipm.mmd_squared(ipm.DiscreteDist(pts, p), ipm.DiscreteDist(pts[[s2]], np.ones(1)), kern)
    assert loss + kern(pts[s2], pts[s2]) == pytest.approx(exact, abs=1e-12)


def test_unknown_kernel_rejected():
    with pytest.raises(InputError):
        AisConfig(kernel="cosine")
