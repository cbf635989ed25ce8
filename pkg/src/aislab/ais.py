"""AIS generators (tabular and GRU-based), their training loss, and measurement of
the reward error ``eps`` and transition error ``delta``."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Dict, Optional, Sequence

import numpy as np

from . import ipm
from . import nn
from .exceptions import ClosureError, InputError
from .mdp import TabularMdp, product_chain_reachable

LOG_FLOOR = -30.0
KERNELS = ("mean", "energy", "gaussian", "laplace")
IPM_ALIASES = {"tv": "tv", "w": "wasserstein", "wasserstein": "wasserstein", "mmd": "mmd"}


# ---------------------------------------------------------------------------
# tabular generators


@dataclass(frozen=True, eq=False)
class TabularAisGenerator:
    """Finite feature set ``0..n_features-1`` with update table ``update[z, s_next, a]``,
    reward table ``r_hat[z, a]`` and next-state model ``p_hat[z, a, s]``."""

    init_feature: np.ndarray
    update: np.ndarray
    r_hat: np.ndarray
    p_hat: np.ndarray

    def __post_init__(self):
        init = np.asarray(self.init_feature, dtype=int)
        upd = np.asarray(self.update, dtype=int)
        r_hat = np.asarray(self.r_hat, dtype=np.float64)
        p_hat = np.asarray(self.p_hat, dtype=np.float64)
        n_features = r_hat.shape[0]
        if upd.ndim != 3 or upd.shape[0] != n_features:
            raise InputError("update must have shape (features, states, actions)")
        if p_hat.shape != (n_features, upd.shape[2], upd.shape[1]):
            raise InputError("p_hat must have shape (features, actions, states)")
        if np.any(p_hat < 0) or np.any(np.abs(p_hat.sum(axis=2) - 1.0) > 1e-12):
            raise InputError("p_hat rows must be distributions")
        if np.any(init < 0) or np.any(init >= n_features):
            raise ClosureError("initial feature outside the feature set")
        for arr in (init, upd, r_hat, p_hat):
            arr.setflags(write=False)
        object.__setattr__(self, "init_feature", init)
        object.__setattr__(self, "update", upd)
        object.__setattr__(self, "r_hat", r_hat)
        object.__setattr__(self, "p_hat", p_hat)

    @property
    def n_features(self) -> int:
        return self.r_hat.shape[0]

    @property
    def n_states(self) -> int:
        return self.update.shape[1]

    @property
    def n_actions(self) -> int:
        return self.update.shape[2]

    def next_feature(self, z: int, s_next: int, a: int) -> int:
        z2 = int(self.update[z, s_next, a])
        if not 0 <= z2 < self.n_features:
            raise ClosureError(f"update({z}, {s_next}, {a}) = {z2} is outside the feature set")
        return z2

    def is_closed(self) -> bool:
        return bool(np.all((self.update >= 0) & (self.update < self.n_features)))

    def to_json(self) -> str:
        return json.dumps(
            {
                "feature_set": list(range(self.n_features)),
                "init_feature": self.init_feature.tolist(),
                "update": self.update.tolist(),
                "r_hat": self.r_hat.tolist(),
                "p_hat": self.p_hat.tolist(),
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "TabularAisGenerator":
        doc = json.loads(text)
        return cls(np.array(doc["init_feature"]), np.array(doc["update"]), np.array(doc["r_hat"]), np.array(doc["p_hat"]))


def identity_generator(mdp: TabularMdp) -> TabularAisGenerator:
    n, m = mdp.n_states, mdp.n_actions
    update = np.broadcast_to(np.arange(n)[None, :, None], (n, n, m)).copy()
    return TabularAisGenerator(np.arange(n), update, mdp.rewards.copy(), np.transpose(mdp.transitions, (1, 0, 2)).copy())


def quantizer_ais(mdp: TabularMdp, partition: Sequence[int], weights: Optional[Sequence[float]] = None) -> TabularAisGenerator:
    """Aggregate states into classes; reward and transition models are weighted class averages."""
    part = np.asarray(partition, dtype=int)
    if part.shape != (mdp.n_states,) or np.any(part < 0):
        raise InputError("partition must assign a feature id to every state")
    n_features = int(part.max()) + 1
    w = np.ones(mdp.n_states) if weights is None else np.asarray(weights, dtype=np.float64)
    r_hat = np.zeros((n_features, mdp.n_actions))
    p_hat = np.zeros((n_features, mdp.n_actions, mdp.n_states))
    for z in range(n_features):
        members = np.flatnonzero(part == z)
        if len(members) == 0:
            raise InputError(f"feature class {z} is empty")
        wz = w[members] / w[members].sum()
        r_hat[z] = wz @ mdp.rewards[members]
        p_hat[z] = np.einsum("k,aks->as", wz, mdp.transitions[:, members, :])
    p_hat /= p_hat.sum(axis=2, keepdims=True)
    update = np.broadcast_to(part[None, :, None], (n_features, mdp.n_states, mdp.n_actions)).copy()
    return TabularAisGenerator(part.copy(), update, r_hat, p_hat)


def pad_generator(gen: TabularAisGenerator, extra: int) -> TabularAisGenerator:
    """Append ``extra`` features that no start state or update ever produces."""
    n, s, a = gen.n_features, gen.n_states, gen.n_actions
    upd = np.concatenate([gen.update, np.zeros((extra, s, a), dtype=int)], axis=0)
    r_hat = np.concatenate([gen.r_hat, np.zeros((extra, a))], axis=0)
    p_hat = np.concatenate([gen.p_hat, np.full((extra, a, s), 1.0 / s)], axis=0)
    return TabularAisGenerator(gen.init_feature, upd, r_hat, p_hat)


# ---------------------------------------------------------------------------
# config and neural generator


@dataclass
class AisConfig:
    lam: float = 0.3
    ipm_variant: str = "mmd"  # mmd | kl | tv (tv: measurement only)
    feature_dim: int = 8
    rollout_length: int = 50
    kernel: str = "mean"  # mean | energy | gaussian | laplace (mmd variant only)
    kernel_param: float = 1.0
    n_model_samples: int = 8

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise InputError("lambda must lie in [0, 1]")
        if self.ipm_variant not in ("mmd", "kl", "tv"):
            raise InputError(f"unknown ipm variant {self.ipm_variant!r}")
        if self.kernel not in KERNELS:
            raise InputError(f"unknown kernel {self.kernel!r}; expected one of {KERNELS}")
        if self.kernel_param <= 0:
            raise InputError("kernel_param must be positive")


@dataclass
class NeuralAisGenerator:
    """GRU compressor with MLP reward and transition heads.

    Tabular environments encode a state as a one-hot vector of length ``n_states``;
    continuous ones pass the raw state vector. Actions are one-hot (discrete) or raw.
    """

    params: nn.ParamSet
    state_dim: int
    action_dim: int
    hidden_dim: int
    tabular: bool = True
    variant: str = "mmd"
    head_hidden: int = 32
    counters: Dict[str, int] = field(default_factory=lambda: {"log_clipped": 0})
    kernel: str = "mean"

    @classmethod
    def create(cls, rng, state_dim, action_dim, hidden_dim=8, tabular=True, variant="mmd", head_hidden=32, kernel="mean"):
        p = {}
        p.update(nn.init_gru(rng, state_dim + action_dim, hidden_dim, "gru"))
        p.update(nn.init_mlp(rng, [hidden_dim + action_dim, head_hidden, 1], "reward"))
        p.update(nn.init_mlp(rng, [hidden_dim + action_dim, head_hidden, state_dim], "trans"))
        return cls(nn.ParamSet(p), state_dim, action_dim, hidden_dim, tabular, variant, head_hidden, kernel=kernel)

    def zero_params(self) -> "NeuralAisGenerator":
        return self.with_params(nn.ParamSet({k: np.zeros_like(v) for k, v in self.params.items()}))

    def with_params(self, params: nn.ParamSet) -> "NeuralAisGenerator":
        return replace(self, params=params)

    @property
    def categorical(self) -> bool:
        """Whether the transition head outputs logits of a categorical next-state model."""
        return self.tabular and (self.variant == "kl" or self.kernel != "mean")

    @property
    def transition_keys(self):
        return [k for k in self.params.keys() if k.startswith("trans.")]

    def encode_state(self, states) -> np.ndarray:
        if self.tabular:
            return nn.one_hot(states, self.state_dim)
        s = np.asarray(states, dtype=np.float64)
        return s.reshape(s.shape[:-1] + (self.state_dim,)) if s.shape[-1:] == (self.state_dim,) else s[..., None]

    def encode_action(self, actions) -> np.ndarray:
        if actions is None:
            return None
        if self.tabular or np.asarray(actions).dtype.kind in "iu":
            return nn.one_hot(actions, self.action_dim)
        a = np.asarray(actions, dtype=np.float64)
        return a if a.shape[-1:] == (self.action_dim,) else a[..., None]

    def step_input(self, s_next, a_prev) -> np.ndarray:
        xs = self.encode_state(s_next)
        xa = np.zeros(xs.shape[:-1] + (self.action_dim,)) if a_prev is None else self.encode_action(a_prev)
        return np.concatenate([xs, xa], axis=-1)

    def initial(self, batch: int) -> np.ndarray:
        return np.zeros((batch, self.hidden_dim))

    def step_np(self, z, s_next, a_prev) -> np.ndarray:
        return nn.gru_step_np(self.params.arrays, z, self.step_input(s_next, a_prev))

    def features_np(self, states, actions) -> np.ndarray:
        """Features for every time step: ``z_t`` summarises ``s_0..s_t`` and ``a_0..a_{t-1}``.

        ``states`` is (B, T+1[, d]) and ``actions`` (B, T[, d]); returns (B, T+1, H)."""
        states = np.asarray(states)
        bsz, steps = states.shape[0], states.shape[1]
        z = self.initial(bsz)
        out = np.zeros((bsz, steps, self.hidden_dim))
        for t in range(steps):
            z = self.step_np(z, states[:, t], None if t == 0 else np.asarray(actions)[:, t - 1])
            out[:, t] = z
        return out

    # model heads on raw arrays -----------------------------------------
    def reward_np(self, z, a) -> np.ndarray:
        leaves = {k: nn.Tensor(v) for k, v in self.params.items()}
        x = np.concatenate([z, self.encode_action(a)], axis=-1)
        return nn.mlp(leaves, "reward", x, 2).value[..., 0]

    def transition_np(self, z, a) -> np.ndarray:
        leaves = {k: nn.Tensor(v) for k, v in self.params.items()}
        x = np.concatenate([z, self.encode_action(a)], axis=-1)
        out = nn.mlp(leaves, "trans", x, 2)
        if self.categorical:
            return np.exp(nn.log_softmax(out).value)
        return out.value

    def next_state_probs(self, z, a) -> np.ndarray:
        """Categorical next-state model for tabular environments. The mean head's
        output is projected onto the simplex by clipping and renormalising."""
        out = self.transition_np(z, a)
        if self.categorical:
            return out
        out = np.clip(out, 0.0, None)
        tot = out.sum(axis=-1, keepdims=True)
        return np.where(tot > 0, out / np.where(tot > 0, tot, 1.0), 1.0 / out.shape[-1])


def ais_step(gen, z, s_next, a):
    """One recursive update ``z' = f(z, s_next, a)``."""
    if isinstance(gen, TabularAisGenerator):
        return gen.next_feature(int(z), int(s_next), int(a))
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    return gen.step_np(z, np.atleast_1d(s_next), None if a is None else np.atleast_1d(a))[0]


@dataclass
class AisLossParts:
    total: nn.Tensor
    reward: nn.Tensor
    transition: nn.Tensor
    features: list  # per-step feature tensors z_0..z_T


def unroll(leaves, gen: NeuralAisGenerator, states, actions) -> list:
    states = np.asarray(states)
    bsz = states.shape[0]
    z = nn.Tensor(np.zeros((bsz, gen.hidden_dim)))
    feats = []
    for t in range(states.shape[1]):
        x = gen.step_input(states[:, t], None if t == 0 else np.asarray(actions)[:, t - 1])
        z = nn.gru_step(leaves, z, x)
        feats.append(z)
    return feats


def ais_loss(batch, gen: NeuralAisGenerator, config: AisConfig, leaves=None) -> AisLossParts:
    """``mean_t [ lam (r_hat - r)^2 + (1 - lam) L_P ]`` over a batch of equal-length episodes.

    ``batch`` provides ``states`` (B, T+1[, d]), ``actions`` (B, T[, d]) and ``rewards`` (B, T).
    ``L_P`` is ``(m - 2 s')^T m`` for the mmd variant and ``-log P(s' | z, a)`` for kl.
    """
    leaves = gen.params.leaves() if leaves is None else leaves
    states = np.asarray(batch.states)
    actions = np.asarray(batch.actions)
    rewards = np.asarray(batch.rewards, dtype=np.float64)
    steps = actions.shape[1]
    feats = unroll(leaves, gen, states[:, :steps], actions)
    bsz = states.shape[0]
    n = bsz * steps
    # heads see every (z_t, a_t) at once, batch-major like reshape(B * T)
    z = nn.reshape(nn.concat(feats, axis=-1), (n, gen.hidden_dim))
    xa = gen.encode_action(actions.reshape((n,) + actions.shape[2:]))
    inp = nn.concat([z, xa])
    err = nn.mlp(leaves, "reward", inp, 2)[:, 0] - rewards.reshape(n)
    reward_loss = nn.tsum(err * err) * (1.0 / n)
    out = nn.mlp(leaves, "trans", inp, 2)
    target = gen.encode_state(states[:, 1 : steps + 1].reshape((n,) + states.shape[2:]))
    if config.ipm_variant == "mmd" and config.kernel == "mean":
        trans_sum = nn.tsum((out - 2.0 * target) * out)
    elif config.ipm_variant == "mmd":
        trans_sum = _kernel_mmd_sum(out, target, gen, config)
    elif config.ipm_variant == "kl":
        if gen.tabular:
            picked = nn.tsum(nn.log_softmax(out) * target, axis=-1)
        else:
            picked = nn.gaussian_log_prob(out, 0.0, target)
        low = picked.value < LOG_FLOOR
        gen.counters["log_clipped"] += int(low.sum())
        picked = nn.clip(picked, LOG_FLOOR, math.inf)
        trans_sum = -nn.tsum(picked)
    else:
        raise InputError("the tv variant is for measurement only")
    trans_loss = trans_sum * (1.0 / n)
    total = reward_loss * config.lam + trans_loss * (1.0 - config.lam)
    return AisLossParts(total, reward_loss, trans_loss, feats)


def tabular_ais_loss(batch, gen: TabularAisGenerator, config: AisConfig) -> float:
    """The same per-step loss as :func:`ais_loss`, evaluated for a tabular generator.

    The mmd transition term uses the model's mean embedding ``m = p_hat(. | z, a)``
    of one-hot next states."""
    states = np.asarray(batch.states)
    actions = np.asarray(batch.actions)
    rewards = np.asarray(batch.rewards, dtype=np.float64)
    steps = actions.shape[1]
    z = np.zeros(actions.shape, dtype=int)
    z[:, 0] = gen.init_feature[states[:, 0]]
    for t in range(1, steps):
        z[:, t] = gen.update[z[:, t - 1], states[:, t], actions[:, t - 1]]
    s_next = states[:, 1 : steps + 1]
    reward_loss = np.mean((gen.r_hat[z, actions] - rewards) ** 2)
    m = gen.p_hat[z, actions]
    if config.ipm_variant == "mmd":
        target = np.eye(gen.n_states)[s_next]
        trans_loss = np.mean(np.sum((m - 2.0 * target) * m, axis=-1))
    elif config.ipm_variant == "kl":
        picked = np.take_along_axis(m, s_next[..., None], axis=-1)[..., 0]
        trans_loss = -np.mean(np.maximum(np.log(np.maximum(picked, 1e-300)), LOG_FLOOR))
    else:
        raise InputError("the tv variant is for measurement only")
    return float(config.lam * reward_loss + (1.0 - config.lam) * trans_loss)


def _training_kernel(config: AisConfig) -> ipm.KernelSpec:
    if config.kernel == "energy":
        return ipm.energy_kernel(1.0)
    return ipm.KernelSpec(config.kernel, config.kernel_param)


def _kernel_mmd_sum(out: nn.Tensor, target: np.ndarray, gen: NeuralAisGenerator, config: AisConfig) -> nn.Tensor:
    """Model-dependent part of the squared MMD, summed over steps.

    Tabular: exact ``p^T K p - 2 (K p)[s']`` for the softmax model ``p`` with the Gram
    matrix of one-hot state embeddings. Continuous: the cross term of a Gaussian model
    centred at the head output, estimated with fixed reparameterised draws (the
    within-model term does not depend on the mean for translation-invariant kernels)."""
    kern = _training_kernel(config)
    if gen.tabular:
        gram = kern.gram(np.eye(gen.state_dim))
        probs = nn.softmax(out)
        kp = nn.matmul(probs, gram)
        return nn.tsum(kp * probs) - 2.0 * nn.tsum(kp * target)
    noise = np.random.default_rng(0).standard_normal((config.n_model_samples, gen.state_dim))
    total = None
    for eps in noise:
        diff = out + (eps - target)
        dist = nn.power(nn.tsum(diff * diff, axis=-1) + 1e-12, 0.5)
        if config.kernel == "energy":
            term = dist
        elif config.kernel == "gaussian":
            term = nn.exp(dist * dist * (-0.5 / config.kernel_param**2)) * -2.0
        else:
            term = nn.exp(dist * (-1.0 / config.kernel_param)) * -2.0
        total = nn.tsum(term) if total is None else total + nn.tsum(term)
    return total * (1.0 / config.n_model_samples)


# ---------------------------------------------------------------------------
# exact measurement on tabular instances


def default_kernel() -> ipm.KernelSpec:
    return ipm.distance_kernel(1.0, anchor=0, metric=ipm.DISCRETE)


def ipm_distance(variant: str, p, q, state_metric=ipm.DISCRETE, kernel=None) -> float:
    variant = IPM_ALIASES.get(variant, variant)
    if variant == "tv":
        return ipm.tv_ipm(p, q)
    if variant == "wasserstein":
        return ipm.wasserstein_exact(p, q, state_metric)
    if variant == "mmd":
        return ipm.mmd_closed(p, q, kernel or default_kernel())
    raise InputError(f"unknown IPM {variant!r}")


@dataclass(frozen=True)
class EpsDelta:
    eps: float
    delta: float
    n_pairs: int

    def __iter__(self):
        return iter((self.eps, self.delta))


def measure_eps_delta(mdp: TabularMdp, gen: TabularAisGenerator, ipm_variant: str, state_metric=ipm.DISCRETE, kernel=None, starts=None) -> EpsDelta:
    """Worst reward and transition errors over every (state, feature) pair reachable
    under some action sequence, and every action there."""
    pairs = product_chain_reachable(mdp, gen, None, starts)
    if not pairs:
        raise InputError("empty reachable set")
    eps = 0.0
    delta = 0.0
    for s, z in pairs:
        eps = max(eps, float(np.max(np.abs(mdp.rewards[s] - gen.r_hat[z]))))
        for a in range(mdp.n_actions):
            delta = max(delta, ipm_distance(ipm_variant, mdp.transitions[a, s], gen.p_hat[z, a], state_metric, kernel))
    return EpsDelta(eps, delta, len(pairs))


# ---------------------------------------------------------------------------
# empirical measurement for learned generators


class TabularLookup:
    """Presents a tabular generator through the array interface of a learned one."""

    tabular = True

    def __init__(self, gen: TabularAisGenerator):
        self.gen = gen

    def features_np(self, states, actions) -> np.ndarray:
        states = np.asarray(states)
        out = np.zeros(states.shape, dtype=int)
        out[:, 0] = self.gen.init_feature[states[:, 0]]
        for t in range(1, states.shape[1]):
            out[:, t] = self.gen.update[out[:, t - 1], states[:, t], actions[:, t - 1]]
        return out

    def reward_np(self, z, a) -> np.ndarray:
        return self.gen.r_hat[z, a]

    def next_state_probs(self, z, a) -> np.ndarray:
        return self.gen.p_hat[z, a]


@dataclass(frozen=True)
class EmpiricalEpsDelta:
    eps_hat: float
    delta_hat: float
    n_transitions: int
    n_bins: int
    n_bins_excluded: int


def _rollouts(mdp: TabularMdp, policy_probs: np.ndarray, n: int, horizon: int, seed: int):
    """Rollout ``i`` draws from its own stream ``(seed, i)`` so prefixes are shared across ``n``."""
    states = np.zeros((n, horizon + 1), dtype=int)
    actions = np.zeros((n, horizon), dtype=int)
    pcum = np.cumsum(policy_probs, axis=1)
    tcum = np.cumsum(mdp.transitions, axis=2)
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        u = rng.random(2 * horizon + 1)
        s = min(int(u[0] * mdp.n_states), mdp.n_states - 1)
        states[i, 0] = s
        for t in range(horizon):
            a = min(int(np.searchsorted(pcum[s], u[1 + 2 * t], side="right")), mdp.n_actions - 1)
            s = min(int(np.searchsorted(tcum[a, s], u[2 + 2 * t], side="right")), mdp.n_states - 1)
            actions[i, t] = a
            states[i, t + 1] = s
    return states, actions


def measure_eps_delta_empirical(
    mdp: TabularMdp,
    gen,
    n_rollouts: int,
    ipm_variant: str = "mmd",
    horizon: int = 10,
    seed: int = 0,
    policy_probs: Optional[np.ndarray] = None,
    kernel: Optional[ipm.KernelSpec] = None,
) -> EmpiricalEpsDelta:
    """Sampled estimates of eps and delta for a (learned) generator on a tabular MDP.

    ``eps_hat`` is the largest observed reward error. ``delta_hat`` bins transitions
    by (state, action), draws one model sample per observed transition from the
    generator's next-state model at the visited feature, and takes the largest
    square-rooted (clamped) U-statistic between observed and model samples.
    """
    if n_rollouts < 1:
        raise InputError("n_rollouts must be >= 1")
    if IPM_ALIASES.get(ipm_variant, ipm_variant) != "mmd":
        raise InputError("empirical delta is estimated with the MMD U-statistic")
    kernel = kernel or default_kernel()
    probs = np.full((mdp.n_states, mdp.n_actions), 1.0 / mdp.n_actions) if policy_probs is None else policy_probs
    states, actions = _rollouts(mdp, probs, n_rollouts, horizon, seed)
    feats = gen.features_np(states, actions)
    z = feats[:, :horizon].reshape(n_rollouts * horizon, *feats.shape[2:])
    a = actions.reshape(-1)
    s = states[:, :horizon].reshape(-1)
    s_next = states[:, 1:].reshape(-1)
    eps_hat = float(np.max(np.abs(mdp.rewards[s, a] - gen.reward_np(z, a))))
    model = gen.next_state_probs(z, a)
    sample_rng = np.random.default_rng([seed, n_rollouts, 7])
    u = sample_rng.random(len(a))
    model_samples = np.minimum((u[:, None] >= np.cumsum(model, axis=1)).sum(axis=1), mdp.n_states - 1)
    delta_hat, n_bins, excluded = 0.0, 0, 0
    for ss in range(mdp.n_states):
        for aa in range(mdp.n_actions):
            mask = (s == ss) & (a == aa)
            if mask.sum() < 2:
                excluded += 1
                continue
            n_bins += 1
            stat = ipm.mmd_u_statistic(s_next[mask], model_samples[mask], kernel)
            delta_hat = max(delta_hat, math.sqrt(max(stat, 0.0)))
    return EmpiricalEpsDelta(eps_hat, delta_hat, len(a), n_bins, excluded)
