"""Policy search with a learned AIS: REINFORCE, actor-critic and PPO-clip.

Every agent follows the same loop: roll out a batch of episodes, take gradient
steps on the AIS loss (generator), then on the critic and actor. Features fed to
the actor and critic are detached from the generator except in PPO with a shared
generator, where the clipped surrogate also trains the GRU.
"""
from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass, field, fields, replace
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import nn
from .ais import KERNELS, AisConfig, NeuralAisGenerator, ais_loss, measure_eps_delta_empirical
from .exceptions import InputError, ScheduleError
from .mdp import PointMassEnv, TabularMdp, toy_mdp

LOG_FLOOR = -30.0
AGENTS = ("ais-ac", "ais-pg", "memoryless", "ppo")
METRIC_COLUMNS = ("iteration", "mean_return", "ais_loss", "reward_loss", "transition_loss", "eps_hat", "delta_hat", "wallclock_ms")


@dataclass
class TrainConfig:
    agent: str = "ais-ac"
    iterations: int = 200
    batch_size: int = 8
    episode_len: int = 50
    grad_steps: int = 1
    ais_lr: float = 1.5e-3
    actor_lr: float = 3.5e-4
    critic_lr: float = 7e-4
    lam: float = 0.3
    gamma: float = 0.99
    ppo_epochs: int = 12
    clip: float = 0.2
    ais_weight: float = 1.0
    a_exp: float = 0.6
    b_exp: float = 0.8
    c_exp: float = 0.7
    schedule: str = "constant"  # constant (fixed rates) | power (a_i = lr * i^-exp)
    optimizer: str = "adam"
    hidden_dim: int = 8
    head_hidden: int = 32
    ipm_variant: str = "mmd"
    kernel: str = "mean"  # mmd training kernel: mean | energy | gaussian | laplace
    kernel_param: float = 1.0
    estimator: str = "full_return"  # full_return | reward_to_go
    share_generator: bool = True
    log_std: float = -0.5
    partition: Optional[Sequence[int]] = None
    probe_every: int = 0
    probe_rollouts: int = 200
    seeds: Sequence[int] = (0,)
    record_wallclock: bool = False
    reward_scale: float = 1.0  # multiplies rewards inside the updates only
    normalize_advantage: bool = False  # standardise actor weights per batch

    def __post_init__(self):
        if self.agent not in AGENTS:
            raise InputError(f"unknown agent {self.agent!r}; expected one of {AGENTS}")
        if self.iterations < 0 or self.batch_size < 1 or self.episode_len < 1 or self.grad_steps < 1:
            raise InputError("iterations >= 0, batch_size, episode_len and grad_steps >= 1 required")
        if not 0.0 <= self.lam <= 1.0:
            raise InputError("lambda must lie in [0, 1]")
        if not 0.0 < self.gamma < 1.0:
            raise InputError("gamma must lie in (0, 1)")
        if self.schedule not in ("constant", "power"):
            raise InputError(f"unknown schedule {self.schedule!r}")
        if self.estimator not in ("full_return", "reward_to_go"):
            raise InputError(f"unknown estimator {self.estimator!r}")
        if self.ipm_variant not in ("mmd", "kl"):
            raise InputError("training supports the mmd and kl AIS losses")
        if self.kernel not in KERNELS:
            raise InputError(f"unknown kernel {self.kernel!r}; expected one of {KERNELS}")

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


# ---------------------------------------------------------------------------
# schedules


@dataclass(frozen=True)
class ScheduleReport:
    exponents: Dict[str, float]
    failures: List[str]

    @property
    def ok(self) -> bool:
        return not self.failures

    def raise_if_invalid(self):
        if self.failures:
            raise ScheduleError("; ".join(self.failures))
        return self


def validate_schedule(config) -> ScheduleReport:
    """Check the power-law family ``lr * i^-exp`` against the multi-timescale conditions.

    ``config`` is a TrainConfig, ``(a, b)`` for two timescales (generator, actor) or
    ``(a, c, b)`` for three (generator, critic, actor). ``sum i^-e`` diverges iff
    ``e <= 1`` and ``sum i^-2e`` converges iff ``e > 1/2``; ``i^-x / i^-y -> 0`` iff ``x > y``.
    """
    if isinstance(config, TrainConfig):
        exps = {"a": config.a_exp, "b": config.b_exp}
        if config.agent in ("ais-ac", "memoryless", "ppo"):
            exps["c"] = config.c_exp
    else:
        vals = tuple(float(v) for v in config)
        if len(vals) == 2:
            exps = {"a": vals[0], "b": vals[1]}
        elif len(vals) == 3:
            exps = {"a": vals[0], "c": vals[1], "b": vals[2]}
        else:
            raise InputError("expected (a, b) or (a, c, b) exponents")
    failures = []
    for name, e in exps.items():
        if e > 1.0:
            failures.append(f"divergent_sum({name}): exponent {e} > 1")
        if e <= 0.5:
            failures.append(f"square_summable({name}): exponent {e} <= 0.5")
    if not exps["b"] > exps["a"]:
        failures.append("ratio(b/a -> 0): requires b_exp > a_exp")
    if "c" in exps:
        if not exps["c"] > exps["a"]:
            failures.append("ratio(c/a -> 0): requires c_exp > a_exp")
        if not exps["b"] > exps["c"]:
            failures.append("ratio(b/c -> 0): requires b_exp > c_exp")
    return ScheduleReport(exps, failures)


def step_sizes(config: TrainConfig, iteration: int) -> Dict[str, float]:
    """Generator, actor and critic step sizes at (1-based) iteration ``i``."""
    if config.schedule == "constant":
        return {"ais": config.ais_lr, "actor": config.actor_lr, "critic": config.critic_lr}
    i = max(int(iteration), 1)
    return {
        "ais": config.ais_lr * i ** -config.a_exp,
        "actor": config.actor_lr * i ** -config.b_exp,
        "critic": config.critic_lr * i ** -config.c_exp,
    }


# ---------------------------------------------------------------------------
# environments with batched stepping


class TabularEnv:
    discrete = True

    def __init__(self, mdp: TabularMdp, starts: Optional[Sequence[int]] = None):
        self.mdp = mdp
        self.starts = np.arange(mdp.n_states) if starts is None else np.asarray(starts, dtype=int)
        self.n_states, self.n_actions = mdp.n_states, mdp.n_actions
        self._cum = np.cumsum(mdp.transitions, axis=2)

    def reset(self, rng, n: int) -> np.ndarray:
        return self.starts[rng.integers(0, len(self.starts), size=n)]

    def step(self, s, a, rng):
        r = self.mdp.rewards[s, a]
        u = rng.random(len(s))
        s2 = np.minimum((u[:, None] >= self._cum[a, s]).sum(axis=1), self.n_states - 1)
        return s2, r


class ContinuousEnv:
    discrete = False

    def __init__(self, env: PointMassEnv):
        self.env = env
        self.state_dim = env.state_dim
        self.action_dim = 1

    def reset(self, rng, n: int) -> np.ndarray:
        return rng.uniform(-1.0, 1.0, size=(n, self.state_dim))

    def step(self, s, a, rng):
        r = -np.sum((s - self.env.goal) ** 2, axis=-1)
        noise = rng.normal(0.0, self.env.noise_std, size=s.shape) if self.env.noise_std > 0 else 0.0
        return s + 0.1 * np.clip(a, -1.0, 1.0) + noise, r


def make_env(name: str, **kw):
    if name == "toy":
        return TabularEnv(toy_mdp(kw.get("K", 100.0), kw.get("gamma", 0.95)), kw.get("starts", (0, 1, 2)))
    if name == "bandit":
        rewards = np.asarray(kw.get("rewards", (1.0, 0.0)), dtype=np.float64)
        mdp = TabularMdp(np.ones((len(rewards), 1, 1)), rewards[None, :], kw.get("gamma", 0.9))
        return TabularEnv(mdp)
    if name == "pointmass":
        return ContinuousEnv(PointMassEnv(kw.get("noise_std", 0.05), kw.get("goal", 0.0), kw.get("horizon", 50)))
    raise InputError(f"unknown environment {name!r}")


# ---------------------------------------------------------------------------
# agents


def _mlp_np(p, prefix: str, x: np.ndarray, n_layers: int) -> np.ndarray:
    h = x
    for i in range(n_layers):
        h = h @ p[f"{prefix}.{i}.W"] + p[f"{prefix}.{i}.b"]
        if i < n_layers - 1:
            h = np.tanh(h)
    return h


@dataclass
class Agent:
    kind: str
    discrete: bool
    n_out: int  # actions (discrete) or action dimension
    feat_dim: int
    actor: nn.ParamSet
    critic: nn.ParamSet
    gen: Optional[NeuralAisGenerator] = None
    partition: Optional[np.ndarray] = None
    log_std: float = -0.5
    opts: Dict[str, object] = field(default_factory=dict)
    counters: Dict[str, int] = field(default_factory=lambda: {"log_clipped": 0})

    # features -----------------------------------------------------------
    def initial(self, n: int) -> np.ndarray:
        return np.zeros((n, self.feat_dim))

    def observe(self, z, s, a_prev) -> np.ndarray:
        if self.gen is not None:
            return self.gen.step_np(z, s, a_prev)
        if self.discrete:
            return nn.one_hot(self.partition[s], self.feat_dim)
        return np.asarray(s, dtype=np.float64).reshape(len(s), self.feat_dim)

    def features(self, states, actions) -> np.ndarray:
        states = np.asarray(states)
        if self.gen is not None:
            return self.gen.features_np(states, actions)
        if self.discrete:
            return nn.one_hot(self.partition[states], self.feat_dim)
        return np.asarray(states, dtype=np.float64).reshape(states.shape[0], states.shape[1], self.feat_dim)

    # policy ---------------------------------------------------------------
    def action_probs(self, z) -> np.ndarray:
        logits = _mlp_np(self.actor.arrays, "actor", z, 2)
        logits = logits - logits.max(axis=-1, keepdims=True)
        e = np.exp(logits)
        return e / e.sum(axis=-1, keepdims=True)

    def sample(self, z, rng):
        if self.discrete:
            probs = self.action_probs(z)
            u = rng.random(len(z))
            a = np.minimum((u[:, None] >= np.cumsum(probs, axis=1)).sum(axis=1), self.n_out - 1)
            return a, np.log(np.maximum(probs[np.arange(len(a)), a], 1e-300))
        mean = _mlp_np(self.actor.arrays, "actor", z, 2)
        std = math.exp(self.log_std)
        a = mean + std * rng.standard_normal(mean.shape)
        logp = np.sum(-0.5 * ((a - mean) / std) ** 2 - self.log_std - 0.5 * math.log(2 * math.pi), axis=-1)
        return a, logp

    def value(self, z) -> np.ndarray:
        return _mlp_np(self.critic.arrays, "critic", z, 2)[..., 0]


def make_agent(env, config: TrainConfig, rng) -> Agent:
    discrete = env.discrete
    n_out = env.n_actions if discrete else env.action_dim
    gen = None
    partition = None
    if config.agent == "memoryless":
        if discrete:
            partition = np.arange(env.n_states) if config.partition is None else np.asarray(config.partition, dtype=int)
            feat_dim = int(partition.max()) + 1
        else:
            feat_dim = env.state_dim
    else:
        state_dim = env.n_states if discrete else env.state_dim
        gen = NeuralAisGenerator.create(rng, state_dim, n_out, config.hidden_dim, discrete, config.ipm_variant, config.head_hidden, config.kernel)
        feat_dim = config.hidden_dim
    actor = nn.ParamSet(nn.init_mlp(rng, [feat_dim, config.head_hidden, n_out], "actor", out_scale=0.01))
    critic = nn.ParamSet(nn.init_mlp(rng, [feat_dim, config.head_hidden, 1], "critic"))
    agent = Agent(config.agent, discrete, n_out, feat_dim, actor, critic, gen, partition, config.log_std)
    agent.opts = {k: nn.make_optimizer(config.optimizer) for k in ("ais", "actor", "critic")}
    return agent


# ---------------------------------------------------------------------------
# rollouts


@dataclass
class Batch:
    states: np.ndarray  # (B, T+1[, d])
    actions: np.ndarray  # (B, T[, d])
    rewards: np.ndarray  # (B, T)
    features: np.ndarray  # (B, T+1, H)
    logp: np.ndarray  # (B, T) log-probabilities under the behaviour policy


def rollout(env, agent: Agent, n: int, horizon: int, rng) -> Batch:
    s = env.reset(rng, n)
    z = agent.observe(agent.initial(n), s, None)
    states, actions, rewards, feats, logps = [s], [], [], [z], []
    for _ in range(horizon):
        a, logp = agent.sample(z, rng)
        s, r = env.step(s, a, rng)
        z = agent.observe(z, s, a)
        states.append(s)
        actions.append(a)
        rewards.append(r)
        feats.append(z)
        logps.append(logp)
    return Batch(
        np.stack(states, axis=1), np.stack(actions, axis=1), np.stack(rewards, axis=1).astype(np.float64),
        np.stack(feats, axis=1), np.stack(logps, axis=1),
    )


def discounted_returns(rewards: np.ndarray, gamma: float) -> np.ndarray:
    disc = gamma ** np.arange(rewards.shape[1])
    return rewards @ disc


def returns_to_go(rewards: np.ndarray, gamma: float, from_start: bool) -> np.ndarray:
    """``sum_{t >= tau} gamma^t r_t`` (from_start) or ``sum_{t >= tau} gamma^(t - tau) r_t``."""
    T = rewards.shape[1]
    out = np.zeros_like(rewards)
    acc = np.zeros(rewards.shape[0])
    for t in range(T - 1, -1, -1):
        acc = rewards[:, t] + gamma * acc
        out[:, t] = acc
    if from_start:
        out = out * gamma ** np.arange(T)
    return out


def evaluate(agent: Agent, env, n_episodes: int, horizon: int, gamma: float, seed: int) -> float:
    """Mean discounted return of the current (stochastic) policy."""
    batch = rollout(env, agent, n_episodes, horizon, np.random.default_rng([seed, 99]))
    return float(np.mean(discounted_returns(batch.rewards, gamma)))


# ---------------------------------------------------------------------------
# losses and gradients


def _flat(x: np.ndarray) -> np.ndarray:
    return x.reshape(x.shape[0] * x.shape[1], *x.shape[2:])


def policy_log_prob(agent: Agent, leaves, feats, actions, counters=None) -> nn.Tensor:
    """Log-probability of each taken action; ``feats`` and ``actions`` are flattened."""
    out = nn.mlp(leaves, "actor", feats, 2)
    if agent.discrete:
        picked = nn.tsum(nn.log_softmax(out) * nn.one_hot(actions, agent.n_out), axis=-1)
    else:
        picked = nn.gaussian_log_prob(out, agent.log_std, np.asarray(actions, dtype=np.float64).reshape(out.value.shape))
    low = picked.value < LOG_FLOOR
    if counters is not None:
        counters["log_clipped"] += int(low.sum())
    if low.any():
        picked = nn.clip(picked, LOG_FLOOR, math.inf)
    return picked


def reinforce_gradient(batch: Batch, agent: Agent, gamma: float, estimator: str = "full_return", feats=None) -> Dict[str, np.ndarray]:
    """Ascent direction ``(1/B) sum_t gamma^t r_t sum_{tau <= t} grad log mu(a_tau | z_tau)``.

    Swapping the double sum gives per-step weights ``sum_{t >= tau} gamma^t r_t``; the
    ``reward_to_go`` estimator restarts discounting at ``tau`` instead.
    """
    feats = batch.features if feats is None else feats
    T = batch.rewards.shape[1]
    weights = returns_to_go(batch.rewards, gamma, from_start=(estimator == "full_return"))
    leaves = agent.actor.leaves()
    logp = policy_log_prob(agent, leaves, _flat(feats[:, :T]), _flat(batch.actions), agent.counters)
    objective = nn.tsum(logp * weights.reshape(-1)) * (1.0 / batch.rewards.shape[0])
    return nn.grads_by_name(leaves, nn.backward(objective, leaves.values()))


def td_errors(agent: Agent, feats: np.ndarray, rewards: np.ndarray, gamma: float) -> np.ndarray:
    v = agent.value(feats)
    return rewards + gamma * v[:, 1:] - v[:, :-1]


def critic_gradient(agent: Agent, feats: np.ndarray, rewards: np.ndarray, gamma: float):
    """Semi-gradient of ``mean smooth_l1(r + gamma V(z') - V(z))`` with the target held fixed."""
    T = rewards.shape[1]
    leaves = agent.critic.leaves()
    v_next = agent.value(feats[:, 1:])
    target = (rewards + gamma * v_next).reshape(-1)
    v = nn.mlp(leaves, "critic", _flat(feats[:, :T]), 2)[:, 0]
    loss = nn.tsum(nn.smooth_l1(target - v)) * (1.0 / target.size)
    return float(loss.value), nn.grads_by_name(leaves, nn.backward(loss, leaves.values()))


def expected_td_gradient(agent: Agent, mdp: TabularMdp, policy_probs: np.ndarray, gamma: float, weights=None):
    """Exact-expectation form of :func:`critic_gradient` on one-hot state features:
    ``sum_s d(s) smooth_l1(r_pi(s) + gamma sum_s' P_pi(s, s') V(s') - V(s))``, semi-gradient."""
    n = mdp.n_states
    d = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=np.float64)
    r_pi = np.sum(policy_probs * mdp.rewards, axis=1)
    p_pi = np.einsum("sa,ast->st", policy_probs, mdp.transitions)
    eye = np.eye(n)
    target = r_pi + gamma * p_pi @ agent.value(eye)
    leaves = agent.critic.leaves()
    v = nn.mlp(leaves, "critic", eye, 2)[:, 0]
    loss = nn.tsum(nn.smooth_l1(target - v) * d)
    return float(loss.value), nn.grads_by_name(leaves, nn.backward(loss, leaves.values()))


def actor_critic_gradient(agent: Agent, feats: np.ndarray, actions: np.ndarray, weights: np.ndarray) -> Dict[str, np.ndarray]:
    """Ascent direction ``mean_t grad log mu(a_t | z_t) * w_t`` for fixed critic weights ``w``."""
    T = weights.shape[1]
    leaves = agent.actor.leaves()
    logp = policy_log_prob(agent, leaves, _flat(feats[:, :T]), _flat(actions), agent.counters)
    objective = nn.tsum(logp * weights.reshape(-1)) * (1.0 / weights.size)
    return nn.grads_by_name(leaves, nn.backward(objective, leaves.values()))


def ais_config(config: TrainConfig) -> AisConfig:
    return AisConfig(config.lam, config.ipm_variant, config.hidden_dim, config.episode_len, config.kernel, config.kernel_param)


def ais_gradient(agent: Agent, batch: Batch, config: TrainConfig):
    cfg = ais_config(config)
    leaves = agent.gen.params.leaves()
    parts = ais_loss(batch, agent.gen, cfg, leaves)
    grads = nn.grads_by_name(leaves, nn.backward(parts.total, leaves.values()))
    losses = {"ais_loss": float(parts.total.value), "reward_loss": float(parts.reward.value), "transition_loss": float(parts.transition.value)}
    return losses, grads


def _apply(agent: Agent, name: str, grads, step_size: float, ascend: bool = False):
    if ascend:
        grads = {k: -g for k, g in grads.items()}
    params = {"ais": agent.gen.params if agent.gen is not None else None, "actor": agent.actor, "critic": agent.critic}[name]
    new = nn.optimizer_step("", params, grads, step_size, agent.opts[name])
    if name == "ais":
        agent.gen = agent.gen.with_params(new)
    elif name == "actor":
        agent.actor = new
    else:
        agent.critic = new


def two_timescale_update(agent: Agent, grads: Dict[str, Dict[str, np.ndarray]], iteration: int, config: TrainConfig) -> Agent:
    """Generator descends its loss with ``a_i``; actor ascends ``J`` with ``b_i``;
    a critic, if given gradients, descends the TD loss with ``c_i``."""
    lr = step_sizes(config, iteration)
    if "ais" in grads and agent.gen is not None:
        _apply(agent, "ais", grads["ais"], lr["ais"])
    if "critic" in grads:
        _apply(agent, "critic", grads["critic"], lr["critic"])
    if "actor" in grads:
        _apply(agent, "actor", grads["actor"], lr["actor"], ascend=True)
    return agent


def actor_critic_update(batch: Batch, agent: Agent, iteration: int, config: TrainConfig) -> Dict[str, float]:
    """AIS step on the generator loss, critic step on the TD loss, actor step weighted by
    the TD error of the critic (a baseline-corrected form of the critic-weighted score)."""
    out = {}
    if agent.gen is not None:
        losses, g_ais = ais_gradient(agent, batch, config)
        out.update(losses)
        two_timescale_update(agent, {"ais": g_ais}, iteration, config)
    feats = agent.features(batch.states, batch.actions)
    weights = td_errors(agent, feats, batch.rewards, config.gamma)
    if config.normalize_advantage:
        weights = (weights - weights.mean()) / (weights.std() + 1e-8)
    td_loss, g_critic = critic_gradient(agent, feats, batch.rewards, config.gamma)
    g_actor = actor_critic_gradient(agent, feats, batch.actions, weights)
    two_timescale_update(agent, {"critic": g_critic, "actor": g_actor}, iteration, config)
    out["td_loss"] = td_loss
    return out


def policy_gradient_update(batch: Batch, agent: Agent, iteration: int, config: TrainConfig) -> Dict[str, float]:
    """One step: generator on the AIS loss, then actor on the REINFORCE estimate."""
    losses, g_ais = ais_gradient(agent, batch, config)
    two_timescale_update(agent, {"ais": g_ais}, iteration, config)
    feats = agent.features(batch.states, batch.actions)
    g_actor = reinforce_gradient(batch, agent, config.gamma, config.estimator, feats)
    two_timescale_update(agent, {"actor": g_actor}, iteration, config)
    return losses


def ppo_surrogate(logp_new: nn.Tensor, logp_old: np.ndarray, adv: np.ndarray, clip: float) -> nn.Tensor:
    """``mean min(ratio A, clip(ratio, 1-e, 1+e) A)`` with the ratio formed in log space."""
    log_ratio = nn.clip(logp_new - logp_old, -20.0, 20.0)
    ratio = nn.exp(log_ratio)
    unclipped = ratio * adv
    clipped = nn.clip(ratio, 1.0 - clip, 1.0 + clip) * adv
    return nn.tsum(nn.minimum(unclipped, clipped)) * (1.0 / adv.size)


def ppo_clip_update(batch: Batch, agent: Agent, iteration: int, config: TrainConfig) -> Dict[str, float]:
    """``ppo_epochs`` full-batch steps on ``-surrogate (+ ais_weight * AIS loss)``.

    Advantages are discounted Monte-Carlo returns minus the critic at the behaviour
    features. With ``share_generator`` the surrogate also trains the GRU."""
    T = batch.rewards.shape[1]
    lr = step_sizes(config, iteration)
    adv = (returns_to_go(batch.rewards, config.gamma, from_start=False) - agent.value(batch.features[:, :T])).reshape(-1)
    old = _flat(batch.logp)
    actions = _flat(batch.actions)
    out = {}
    cfg = ais_config(config)
    for _ in range(config.ppo_epochs):
        a_leaves = agent.actor.leaves()
        if agent.gen is not None and config.share_generator:
            g_leaves = agent.gen.params.leaves()
            parts = ais_loss(batch, agent.gen, cfg, g_leaves)
            # (B, T*H) -> (B*T, H), the batch-major layout of _flat
            feats = nn.reshape(nn.concat(parts.features, axis=-1), (batch.rewards.shape[0] * T, agent.feat_dim))
            logp = policy_log_prob(agent, a_leaves, feats, actions, agent.counters)
            surr = ppo_surrogate(logp, old, adv, config.clip)
            loss = parts.total * config.ais_weight - surr
            grads = nn.backward(loss, list(a_leaves.values()) + list(g_leaves.values()))
            _apply(agent, "ais", nn.grads_by_name(g_leaves, grads), lr["ais"])
            out.update(ais_loss=float(parts.total.value), reward_loss=float(parts.reward.value), transition_loss=float(parts.transition.value))
        else:
            if agent.gen is not None:
                losses, g_ais = ais_gradient(agent, batch, config)
                out.update(losses)
                _apply(agent, "ais", g_ais, lr["ais"])
            logp = policy_log_prob(agent, a_leaves, _flat(batch.features[:, :T]), actions, agent.counters)
            loss = -ppo_surrogate(logp, old, adv, config.clip)
            grads = nn.backward(loss, a_leaves.values())
        _apply(agent, "actor", nn.grads_by_name(a_leaves, grads), lr["actor"])
    # value baseline regression toward the Monte-Carlo returns
    feats = agent.features(batch.states, batch.actions)
    leaves = agent.critic.leaves()
    target = returns_to_go(batch.rewards, config.gamma, from_start=False).reshape(-1)
    v = nn.mlp(leaves, "critic", _flat(feats[:, :T]), 2)[:, 0]
    vloss = nn.tsum(nn.smooth_l1(target - v)) * (1.0 / target.size)
    _apply(agent, "critic", nn.grads_by_name(leaves, nn.backward(vloss, leaves.values())), lr["critic"])
    return out


# ---------------------------------------------------------------------------
# the loop


@dataclass
class TrainResult:
    metrics: List[Dict[str, float]]
    agent: Agent
    seed: int


def _probe(agent: Agent, env, config: TrainConfig, seed: int):
    if agent.gen is None or not env.discrete or config.probe_every <= 0:
        return math.nan, math.nan
    probs_gen = _PolicyView(agent)
    est = measure_eps_delta_empirical(env.mdp, probs_gen, config.probe_rollouts, "mmd", horizon=min(config.episode_len, 10), seed=seed)
    return est.eps_hat, est.delta_hat


class _PolicyView:
    """Exposes a learned generator through the probe's array interface."""

    tabular = True

    def __init__(self, agent: Agent):
        self.gen = agent.gen

    def features_np(self, states, actions):
        return self.gen.features_np(states, actions)

    def reward_np(self, z, a):
        return self.gen.reward_np(z, a)

    def next_state_probs(self, z, a):
        return self.gen.next_state_probs(z, a)


def train_loop(env, config: TrainConfig, seed: Optional[int] = None) -> TrainResult:
    """Rollout, then ``grad_steps`` updates on the batch, once per iteration."""
    validate_schedule(config).raise_if_invalid()
    seed = config.seeds[0] if seed is None else seed
    rng = np.random.default_rng([seed, 0])
    agent = make_agent(env, config, rng)
    update = {"ais-ac": actor_critic_update, "memoryless": actor_critic_update, "ais-pg": policy_gradient_update, "ppo": ppo_clip_update}[config.agent]
    metrics = []
    for it in range(1, config.iterations + 1):
        t0 = time.perf_counter()
        batch = rollout(env, agent, config.batch_size, config.episode_len, rng)
        learn = batch if config.reward_scale == 1.0 else replace(batch, rewards=batch.rewards * config.reward_scale)
        losses = {}
        for _ in range(config.grad_steps):
            losses = update(learn, agent, it, config)
        eps_hat, delta_hat = (math.nan, math.nan)
        if config.probe_every > 0 and it % config.probe_every == 0:
            eps_hat, delta_hat = _probe(agent, env, config, seed * 100003 + it)
        metrics.append({
            "iteration": it,
            "mean_return": float(np.mean(discounted_returns(batch.rewards, config.gamma))),
            "ais_loss": losses.get("ais_loss", math.nan),
            "reward_loss": losses.get("reward_loss", math.nan),
            "transition_loss": losses.get("transition_loss", math.nan),
            "eps_hat": eps_hat,
            "delta_hat": delta_hat,
            "wallclock_ms": (time.perf_counter() - t0) * 1e3 if config.record_wallclock else 0.0,
        })
    return TrainResult(metrics, agent, seed)


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    return "nan" if math.isnan(x) else format(x, ".17g")


def metrics_to_csv(metrics: List[Dict[str, float]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for row in metrics:
        w.writerow([_fmt(row[c]) for c in METRIC_COLUMNS])
    return buf.getvalue()


def with_overrides(config: TrainConfig, **kw) -> TrainConfig:
    return replace(config, **kw)
