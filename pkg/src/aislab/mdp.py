"""Finite MDPs, exact Bellman solvers, trajectory sampling and the toy environments."""
from __future__ import annotations

import csv
import io
import json
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Hashable, Optional, Sequence

import numpy as np
from scipy import sparse
from scipy.sparse import linalg as splinalg

from .exceptions import CodebookError, InputError

ROW_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class TabularMdp:
    """Finite MDP with transitions indexed ``[action, state, next_state]``
    and rewards indexed ``[state, action]``."""

    transitions: np.ndarray
    rewards: np.ndarray
    discount: float

    def __post_init__(self):
        p = np.array(self.transitions, dtype=np.float64)
        r = np.array(self.rewards, dtype=np.float64)
        if p.ndim != 3 or p.shape[1] != p.shape[2]:
            raise InputError(f"transitions must have shape (A, S, S), got {p.shape}")
        n_actions, n_states = p.shape[0], p.shape[1]
        if n_states < 1 or n_actions < 1:
            raise InputError("need at least one state and one action")
        if r.shape != (n_states, n_actions):
            raise InputError(f"rewards must have shape {(n_states, n_actions)}, got {r.shape}")
        if not np.all(np.isfinite(r)):
            raise InputError("non-finite reward entries")
        if np.any(p < 0) or np.any(np.abs(p.sum(axis=2) - 1.0) > ROW_TOL):
            raise InputError("every transition row must be a probability distribution")
        if not 0.0 < self.discount < 1.0:
            raise InputError(f"discount must lie in (0, 1), got {self.discount}")
        p.setflags(write=False)
        r.setflags(write=False)
        object.__setattr__(self, "transitions", p)
        object.__setattr__(self, "rewards", r)
        object.__setattr__(self, "discount", float(self.discount))

    @property
    def n_states(self) -> int:
        return self.transitions.shape[1]

    @property
    def n_actions(self) -> int:
        return self.transitions.shape[0]

    @property
    def gamma(self) -> float:
        return self.discount

    def to_json(self) -> str:
        return json.dumps(
            {
                "n_states": self.n_states,
                "n_actions": self.n_actions,
                "gamma": self.discount,
                "transitions": self.transitions.tolist(),
                "rewards": self.rewards.tolist(),
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "TabularMdp":
        doc = json.loads(text)
        mdp = cls(np.array(doc["transitions"]), np.array(doc["rewards"]), doc["gamma"])
        if mdp.n_states != doc["n_states"] or mdp.n_actions != doc["n_actions"]:
            raise InputError("declared sizes disagree with the tables")
        return mdp


@dataclass(frozen=True, eq=False)
class StationaryPolicy:
    action_probs: np.ndarray

    def __post_init__(self):
        probs = np.array(self.action_probs, dtype=np.float64)
        if probs.ndim != 2:
            raise InputError("action_probs must be a (states, actions) table")
        if np.any(probs < 0) or np.any(np.abs(probs.sum(axis=1) - 1.0) > ROW_TOL):
            raise InputError("every policy row must be a probability distribution")
        probs.setflags(write=False)
        object.__setattr__(self, "action_probs", probs)

    @classmethod
    def deterministic(cls, actions: Sequence[int], n_actions: int) -> "StationaryPolicy":
        actions = np.asarray(actions, dtype=int)
        probs = np.zeros((len(actions), n_actions))
        probs[np.arange(len(actions)), actions] = 1.0
        return cls(probs)

    @classmethod
    def uniform(cls, n_states: int, n_actions: int) -> "StationaryPolicy":
        return cls(np.full((n_states, n_actions), 1.0 / n_actions))

    def greedy_actions(self) -> np.ndarray:
        return np.argmax(self.action_probs, axis=1)


class HistoryPolicy:
    """A policy with a deterministic internal state updated from the observed history."""

    def init(self, start_state: int) -> Hashable:
        raise NotImplementedError

    def step(self, internal: Hashable, prev_action: int, new_state: int) -> Hashable:
        raise NotImplementedError

    def act(self, internal: Hashable) -> np.ndarray:
        raise NotImplementedError


@dataclass
class Trajectory:
    states: list
    actions: list
    rewards: list
    features: Optional[list] = None

    def __len__(self):
        return len(self.actions)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["t", "state", "action", "reward"])
        for t, (s, a, r) in enumerate(zip(self.states, self.actions, self.rewards)):
            writer.writerow([t, s, a, repr(float(r))])
        return buf.getvalue()


@dataclass(frozen=True)
class ValueIterationResult:
    v_star: np.ndarray
    q_star: np.ndarray
    pi_star: StationaryPolicy
    sweeps: int
    residual: float


def bellman_q(mdp: TabularMdp, v: np.ndarray) -> np.ndarray:
    # q[s, a] = r[s, a] + gamma * sum_s' P[a, s, s'] v[s']
    return mdp.rewards + mdp.discount * np.einsum("ast,t->sa", mdp.transitions, v)


def greedy(q: np.ndarray) -> np.ndarray:
    """Greedy action per row; np.argmax already returns the lowest index among ties."""
    return np.argmax(q, axis=1)


def value_iteration(mdp: TabularMdp, tol: float = 1e-10, max_sweeps: int = 1_000_000) -> ValueIterationResult:
    if tol <= 0:
        raise InputError("tol must be positive")
    r = mdp.rewards
    # start at the midpoint of the value range so the first residual is at most span(r)/2
    v = np.full(mdp.n_states, (r.max() + r.min()) / (2.0 * (1.0 - mdp.discount)))
    for sweep in range(1, max_sweeps + 1):
        q = bellman_q(mdp, v)
        tv = q.max(axis=1)
        residual = float(np.max(np.abs(tv - v)))
        if residual <= tol:
            pi = StationaryPolicy.deterministic(greedy(q), mdp.n_actions)
            return ValueIterationResult(v, q, pi, sweep, residual)
        v = tv
    raise RuntimeError("value iteration did not converge")


def policy_matrices(mdp: TabularMdp, policy: StationaryPolicy):
    probs = policy.action_probs
    if probs.shape != (mdp.n_states, mdp.n_actions):
        raise InputError("policy shape does not match the MDP")
    p_pi = np.einsum("sa,ast->st", probs, mdp.transitions)
    r_pi = np.einsum("sa,sa->s", probs, mdp.rewards)
    return p_pi, r_pi


def policy_value(mdp: TabularMdp, policy: StationaryPolicy) -> np.ndarray:
    p_pi, r_pi = policy_matrices(mdp, policy)
    return np.linalg.solve(np.eye(mdp.n_states) - mdp.discount * p_pi, r_pi)


def policy_iteration(mdp: TabularMdp) -> ValueIterationResult:
    """Exact optimal values: policy iteration seeded from a coarse value iteration."""
    seed = value_iteration(mdp, tol=1e-6)
    actions = greedy(seed.q_star)
    for sweep in range(1, 10_000):
        v = policy_value(mdp, StationaryPolicy.deterministic(actions, mdp.n_actions))
        q = bellman_q(mdp, v)
        best = q.max(axis=1)
        # only switch when strictly better beyond round-off, otherwise keep (lowest-id) incumbent
        improve = best > q[np.arange(mdp.n_states), actions] + 1e-12 * (1.0 + np.abs(best))
        if not improve.any():
            return ValueIterationResult(
                v, q, StationaryPolicy.deterministic(actions, mdp.n_actions), sweep,
                float(np.max(np.abs(best - v))),
            )
        actions = np.where(improve, greedy(q), actions)
    raise RuntimeError("policy iteration did not converge")


# ---------------------------------------------------------------------------
# product chain of (state, feature) under a flattened feature policy


@dataclass(frozen=True)
class ProductChainValue:
    values: np.ndarray  # (S, Z), nan where unreachable
    reachable: np.ndarray  # (S, Z) bool

    def at(self, s: int, z: int) -> float:
        if not self.reachable[s, z]:
            raise KeyError(f"(s={s}, z={z}) is unreachable")
        return float(self.values[s, z])


def _support(row: np.ndarray) -> np.ndarray:
    return np.flatnonzero(row > 0)


def product_chain_reachable(mdp: TabularMdp, gen, mu: Optional[np.ndarray] = None, starts=None):
    """BFS over (state, feature) pairs.

    With ``mu`` given only actions in its support are followed; with ``mu=None``
    every action is (controlled reachability). Returns the ordered list of pairs.
    """
    starts = range(mdp.n_states) if starts is None else starts
    seen = {}
    queue = deque()
    for s in starts:
        pair = (int(s), int(gen.init_feature[s]))
        if pair not in seen:
            seen[pair] = len(seen)
            queue.append(pair)
    while queue:
        s, z = queue.popleft()
        actions = range(mdp.n_actions) if mu is None else _support(mu[z])
        for a in actions:
            for s2 in _support(mdp.transitions[a, s]):
                pair = (int(s2), int(gen.next_feature(z, s2, a)))
                if pair not in seen:
                    seen[pair] = len(seen)
                    queue.append(pair)
    return list(seen)


def product_chain_value(mdp: TabularMdp, gen, mu: np.ndarray, starts=None) -> ProductChainValue:
    """Exact value of the history policy ``mu(z_t)`` with ``z_t`` driven by the generator's update."""
    mu = np.asarray(mu, dtype=np.float64)
    if mu.shape != (gen.n_features, mdp.n_actions):
        raise InputError("mu must be a (features, actions) table")
    pairs = product_chain_reachable(mdp, gen, mu, starts)
    index = {p: i for i, p in enumerate(pairs)}
    n = len(pairs)
    rows, cols, vals = [], [], []
    rhs = np.zeros(n)
    for i, (s, z) in enumerate(pairs):
        rows.append(i)
        cols.append(i)
        vals.append(1.0)
        for a in _support(mu[z]):
            w = mu[z, a]
            rhs[i] += w * mdp.rewards[s, a]
            for s2 in _support(mdp.transitions[a, s]):
                j = index[(int(s2), int(gen.next_feature(z, s2, a)))]
                rows.append(i)
                cols.append(j)
                vals.append(-mdp.discount * w * mdp.transitions[a, s, s2])
    if n <= 400:
        mat = np.zeros((n, n))
        np.add.at(mat, (rows, cols), vals)
        sol = np.linalg.solve(mat, rhs)
    else:
        mat = sparse.csr_matrix((vals, (rows, cols)), shape=(n, n))
        sol = splinalg.spsolve(mat.tocsc(), rhs)
    values = np.full((mdp.n_states, gen.n_features), np.nan)
    reachable = np.zeros((mdp.n_states, gen.n_features), dtype=bool)
    for (s, z), v in zip(pairs, sol):
        values[s, z] = v
        reachable[s, z] = True
    return ProductChainValue(values, reachable)


def truncated_feature_policy_value(mdp: TabularMdp, gen, mu: np.ndarray, start: int, horizon: int) -> float:
    """Expected discounted return over ``horizon`` steps by forward propagation of
    probability mass over (state, feature). Independent of the linear solve above."""
    mass = {(start, int(gen.init_feature[start])): 1.0}
    total = 0.0
    for t in range(horizon):
        nxt = {}
        for (s, z), m in mass.items():
            for a in _support(mu[z]):
                w = m * mu[z, a]
                total += mdp.discount**t * w * mdp.rewards[s, a]
                for s2 in _support(mdp.transitions[a, s]):
                    key = (int(s2), int(gen.next_feature(z, s2, a)))
                    nxt[key] = nxt.get(key, 0.0) + w * mdp.transitions[a, s, s2]
        mass = nxt
    return total


# ---------------------------------------------------------------------------
# sampling


def _draw(rng: np.random.Generator, probs: np.ndarray) -> int:
    # inverse-CDF on a single uniform keeps one RNG draw per decision
    u = rng.random()
    idx = int(np.searchsorted(np.cumsum(probs), u, side="right"))
    return min(idx, len(probs) - 1)


def sample_trajectory(
    mdp: TabularMdp,
    policy,
    horizon: int,
    rng: np.random.Generator,
    start: Optional[int] = None,
    start_dist: Optional[np.ndarray] = None,
) -> Trajectory:
    """Roll out ``horizon`` steps; ``states`` has ``horizon + 1`` entries."""
    if horizon < 1:
        raise InputError("horizon must be >= 1")
    if start is None:
        dist = np.full(mdp.n_states, 1.0 / mdp.n_states) if start_dist is None else np.asarray(start_dist)
        start = _draw(rng, dist)
    s = int(start)
    states, actions, rewards = [s], [], []
    internal = policy.init(s) if isinstance(policy, HistoryPolicy) else None
    for _ in range(horizon):
        if internal is None:
            probs = policy.action_probs[s]
        else:
            probs = policy.act(internal)
        a = _draw(rng, probs)
        rewards.append(float(mdp.rewards[s, a]))
        s2 = _draw(rng, mdp.transitions[a, s])
        if internal is not None:
            internal = policy.step(internal, a, s2)
        actions.append(a)
        states.append(s2)
        s = s2
    return Trajectory(states, actions, rewards)


def monte_carlo_returns(
    mdp: TabularMdp, policy: StationaryPolicy, start: int, n_rollouts: int, horizon: int, rng: np.random.Generator
) -> np.ndarray:
    """Discounted returns of ``n_rollouts`` independent rollouts, vectorised over rollouts."""
    s = np.full(n_rollouts, start)
    ret = np.zeros(n_rollouts)
    pcum = np.cumsum(policy.action_probs, axis=1)
    tcum = np.cumsum(mdp.transitions, axis=2)
    disc = 1.0
    for _ in range(horizon):
        a = np.minimum((rng.random(n_rollouts)[:, None] >= pcum[s]).sum(axis=1), mdp.n_actions - 1)
        ret += disc * mdp.rewards[s, a]
        s = np.minimum((rng.random(n_rollouts)[:, None] >= tcum[a, s]).sum(axis=1), mdp.n_states - 1)
        disc *= mdp.discount
    return ret


def stationary_distribution(mdp: TabularMdp, policy: StationaryPolicy) -> np.ndarray:
    p_pi, _ = policy_matrices(mdp, policy)
    w, vecs = np.linalg.eig(p_pi.T)
    k = int(np.argmin(np.abs(w - 1.0)))
    d = np.real(vecs[:, k])
    return d / d.sum()


# ---------------------------------------------------------------------------
# environments


def toy_mdp(K: float = 100.0, gamma: float = 0.95) -> TabularMdp:
    """Four states on a cycle. Action 0 moves forward, action 1 backward (each w.p. 0.5,
    otherwise stays); action 2 moves forward or backward w.p. 0.5 each."""
    if K <= 0:
        raise InputError("K must be positive")
    n = 4
    p = np.zeros((3, n, n))
    for s in range(n):
        p[0, s, s] += 0.5
        p[0, s, (s + 1) % n] += 0.5
        p[1, s, s] += 0.5
        p[1, s, (s - 1) % n] += 0.5
        p[2, s, (s + 1) % n] += 0.5
        p[2, s, (s - 1) % n] += 0.5
    r_state = np.array([-1.0, -1.0, 1.0, -float(K)])
    rewards = np.repeat(r_state[:, None], 3, axis=1)
    return TabularMdp(p, rewards, gamma)


def random_mdp(
    n_states: int, n_actions: int, seed: int, reward_range=(0.0, 1.0), gamma: float = 0.9
) -> TabularMdp:
    if n_states < 1 or n_actions < 1:
        raise InputError("counts must be >= 1")
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.ones(n_states), size=(n_actions, n_states))
    p /= p.sum(axis=2, keepdims=True)
    lo, hi = reward_range
    r = rng.uniform(lo, hi, size=(n_states, n_actions))
    return TabularMdp(p, r, gamma)


_DOT = -1
# codebooks indexed [action][previous state][new state] and [action][memory][feature]
CODEBOOK_F = np.array(
    [
        [[0, 1, _DOT, _DOT], [_DOT, 0, 1, _DOT], [_DOT, _DOT, 0, 1], [1, _DOT, _DOT, 0]],
        [[1, _DOT, _DOT, 0], [0, 1, _DOT, _DOT], [_DOT, 0, 1, _DOT], [_DOT, _DOT, 0, 1]],
        [[_DOT, 0, _DOT, 1], [0, _DOT, 1, _DOT], [_DOT, 0, _DOT, 1], [0, _DOT, 1, _DOT]],
    ]
)
CODEBOOK_D = np.array(
    [
        [[0, 1], [1, 2], [2, 3], [3, 0]],
        [[3, 0], [0, 1], [1, 2], [2, 3]],
        [[1, 3], [0, 2], [1, 3], [0, 2]],
    ]
)


class CodebookFsmPolicy(HistoryPolicy):
    """Finite-state controller of the toy example.

    The binary feature is ``F[a_prev][s_prev][s]`` and the memory follows
    ``M = D[a_prev][M_prev][Z]``; actions are drawn from ``reference(M)``.
    Internal state is the pair ``(previous state, memory)``.
    """

    def __init__(self, reference: StationaryPolicy):
        if reference.action_probs.shape != (4, 3):
            raise InputError("reference policy must be defined on 4 states and 3 actions")
        self.reference = reference
        self.reads = 0

    def feature(self, prev_state: int, prev_action: int, state: int) -> int:
        z = int(CODEBOOK_F[prev_action, prev_state, state])
        if z == _DOT:
            raise CodebookError(f"F[{prev_action}][{prev_state}][{state}] is undefined")
        return z

    def init(self, start_state: int):
        return (int(start_state), int(start_state))

    def step(self, internal, prev_action: int, new_state: int):
        prev_state, memory = internal
        z = self.feature(prev_state, prev_action, new_state)
        self.reads += 1
        return (int(new_state), int(CODEBOOK_D[prev_action, memory, z]))

    def act(self, internal) -> np.ndarray:
        return self.reference.action_probs[internal[1]]


def codebook_fsm_policy(reference: StationaryPolicy) -> CodebookFsmPolicy:
    return CodebookFsmPolicy(reference)


def history_policy_reachable(mdp: TabularMdp, policy: HistoryPolicy, starts) -> set:
    """All (state, internal) pairs reachable under the policy's action support."""
    seen = set()
    queue = deque()
    for s in starts:
        node = (int(s), policy.init(s))
        seen.add(node)
        queue.append(node)
    while queue:
        s, internal = queue.popleft()
        for a in _support(policy.act(internal)):
            for s2 in _support(mdp.transitions[a, s]):
                node = (int(s2), policy.step(internal, int(a), int(s2)))
                if node not in seen:
                    seen.add(node)
                    queue.append(node)
    return seen


def enumerate_branches(mdp: TabularMdp, policy: HistoryPolicy, start: int, depth: int):
    """Yield every (state, action-distribution) decision along all stochastic branches
    of length ``depth``; each action in the policy's support is followed."""
    stack = [(int(start), policy.init(start), 0)]
    while stack:
        s, internal, t = stack.pop()
        probs = policy.act(internal)
        yield s, probs
        if t + 1 >= depth:
            continue
        for a in _support(probs):
            for s2 in _support(mdp.transitions[a, s]):
                stack.append((int(s2), policy.step(internal, int(a), int(s2)), t + 1))


def flatten_partition_policy(partition: Sequence[int], feature_actions: Sequence[int], n_actions: int) -> StationaryPolicy:
    actions = [feature_actions[z] for z in partition]
    return StationaryPolicy.deterministic(actions, n_actions)


# ---------------------------------------------------------------------------
# continuous stand-in


@dataclass(frozen=True)
class PointMassEnv:
    """1-D point mass: ``s' = s + 0.1 clip(a) + w``, reward ``-(s - goal)^2``."""

    noise_std: float = 0.05
    goal: float = 0.0
    horizon: int = 50
    state_dim: int = field(default=1, init=False)

    def __post_init__(self):
        if self.noise_std < 0:
            raise InputError("noise_std must be >= 0")

    def start(self, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(-1.0, 1.0, size=1)

    def step(self, state, action, rng: np.random.Generator):
        state = np.asarray(state, dtype=np.float64)
        a = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
        reward = -float(np.sum((state - self.goal) ** 2))
        noise = rng.normal(0.0, self.noise_std, size=state.shape) if self.noise_std > 0 else 0.0
        return state + 0.1 * a + noise, reward

    def best_two_step_action(self, state: float) -> float:
        """argmax_a of r(s) + E r(s'): the next-state mean should land on the goal."""
        return float(np.clip(10.0 * (self.goal - state), -1.0, 1.0))

    def two_step_value(self, state: float, action: float) -> float:
        a = float(np.clip(action, -1.0, 1.0))
        return -((state - self.goal) ** 2) - ((state + 0.1 * a - self.goal) ** 2) - self.noise_std**2


def pointmass_env(noise_std: float = 0.05, goal: float = 0.0, horizon: int = 50) -> PointMassEnv:
    return PointMassEnv(noise_std, goal, horizon)


def sweep_bound(mdp: TabularMdp, tol: float) -> int:
    """Contraction-rate cap on value-iteration sweeps."""
    span = float(mdp.rewards.max() - mdp.rewards.min())
    if span == 0:
        return 1
    return math.ceil(math.log(tol * (1 - mdp.discount) / span) / math.log(mdp.discount))
