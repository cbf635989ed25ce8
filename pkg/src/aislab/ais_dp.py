"""Dynamic programming on a tabular AIS, exact optimality gap, and the bound checks."""
from __future__ import annotations

import csv
import io
import json
import math
from collections import deque
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterator, List, Optional

import numpy as np

from . import ipm
from .ais import IPM_ALIASES, TabularAisGenerator, default_kernel, measure_eps_delta
from .exceptions import BoundViolation, ClosureError, SizeError
from .mdp import TabularMdp, policy_iteration, product_chain_reachable, product_chain_value

SLACK = 1e-9
MAX_FEATURES = 1_000_000


@dataclass(frozen=True)
class Closure:
    features: List[int]
    pairs: List[tuple]  # reachable (state, feature) under some action sequence
    edges: List[tuple]  # ((s, z), a, (s2, z2), prob)


def feature_closure(gen: TabularAisGenerator, mdp: TabularMdp, starts=None) -> Closure:
    starts = range(mdp.n_states) if starts is None else starts
    feats = {int(gen.init_feature[s]) for s in starts}
    queue = deque(sorted(feats))
    while queue:
        z = queue.popleft()
        for z2 in np.unique(gen.update[z]):
            z2 = int(z2)
            if z2 not in feats:
                if not 0 <= z2 < gen.n_features:
                    raise ClosureError(f"update from feature {z} leaves the feature set ({z2})")
                feats.add(z2)
                if len(feats) > MAX_FEATURES:
                    raise SizeError("feature closure exceeds 1e6 features")
                queue.append(z2)
    pairs = product_chain_reachable(mdp, gen, None, starts)
    edges = []
    for s, z in pairs:
        for a in range(mdp.n_actions):
            for s2 in np.flatnonzero(mdp.transitions[a, s] > 0):
                edges.append(((s, z), a, (int(s2), gen.next_feature(z, int(s2), a)), float(mdp.transitions[a, s, s2])))
    return Closure(sorted(feats), pairs, edges)


def feature_mdp(gen: TabularAisGenerator, gamma: float) -> TabularMdp:
    """The AIS dynamic program as an ordinary MDP on features: mass ``p_hat(s'|z,a)``
    is routed to feature ``update[z, s', a]``."""
    nz, na, ns = gen.n_features, gen.n_actions, gen.n_states
    p = np.zeros((na, nz, nz))
    for z in range(nz):
        for a in range(na):
            np.add.at(p[a, z], gen.update[z, :, a], gen.p_hat[z, a])
    p /= p.sum(axis=2, keepdims=True)
    return TabularMdp(p, gen.r_hat, gamma)


@dataclass(frozen=True)
class AisDpSolution:
    q_hat: np.ndarray
    v_hat: np.ndarray
    mu: np.ndarray  # (features, actions) deterministic greedy policy
    residual: float

    @property
    def greedy_actions(self) -> np.ndarray:
        return np.argmax(self.mu, axis=1)


def solve_ais_dp(gen: TabularAisGenerator, mdp: TabularMdp, tol: float = 1e-10) -> AisDpSolution:
    fmdp = feature_mdp(gen, mdp.discount)
    res = policy_iteration(fmdp)
    q = res.q_star
    actions = np.argmax(q, axis=1)
    v = q[np.arange(gen.n_features), actions]
    mu = np.zeros_like(q)
    mu[np.arange(gen.n_features), actions] = 1.0
    residual = bellman_residual(gen, v, mdp.discount)
    if residual > tol:
        raise RuntimeError(f"AIS DP residual {residual:.3e} above tolerance {tol:.1e}")
    return AisDpSolution(q, v, mu, residual)


def ais_q(gen: TabularAisGenerator, v_hat: np.ndarray, gamma: float) -> np.ndarray:
    # q[z, a] = r_hat[z, a] + gamma * sum_s' p_hat[z, a, s'] v_hat[update[z, s', a]]
    nxt = v_hat[np.transpose(gen.update, (0, 2, 1))]  # (z, a, s')
    return gen.r_hat + gamma * np.sum(gen.p_hat * nxt, axis=2)


def bellman_residual(gen: TabularAisGenerator, v_hat: np.ndarray, gamma: float) -> float:
    return float(np.max(np.abs(ais_q(gen, v_hat, gamma).max(axis=1) - v_hat)))


def optimal_values(mdp: TabularMdp) -> np.ndarray:
    return policy_iteration(mdp).v_star


def delta_gap(mdp: TabularMdp, gen: TabularAisGenerator, solution: AisDpSolution, starts=None, v_star=None) -> float:
    """Largest |v*(s) - value of the flattened policy at (s, z)| over pairs the policy reaches."""
    v_star = optimal_values(mdp) if v_star is None else v_star
    chain = product_chain_value(mdp, gen, solution.mu, starts)
    s_idx, z_idx = np.nonzero(chain.reachable)
    return float(np.max(np.abs(v_star[s_idx] - chain.values[s_idx, z_idx])))


def continuation_values(gen: TabularAisGenerator, v_hat: np.ndarray, z: int, a: int) -> np.ndarray:
    return v_hat[gen.update[z, :, a]]


def kappa(
    gen: TabularAisGenerator,
    solution: AisDpSolution,
    ipm_variant: str,
    state_metric: ipm.MetricSpec = ipm.DISCRETE,
    kernel: Optional[ipm.KernelSpec] = None,
    features=None,
) -> float:
    """sup over (z, a) of the Minkowski functional of ``s' -> V(update[z, s', a])``."""
    variant = IPM_ALIASES.get(ipm_variant, ipm_variant)
    features = range(gen.n_features) if features is None else features
    states = np.arange(gen.n_states)
    gram = None
    if variant == "mmd":
        kernel = kernel or default_kernel()
        gram = kernel.gram(states)
        anchor = int(kernel.anchor) if kernel.anchor is not None else 0
    best = 0.0
    for z in features:
        for a in range(gen.n_actions):
            g = continuation_values(gen, solution.v_hat, z, a)
            if variant == "tv":
                val = 0.5 * ipm.span(g)
            elif variant == "wasserstein":
                val = ipm.lipschitz_fn(g, state_metric, states) if len(g) > 1 else 0.0
            else:
                # both measures have unit mass, so shifting g by a constant leaves the
                # integral difference unchanged; the anchor-centred shift is in the RKHS
                val = ipm.rkhs_norm(g - g[anchor], gram)
            best = max(best, val)
    return best


def lipschitz_recursion(L_r: float, L_P: float, L_f: float, gamma: float) -> Iterator[float]:
    """L_1 = L_r, L_{t+1} = L_r + gamma L_P L_f L_t."""
    L = L_r
    while True:
        yield L
        L = L_r + gamma * L_P * L_f * L


def lipschitz_value_fixpoint(L_r: float, L_P: float, L_f: float, gamma: float) -> float:
    """Fixed point ``L_r / (1 - gamma L_f L_P)``; ``inf`` when the contraction assumption fails."""
    alpha = gamma * L_P * L_f
    if alpha >= 1.0:
        return math.inf
    return L_r / (1.0 - alpha)


def span_bound_check(solution: AisDpSolution, gen: TabularAisGenerator, gamma: float, features=None, raise_on_violation: bool = True):
    features = list(range(gen.n_features)) if features is None else list(features)
    span_v = ipm.span(solution.v_hat[features])
    bound = ipm.span(gen.r_hat[features]) / (1.0 - gamma)
    if span_v > bound + SLACK and raise_on_violation:
        raise BoundViolation(f"span(V)={span_v} exceeds span(r)/(1-gamma)={bound}", {"span_v": span_v, "bound": bound})
    return span_v, bound


def feature_lipschitz_constants(gen: TabularAisGenerator, features, state_metric=ipm.DISCRETE, feature_metric=ipm.DISCRETE) -> Dict[str, float]:
    """Lipschitz constants of r_hat, p_hat and update on the given features."""
    features = list(features)
    pts = np.asarray(features)
    if len(features) < 2:
        L_r = 0.0
        L_P = 0.0
    else:
        L_r = max(ipm.lipschitz_fn(gen.r_hat[features, a], feature_metric, pts) for a in range(gen.n_actions))
        L_P = ipm.lipschitz_kernel(gen.p_hat[features], feature_metric, state_metric, pts)
    # Lipschitz constant of s' -> update[z, s', a] (state metric to feature metric)
    sd = state_metric.pairwise(np.arange(gen.n_states))
    L_f = 0.0
    depends_on_feature = False
    for z in features:
        for a in range(gen.n_actions):
            out = gen.update[z, :, a]
            fd = feature_metric.pairwise(out)
            off = sd > 0
            if off.any():
                L_f = max(L_f, float(np.max(fd[off] / sd[off])))
            if np.any(out != gen.update[features[0], :, a]):
                depends_on_feature = True
    return {"L_r": L_r, "L_P": L_P, "L_f": L_f, "f_depends_on_feature": depends_on_feature}


@dataclass
class BoundConfig:
    state_metric: ipm.MetricSpec = ipm.DISCRETE
    kernel: Optional[ipm.KernelSpec] = None
    starts: Optional[list] = None
    tol: float = 1e-10
    raise_on_violation: bool = True


@dataclass
class BoundReport:
    ipm: str
    gamma: float
    eps: float
    delta: float
    kappa: float
    delta_gap: float
    thm1_rhs: float
    cor_rhs: float
    corollary_applies: bool
    n_features: int
    constants: Dict[str, float] = field(default_factory=dict)
    notes: List[str] = field(default_factory=list)
    violated: bool = False

    CSV_COLUMNS = ("seed", "n_states", "n_actions", "n_features", "ipm", "eps", "delta", "kappa", "delta_gap", "thm1_rhs", "cor_rhs", "violated")

    def csv_row(self, seed, n_states, n_actions) -> list:
        def fmt(x):
            return "nan" if x is None or (isinstance(x, float) and math.isnan(x)) else format(float(x), ".17g")

        return [
            seed, n_states, n_actions, self.n_features, self.ipm,
            fmt(self.eps), fmt(self.delta), fmt(self.kappa), fmt(self.delta_gap),
            fmt(self.thm1_rhs), fmt(self.cor_rhs), "true" if self.violated else "false",
        ]

    def to_dict(self) -> dict:
        return asdict(self)


def bound_report(mdp: TabularMdp, gen: TabularAisGenerator, ipm_variant: str, config: Optional[BoundConfig] = None) -> BoundReport:
    config = config or BoundConfig()
    variant = IPM_ALIASES[ipm_variant]
    gamma = mdp.discount
    closure = feature_closure(gen, mdp, config.starts)
    features = closure.features
    sol = solve_ais_dp(gen, mdp, config.tol)
    v_star = optimal_values(mdp)
    ed = measure_eps_delta(mdp, gen, variant, config.state_metric, config.kernel, config.starts)
    gap = delta_gap(mdp, gen, sol, config.starts, v_star)
    kap = kappa(gen, sol, variant, config.state_metric, config.kernel, features)
    thm1 = 2.0 * (ed.eps + gamma * ed.delta * kap) / (1.0 - gamma)
    span_r = ipm.span(gen.r_hat[features])
    span_v = ipm.span(sol.v_hat[features])
    consts = {"span_r": span_r, "span_v": span_v}
    notes = ["delta_gap over (state, feature) pairs reachable from the start states"]
    applies = True
    if variant == "tv":
        cor = 2.0 * ed.eps / (1.0 - gamma) + gamma * ed.delta * span_r / (1.0 - gamma) ** 2
    elif variant == "wasserstein":
        lc = feature_lipschitz_constants(gen, features, config.state_metric)
        consts.update({k: float(v) for k, v in lc.items()})
        alpha = gamma * lc["L_P"] * lc["L_f"]
        consts["L_V"] = lipschitz_value_fixpoint(lc["L_r"], lc["L_P"], lc["L_f"], gamma)
        consts["L_V_measured"] = ipm.lipschitz_fn(sol.v_hat[features], ipm.DISCRETE, np.asarray(features)) if len(features) > 1 else 0.0
        if alpha >= 1.0:
            applies = False
            notes.append("wasserstein corollary omitted: gamma * L_P * L_f >= 1")
        elif lc["f_depends_on_feature"]:
            applies = False
            notes.append("wasserstein corollary omitted: update depends on the current feature")
        if applies:
            cor = 2.0 * ed.eps / (1.0 - gamma) + 2.0 * gamma * ed.delta * lc["L_r"] / ((1.0 - gamma) * (1.0 - alpha))
        else:
            cor = math.nan
    else:
        cor = thm1
    report = BoundReport(variant, gamma, ed.eps, ed.delta, kap, gap, thm1, cor, applies, len(features), consts, notes)
    problems = []
    if gap > thm1 + SLACK:
        problems.append(f"delta_gap {gap!r} > theorem bound {thm1!r}")
    if applies and thm1 > cor + SLACK:
        problems.append(f"theorem bound {thm1!r} > corollary bound {cor!r}")
    if span_v > span_r / (1.0 - gamma) + SLACK:
        problems.append(f"span(V) {span_v!r} > span(r)/(1-gamma)")
    if variant == "wasserstein" and applies and consts["L_V_measured"] > consts["L_V"] + SLACK:
        problems.append("Lipschitz constant of V exceeds the fixed-point bound")
    if problems:
        report.violated = True
        report.notes.extend(problems)
        if config.raise_on_violation:
            raise BoundViolation("; ".join(problems), counterexample(mdp, gen, report))
    return report


def counterexample(mdp: TabularMdp, gen: TabularAisGenerator, report: BoundReport) -> str:
    def clean(x):
        if isinstance(x, float) and not math.isfinite(x):
            return str(x)
        return x

    rep = {k: (clean(v) if not isinstance(v, dict) else {kk: clean(vv) for kk, vv in v.items()}) for k, v in report.to_dict().items()}
    return json.dumps({"mdp": json.loads(mdp.to_json()), "generator": json.loads(gen.to_json()), "report": rep}, indent=1)


def reports_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(BoundReport.CSV_COLUMNS)
    for row in rows:
        w.writerow(row)
    return buf.getvalue()


def random_partition(n_states: int, rng: np.random.Generator) -> np.ndarray:
    """Random surjection onto ``k`` classes with ``k`` uniform in 1..n_states."""
    k = int(rng.integers(1, n_states + 1))
    part = np.concatenate([np.arange(k), rng.integers(0, k, size=n_states - k)])
    rng.shuffle(part)
    return part


def campaign_instance(seed: int, max_states: int = 8, max_actions: int = 4):
    """Random (MDP, partition) instance used by the bound campaign; fully determined by ``seed``."""
    from .mdp import random_mdp

    rng = np.random.default_rng([seed, 1])
    n_states = int(rng.integers(2, max_states + 1))
    n_actions = int(rng.integers(1, max_actions + 1))
    gamma = float(rng.choice([0.5, 0.8, 0.9, 0.95]))
    mdp = random_mdp(n_states, n_actions, seed, reward_range=(-1.0, 1.0), gamma=gamma)
    return mdp, random_partition(n_states, rng)


@dataclass
class CampaignResult:
    rows: List[list]
    reports: List[BoundReport]
    counterexamples: List[str]

    @property
    def n_violations(self) -> int:
        return sum(r.violated for r in self.reports)

    def csv(self) -> str:
        return reports_to_csv(self.rows)


def run_campaign(n_instances: int, base_seed: int = 0, ipms=("tv", "wasserstein", "mmd"), config: Optional[BoundConfig] = None, max_states: int = 8, max_actions: int = 4) -> CampaignResult:
    """Bound reports for instances ``base_seed .. base_seed + n_instances - 1`` and every IPM.
    Violations are recorded, not raised."""
    from .ais import quantizer_ais

    config = config or BoundConfig()
    config = BoundConfig(config.state_metric, config.kernel, config.starts, config.tol, raise_on_violation=False)
    out = CampaignResult([], [], [])
    for seed in range(base_seed, base_seed + n_instances):
        mdp, part = campaign_instance(seed, max_states, max_actions)
        gen = quantizer_ais(mdp, part)
        for name in ipms:
            rep = bound_report(mdp, gen, name, config)
            out.reports.append(rep)
            out.rows.append(rep.csv_row(seed, mdp.n_states, mdp.n_actions))
            if rep.violated:
                out.counterexamples.append(counterexample(mdp, gen, rep))
    return out
