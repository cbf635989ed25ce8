"""Checks on the 4-state example: optimal policy, the codebook controller, and
memoryless 2-feature abstractions."""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np

from .exceptions import CodebookError
from .mdp import (
    codebook_fsm_policy,
    enumerate_branches,
    flatten_partition_policy,
    history_policy_reachable,
    policy_value,
    toy_mdp,
    value_iteration,
)

STARTS = (0, 1, 2)


def two_class_partitions(n_states: int = 4) -> List[Tuple[int, ...]]:
    """Every surjection onto {0, 1}, labels fixed by putting state 0 in class 0."""
    return [(0,) + rest for rest in itertools.product((0, 1), repeat=n_states - 1) if 1 in rest]


@dataclass
class MemorylessRow:
    partition: Tuple[int, ...]
    actions: Tuple[int, int]
    value_state2: float
    mean_value: float  # under Uniform{0, 1, 2}


@dataclass
class ToyReport:
    K: float
    gamma: float
    pi_star: List[int]
    v_star: List[float]
    fsm_matches: bool
    fsm_decisions: int
    fsm_error: str
    state3_unreachable: bool
    memoryless: List[MemorylessRow] = field(default_factory=list)

    def best_memoryless(self, partition) -> MemorylessRow:
        rows = [r for r in self.memoryless if r.partition == tuple(partition)]
        return max(rows, key=lambda r: r.value_state2)

    def memoryless_below(self, margin: float = 1e-9, partitions=None) -> bool:
        """True when every memoryless policy (on the given partitions) has value at
        state 2 more than ``margin`` below v*(2)."""
        rows = [r for r in self.memoryless if partitions is None or r.partition in {tuple(p) for p in partitions}]
        return all(r.value_state2 < self.v_star[2] - margin for r in rows)

    def counterexamples(self, margin: float = 1e-9) -> List[MemorylessRow]:
        return [r for r in self.memoryless if not r.value_state2 < self.v_star[2] - margin]


def fsm_check(K: float = 100.0, gamma: float = 0.95, depth: int = 12):
    """Compare the controller's action distribution with pi*(true state) on every branch.

    Returns ``(matches, decisions_checked, detail, state3_unreachable)``.
    """
    mdp = toy_mdp(K, gamma)
    pi = value_iteration(mdp, 1e-10).pi_star
    fsm = codebook_fsm_policy(pi)
    decisions = 0
    try:
        for s0 in STARTS:
            for s, probs in enumerate_branches(mdp, fsm, s0, depth):
                decisions += 1
                if not np.array_equal(probs, pi.action_probs[s]):
                    return False, decisions, f"state {s}: controller {probs.tolist()} vs optimal {pi.action_probs[s].tolist()}", False
        reachable = history_policy_reachable(mdp, fsm, STARTS)
    except CodebookError as err:
        return False, decisions, str(err), False
    unreachable = all(s != 3 for s, _ in reachable)
    return True, decisions, "" if unreachable else "state 3 reachable", unreachable


def toy_report(K: float = 100.0, gamma: float = 0.95, depth: int = 12) -> ToyReport:
    mdp = toy_mdp(K, gamma)
    res = value_iteration(mdp, 1e-10)
    v_star = policy_value(mdp, res.pi_star)
    ok, decisions, err, unreachable = fsm_check(K, gamma, depth)
    rep = ToyReport(K, gamma, res.pi_star.greedy_actions().tolist(), v_star.tolist(), ok and unreachable, decisions, err, unreachable)
    for part in two_class_partitions():
        for acts in itertools.product(range(mdp.n_actions), repeat=2):
            v = policy_value(mdp, flatten_partition_policy(part, acts, mdp.n_actions))
            rep.memoryless.append(MemorylessRow(part, acts, float(v[2]), float(np.mean(v[list(STARTS)]))))
    return rep


def format_report(rep: ToyReport) -> str:
    lines = [
        f"toy MDP: K={rep.K:g}, gamma={rep.gamma:g}",
        "optimal policy: " + ", ".join(f"pi*({s})={a}" for s, a in enumerate(rep.pi_star)),
        "optimal values: " + ", ".join(f"v*({s})={v:.4f}" for s, v in enumerate(rep.v_star)),
        f"codebook controller equals pi* on all branches: {'yes' if rep.fsm_matches else 'no'} ({rep.fsm_decisions} decisions checked)",
        f"state 3 unreachable from starts {{0,1,2}} under the controller: {'yes' if rep.state3_unreachable else 'no'}",
    ]
    if rep.fsm_error:
        lines.append(f"  detail: {rep.fsm_error}")
    lines.append("memoryless 2-feature policies (value at state 2, gap to v*(2)):")
    for part in two_class_partitions():
        best = rep.best_memoryless(part)
        lines.append(f"  partition {''.join(map(str, part))}: best mu={best.actions} value(2)={best.value_state2:.4f} gap={rep.v_star[2] - best.value_state2:.4f}")
    bad = rep.counterexamples()
    lines.append(f"every memoryless policy strictly below v*(2): {'yes' if not bad else 'no'}")
    for r in bad:
        lines.append(f"  reaches v*(2): partition {''.join(map(str, r.partition))} mu={r.actions} value(2)={r.value_state2:.4f}")
    return "\n".join(lines)
