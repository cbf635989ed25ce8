"""Split one class at a time on random MDPs and count how often eps, delta or the
value gap grow under refinement."""
import argparse

import numpy as np

from aislab.ais import measure_eps_delta, quantizer_ais
from aislab.ais_dp import delta_gap, solve_ais_dp
from aislab.mdp import random_mdp


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--instances", type=int, default=200)
    ap.add_argument("--states", type=int, default=6)
    ap.add_argument("--ipm", default="tv")
    args = ap.parse_args()
    grew = {"eps": 0, "delta": 0, "gap": 0}
    steps = 0
    for seed in range(args.instances):
        rng = np.random.default_rng(seed)
        mdp = random_mdp(args.states, 2, seed)
        part = np.zeros(args.states, dtype=int)
        prev = None
        for k in range(1, args.states):
            gen = quantizer_ais(mdp, part)
            ed = measure_eps_delta(mdp, gen, args.ipm)
            cur = (ed.eps, ed.delta, delta_gap(mdp, gen, solve_ais_dp(gen, mdp)))
            if prev is not None:
                steps += 1
                for key, a, b in zip(grew, prev, cur):
                    grew[key] += b > a + 1e-9
            prev = cur
            cls = rng.choice([c for c in range(k) if (part == c).sum() > 1])
            members = np.flatnonzero(part == cls)
            rng.shuffle(members)
            part[members[: rng.integers(1, len(members))]] = k
    print(f"{steps} refinements; increases: " + ", ".join(f"{k} {v}" for k, v in grew.items()))


if __name__ == "__main__":
    main()
