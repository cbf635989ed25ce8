"""Sample-based eps/delta estimates for the exact (identity) model on the toy MDP,
as a function of the number of rollouts."""
import argparse

from aislab.ais import TabularLookup, identity_generator, measure_eps_delta_empirical
from aislab.mdp import toy_mdp


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--horizon", type=int, default=12)
    ap.add_argument("--seeds", type=int, default=5)
    args = ap.parse_args()
    mdp = toy_mdp()
    gen = TabularLookup(identity_generator(mdp))
    print("rollouts,seed,transitions,bins,eps_hat,delta_hat")
    for n in (100, 1000, 10000):
        for seed in range(args.seeds):
            r = measure_eps_delta_empirical(mdp, gen, n, horizon=args.horizon, seed=seed)
            print(f"{n},{seed},{r.n_transitions},{r.n_bins},{r.eps_hat:.4g},{r.delta_hat:.4g}")


if __name__ == "__main__":
    main()
