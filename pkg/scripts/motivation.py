"""History-based AIS actor-critic against a memoryless 2-feature actor-critic on the
toy MDP. Prints per-seed evaluation returns and the median/IQR of each agent."""
import argparse
import time

import numpy as np

from aislab.train import TrainConfig, evaluate, make_env, train_loop


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--iterations", type=int, default=1000)
    ap.add_argument("--partition", default="1001", help="memoryless partition, one digit per state")
    args = ap.parse_args()
    env = make_env("toy")
    part = tuple(int(c) for c in args.partition)
    for agent in ("ais-ac", "memoryless"):
        cfg = TrainConfig(agent=agent, gamma=0.95, partition=part, iterations=args.iterations, batch_size=32, reward_scale=0.001)
        t0 = time.perf_counter()
        scores = [evaluate(train_loop(env, cfg, s).agent, env, 2000, 100, cfg.gamma, s) for s in range(args.seeds)]
        q25, med, q75 = np.percentile(scores, [25, 50, 75])
        print(f"{agent:10s} median {med:8.2f}  IQR [{q25:8.2f}, {q75:8.2f}]  ({time.perf_counter() - t0:.0f}s)")
        print("           " + " ".join(f"{s:.1f}" for s in scores))


if __name__ == "__main__":
    main()
