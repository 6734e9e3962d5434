"""Cumulative reward and per-step time of every policy on one desk-scale setup.

    python3 scripts/desk_benchmark.py --T 20000 --reps 5 --out bench.json
"""

import argparse
import json

from rpbandit.experiment import POLICIES, ExperimentConfig, run_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--T", type=int, default=20_000)
    ap.add_argument("--reps", type=int, default=5)
    ap.add_argument("--n", type=int, default=120)
    ap.add_argument("--d", type=int, default=24)
    ap.add_argument("--arms", type=int, default=50)
    ap.add_argument("--context-gen", default="latent")
    ap.add_argument("--R", type=float, default=0.01)
    ap.add_argument("--epsilon", type=float, default=0.01)
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--policies", default=",".join(POLICIES))
    ap.add_argument("--out", default=None)
    a = ap.parse_args()

    rows = []
    for policy in a.policies.split(","):
        cfg = ExperimentConfig(policy=policy, T=a.T, repetitions=a.reps, base_seed=a.seed, n=a.n, d=a.d,
                               arms=a.arms, context_gen=a.context_gen, jitter=0.3, R=a.R, epsilon=a.epsilon,
                               checkpoints=(a.T,))
        rep = run_experiment(cfg)
        agg, timing = rep.aggregates(), rep.timing()
        row = {"policy": policy,
               "cr": agg["average_cumulative_reward"],
               "regret": agg["average_cumulative_regret"],
               "cr_per_rep": [r.cumulative_reward for r in rep.repetitions],
               "total_s": timing["average_total_ns"] / 1e9}
        rows.append(row)
        print(f"{policy:10s} CR {row['cr']:9.1f}  regret {row['regret']:9.1f}  time {row['total_s']:7.2f}s")
    if a.out:
        with open(a.out, "w") as fh:
            json.dump({"args": vars(a), "rows": rows}, fh, indent=1)


if __name__ == "__main__":
    main()
