"""Reward against per-step cost as the reduced dimension d varies.

Runs BCMAB-RP and CBRAP for each d and Linear TS once at full n, on the same
seeds, and prints cumulative reward and mean per-step microseconds.
"""

import argparse

import numpy as np

from rpbandit.experiment import ExperimentConfig, run_experiment


def run(policy, d, a):
    cfg = ExperimentConfig(policy=policy, T=a.T, repetitions=a.reps, base_seed=a.seed, n=a.n, d=d,
                           arms=a.arms, context_gen="latent", jitter=0.3, R=a.R, epsilon=a.epsilon,
                           checkpoints=(a.T,))
    rep = run_experiment(cfg)
    step_us = np.mean([r.total_ns / r.rounds for r in rep.repetitions]) / 1e3
    return rep.aggregates()["average_cumulative_reward"], step_us


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--T", type=int, default=10_000)
    ap.add_argument("--reps", type=int, default=3)
    ap.add_argument("--n", type=int, default=120)
    ap.add_argument("--arms", type=int, default=50)
    ap.add_argument("--d-list", default="4,8,16,24,48")
    ap.add_argument("--R", type=float, default=0.01)
    ap.add_argument("--epsilon", type=float, default=0.01)
    ap.add_argument("--seed", type=int, default=1)
    a = ap.parse_args()
    print(f"{'policy':10s} {'d':>4} {'CR':>9} {'us/step':>8}")
    for d in [int(v) for v in a.d_list.split(",")]:
        for policy in ("bcmab-rp", "cbrap"):
            cr, us = run(policy, d, a)
            print(f"{policy:10s} {d:4d} {cr:9.1f} {us:8.1f}")
    cr, us = run("linear-ts", a.n, a)
    print(f"{'linear-ts':10s} {a.n:4d} {cr:9.1f} {us:8.1f}")


if __name__ == "__main__":
    main()
