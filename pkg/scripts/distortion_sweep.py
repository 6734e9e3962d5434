"""Violation fraction of the projected inner product against the Gaussian tail bound."""

import argparse

from rpbandit.experiment import distortion_sweep


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n", type=int, default=50)
    ap.add_argument("--d-list", default="4,8,16,32,64,128,256,512")
    ap.add_argument("--epsilon", type=float, default=0.5)
    ap.add_argument("--trials", type=int, default=20_000)
    ap.add_argument("--seed", type=int, default=0)
    a = ap.parse_args()
    print(f"{'d':>5} {'violations':>11} {'bound':>9}")
    for row in distortion_sweep(a.n, [int(v) for v in a.d_list.split(",")], a.epsilon, a.trials, a.seed):
        print(f"{row['d']:5d} {row['violation_fraction']:11.4f} {min(row['bound'], 1.0):9.4f}")


if __name__ == "__main__":
    main()
