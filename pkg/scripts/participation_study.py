#!/usr/bin/env python3
"""Participation study: rounds needed to push the gradient norm under a target.

Sweeps the number of participating clients on a noisy quadratic and reports
the median number of rounds (over seeds) until ||grad f(x_t)||^2 drops below
the threshold, the empirical speedup trend.

Example:
    python scripts/participation_study.py --participate 2,5,10,20 --seeds 0,1,2,3,4
"""

import argparse

import numpy as np

from fedsim.algorithms import MimHyper
from fedsim.simulator import ProblemConfig, RunConfig, run_training


def parse_args():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--clients", type=int, default=20)
    p.add_argument("--dim", type=int, default=8)
    p.add_argument("--heterogeneity", type=float, default=0.1)
    p.add_argument("--sigma-l", type=float, default=0.1)
    p.add_argument("--participate", default="2,5,10,20")
    p.add_argument("--k-local", type=int, default=5)
    p.add_argument("--eta-l", type=float, default=0.05)
    p.add_argument("--rounds", type=int, default=2800)
    p.add_argument("--threshold", type=float, default=1e-4)
    p.add_argument("--seeds", default="0,1,2,3,4")
    return p.parse_args()


def rounds_to_threshold(args, s_participate, seed):
    cfg = RunConfig(
        problem=ProblemConfig(kind="quadratic", n_clients=args.clients, dim=args.dim,
                              heterogeneity=args.heterogeneity, sigma_l=args.sigma_l),
        algorithm="fedmim",
        hyper=MimHyper(eta_l=args.eta_l, k_local=args.k_local, s_participate=s_participate),
        rounds=args.rounds, master_seed=seed)
    for row in run_training(cfg).rows:
        if row.grad_norm_sq <= args.threshold:
            return row.round
    return args.rounds + 1  # censored


def main():
    args = parse_args()
    seeds = [int(s) for s in args.seeds.split(",")]
    print(f"{'S':>4}  {'median rounds':>13}  per-seed")
    for s_str in args.participate.split(","):
        s = int(s_str)
        per_seed = [rounds_to_threshold(args, s, seed) for seed in seeds]
        print(f"{s:>4}  {np.median(per_seed):>13.0f}  {per_seed}")


if __name__ == "__main__":
    main()
