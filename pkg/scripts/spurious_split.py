"""Seed sweep of ls on biased synthetic data; prints one JSON row per seed and a summary."""
import argparse
import json
from dataclasses import asdict

import numpy as np

from lsplit.experiments import spurious_split_run


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--n", type=int, default=2000)
    ap.add_argument("--rho", type=float, default=0.9)
    ap.add_argument("--random-splits", type=int, default=5)
    args = ap.parse_args()
    runs = []
    for s in range(args.seeds):
        r = spurious_split_run(s, n=args.n, rho=args.rho, n_random=args.random_splits)
        runs.append(r)
        print(json.dumps(asdict(r)), flush=True)
    keys = ("gap", "random_gap", "split_ratio", "label_tv", "minority_in_test")
    print(json.dumps({k: float(np.mean([getattr(r, k) for r in runs])) for k in keys}))


if __name__ == "__main__":
    main()
