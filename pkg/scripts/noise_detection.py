"""Label-noise detection on 10-class blobs at several noise rates."""
import argparse
import json

from lsplit.experiments import noise_detection_run


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--etas", default="0.1,0.3,0.7")
    ap.add_argument("--n", type=int, default=5000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    for eta in (float(e) for e in args.etas.split(",")):
        report, state, traces = noise_detection_run(eta, seed=args.seed, n=args.n)
        print(json.dumps({"eta": eta, "split_ratio": state.split_ratio,
                          "outer_iters": len(traces), **report.to_json()}), flush=True)


if __name__ == "__main__":
    main()
