"""Group DRO over learned (y, z) groups against ERM, scored on balanced true groups."""
import argparse
import json
from dataclasses import asdict

import numpy as np

from lsplit.experiments import debias_run


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--rho", type=float, default=0.9)
    args = ap.parse_args()
    runs = [debias_run(s, rho=args.rho) for s in range(args.seeds)]
    for r in runs:
        print(json.dumps(asdict(r)))
    erm = float(np.mean([r.erm_worst for r in runs]))
    dro = float(np.mean([r.dro_worst for r in runs]))
    print(json.dumps({"erm_worst": erm, "dro_worst": dro, "improvement": dro - erm}))


if __name__ == "__main__":
    main()
