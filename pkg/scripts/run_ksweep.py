"""Failure rate of the full system as a function of the neighbor count K."""

import argparse
from pathlib import Path

from kptransfer.evaluation import SyntheticSetup, ksweep_csv, run_k_sweep, synthetic_transfer_data


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--k", default="1,3,5,7,10,15", help="comma-separated K values")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--n-train", type=int, default=SyntheticSetup.n_train)
    ap.add_argument("--out", default="results/ksweep.csv")
    args = ap.parse_args()

    data = synthetic_transfer_data(SyntheticSetup(n_train=args.n_train))
    res = run_k_sweep(data, [int(k) for k in args.k.split(",")], seed=args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(ksweep_csv(res))
    print(out.read_text(), end="")


if __name__ == "__main__":
    main()
