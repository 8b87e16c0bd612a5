"""Predicted warps against the ground-truth-warp oracle arm, over several seeds."""

import argparse
import json

from kptransfer.evaluation import (
    SyntheticSetup,
    median_failure,
    run_gt_warp_protocol,
    synthetic_transfer_data,
)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--n-train", type=int, default=SyntheticSetup.n_train)
    args = ap.parse_args()

    data = synthetic_transfer_data(SyntheticSetup(n_train=args.n_train))
    ours, gt = run_gt_warp_protocol(data, seeds=range(args.seeds))
    print(json.dumps({
        "ours": [r.average_failure for r in ours],
        "gt_warp": [r.average_failure for r in gt],
        "median_ours": median_failure(ours),
        "median_gt_warp": median_failure(gt),
    }, indent=2))


if __name__ == "__main__":
    main()
