"""Four-mode ablation (plus the GT-warp arm) on the synthetic face set.

    python scripts/run_ablation.py --seeds 5 --out results/ablation.csv
"""

import argparse
import logging
import time
from pathlib import Path

from kptransfer.evaluation import (
    ALL_MODES,
    SyntheticSetup,
    ablation_csv,
    median_failure,
    run_modes,
    synthetic_transfer_data,
)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--n-train", type=int, default=SyntheticSetup.n_train)
    ap.add_argument("--modes", default=",".join(ALL_MODES))
    ap.add_argument("--out", default="results/ablation.csv")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)

    t0 = time.perf_counter()
    data = synthetic_transfer_data(SyntheticSetup(n_train=args.n_train))
    res = run_modes(data, seeds=range(args.seeds), modes=tuple(args.modes.split(",")))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(ablation_csv(res))
    for mode, rs in res.items():
        print(f"{mode:8s} median failure {100 * median_failure(rs):6.2f}%  "
              + " ".join(f"{100 * r.average_failure:.2f}" for r in rs))
    print(f"wrote {out} in {time.perf_counter() - t0:.0f}s")


if __name__ == "__main__":
    main()
