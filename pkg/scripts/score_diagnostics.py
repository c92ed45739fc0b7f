"""Score-level diagnostics on one trained synthetic model.

Prints the FCP/FFCP calibration-score correlation per split and the
square-condition report (|Q - s| in output space vs gradient-normalized
space).  Writes the raw score pairs as CSV for external plotting.
"""

import argparse
import csv
from pathlib import Path

import numpy as np

from ffcp import bench, experiments
from ffcp.data import gen_synthetic


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--n", type=int, default=10000)
    ap.add_argument("--alpha", type=float, default=0.1)
    ap.add_argument("--out", default="results")
    args = ap.parse_args()

    folds = experiments.make_folds(gen_synthetic(args.n, seed=args.seed), args.seed)
    base = experiments.fit_regressor(folds, 0, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for split in range(1, base.n_layers):
        model = base.with_split(split)
        van = experiments.run_regression_method("vanilla", model, folds, args.alpha)
        ff = experiments.run_regression_method("ffcp", model, folds, args.alpha)
        fc = experiments.run_regression_method("fcp", model, folds, args.alpha)
        s_ff, s_fc = np.ravel(ff.cal_scores), np.ravel(fc.cal_scores)
        r = bench.score_correlation(s_fc, s_ff)
        o, f, exp = bench.square_condition_check(np.ravel(van.cal_scores), s_ff, args.alpha)
        print(f"split {split}: r(fcp, ffcp) = {r:.4f}")
        print(f"  output  Q={o.quantile:.4f} M|Q-s|={o.mean_abs_gap:.4f} "
              f"rel={o.mean_abs_gap_relative:.4f} Q std={o.quantile_std:.4f}")
        print(f"  feature Q={f.quantile:.4f} M|Q-s|={f.mean_abs_gap:.4f} "
              f"rel={f.mean_abs_gap_relative:.4f} Q std={f.quantile_std:.4f}")
        print(f"  expansion lhs={exp['lhs']:.4f} rhs={exp['rhs']:.4f} holds={exp['holds']}")
        with (out / f"scores_split{split}.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["fcp", "ffcp", "vanilla"])
            w.writerows(zip(s_fc, s_ff, np.ravel(van.cal_scores)))


if __name__ == "__main__":
    main()
