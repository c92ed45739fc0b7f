"""Synthetic-data tables: coverage / length / time per method, plus the
FCP vs FFCP time ratio and the untrained-model control.

    python3 scripts/reproduce_tables.py --seeds 10 --out results/
"""

import argparse
import dataclasses
from pathlib import Path

from ffcp import bench
from ffcp.experiments import RunConfig, run

METHODS = ("vanilla", "ffcp", "fcp", "cqr", "ffcqr", "lcp", "fflcp")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--n", type=int, default=10000)
    ap.add_argument("--alpha", type=float, default=0.1)
    ap.add_argument("--dataset", default="synthetic",
                    choices=("synthetic", "synthetic-hetero"))
    ap.add_argument("--methods", default=",".join(METHODS))
    ap.add_argument("--out", default="results")
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    base = RunConfig(dataset=args.dataset, n=args.n, alpha=args.alpha)
    reports, untrained = [], []
    for method in args.methods.split(","):
        for seed in range(args.seeds):
            reports += run(dataclasses.replace(base, method=method, seed=seed))
            print(f"{method} seed {seed}: {reports[-1].coverage:.4f} "
                  f"{reports[-1].mean_length:.4f}", flush=True)
    for method in ("vanilla", "ffcp"):
        for seed in range(args.seeds):
            untrained += run(dataclasses.replace(base, method=method, seed=seed,
                                                 untrained=True))

    bench.emit_report(reports, "json", out / f"{args.dataset}_methods.json")
    bench.emit_report(untrained, "json", out / f"{args.dataset}_untrained.json")
    text = "## trained\n\n" + bench.markdown_tables(reports)
    text += "\n## untrained\n\n" + bench.markdown_tables(untrained)
    (out / f"{args.dataset}_tables.md").write_text(text)
    print(text)


if __name__ == "__main__":
    main()
