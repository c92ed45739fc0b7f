"""FFCP band length and coverage at every split layer, averaged over seeds.

    python3 scripts/split_sweep.py --dataset synthetic-hetero --seeds 10
"""

import argparse
import dataclasses
from pathlib import Path

from ffcp import bench
from ffcp.experiments import RunConfig, run


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--dataset", default="synthetic-hetero",
                    choices=("synthetic", "synthetic-hetero"))
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--n", type=int, default=10000)
    ap.add_argument("--out", default="results")
    args = ap.parse_args()

    base = RunConfig(dataset=args.dataset, n=args.n, split_index="sweep")
    reports = []
    for seed in range(args.seeds):
        reports += run(dataclasses.replace(base, method="vanilla", seed=seed,
                                           split_index=0))
        reports += run(dataclasses.replace(base, method="ffcp", seed=seed))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    bench.emit_report(reports, "json", out / f"{args.dataset}_sweep.json")
    print(bench.markdown_tables(reports))


if __name__ == "__main__":
    main()
