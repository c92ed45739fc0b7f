"""Command line: ``ffcp gen-data | run | bench``.

A run is described by a JSON config file (fields of ``RunConfig``); any
flag given on the command line overrides the file.  Reports go to
``--out``, or to ``$FFCP_OUTPUT_DIR`` (default: current directory).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import bench
from .data import DataError, gen_synthetic, gen_synthetic_hetero, save_csv
from .experiments import ALL_METHODS, RunConfig, gen_classification, run

log = logging.getLogger("ffcp")

OUTPUT_DIR_ENV = "FFCP_OUTPUT_DIR"


def _split_arg(text: str):
    return text if text == "sweep" else int(text)


def _add_run_flags(p: argparse.ArgumentParser, multi: bool) -> None:
    p.add_argument("--config", help="JSON run config; flags override its values")
    if multi:
        p.add_argument("--methods", help="comma-separated methods")
        p.add_argument("--seeds", help="comma-separated seeds, or a count like 10")
    else:
        p.add_argument("--method", choices=ALL_METHODS)
        p.add_argument("--seed", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--split-index", type=_split_arg, dest="split_index",
                   help="layer index or 'sweep'")
    p.add_argument("--dataset", choices=("synthetic", "synthetic-hetero", "classes", "csv"))
    p.add_argument("--n", type=int)
    p.add_argument("--d-x", type=int, dest="d_x")
    p.add_argument("--csv", dest="csv_path")
    p.add_argument("--targets", help="comma-separated target columns for --csv")
    p.add_argument("--ratios", help="train,cal,test fractions")
    p.add_argument("--untrained", action="store_true", default=None)
    p.add_argument("--epochs", type=int)
    p.add_argument("--n-samples", type=int, dest="n_samples",
                   help="ball samples for FCP band estimation")
    p.add_argument("--format", choices=("json", "csv", "markdown"))
    p.add_argument("--out", dest="output")
    p.add_argument("--print-config", action="store_true",
                   help="print the effective config as JSON and exit")


def build_config(args) -> RunConfig:
    base = {}
    if args.config:
        try:
            base = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ValueError(f"cannot read config {args.config}: {exc}") from exc
        base.pop("methods", None)
        base.pop("seeds", None)
    cfg = RunConfig.from_dict(base)
    for name in ("method", "seed", "alpha", "split_index", "dataset", "n", "d_x",
                 "csv_path", "untrained", "format", "output"):
        value = getattr(args, name, None)
        if value is not None:
            setattr(cfg, name, value)
    if args.targets:
        cfg.targets = [t for t in args.targets.split(",") if t]
    if args.ratios:
        cfg.ratios = tuple(float(r) for r in args.ratios.split(","))
    if args.epochs is not None:
        cfg.train = {**cfg.train, "epochs": args.epochs}
    if args.n_samples is not None:
        cfg.estimator = {**cfg.estimator, "n_samples": args.n_samples}
    if args.csv_path:
        cfg.dataset = "csv"
    cfg.validate()
    return cfg


def _output_path(cfg_output, default_name: str) -> Path:
    if cfg_output:
        return Path(cfg_output)
    return Path(os.environ.get(OUTPUT_DIR_ENV, ".")) / default_name


def cmd_gen_data(args) -> int:
    if args.kind == "synthetic":
        ds = gen_synthetic(args.n, args.d_x, seed=args.seed)
    elif args.kind == "synthetic-hetero":
        ds = gen_synthetic_hetero(args.n, args.d_x, seed=args.seed)
    else:
        ds = gen_classification(args.n, seed=args.seed)
    save_csv(ds, args.out)
    print(f"wrote {len(ds)} rows x {ds.features.shape[1]} features "
          f"(+{ds.targets.shape[1]} target) to {args.out}")
    return 0


def cmd_run(args) -> int:
    cfg = build_config(args)
    if args.print_config:
        print(json.dumps(cfg.to_dict(), indent=2))
        return 0
    reports = run(cfg)
    ext = {"json": "json", "csv": "csv", "markdown": "md"}[cfg.format]
    path = _output_path(cfg.output, f"report_{cfg.method}_{cfg.seed}.{ext}")
    bench.emit_report(reports, cfg.format, path)
    for r in reports:
        split = "-" if r.split_index is None else r.split_index
        print(f"{r.method:>12} split={split} coverage={r.coverage:.4f} "
              f"length={r.mean_length:.4f} time={r.runtime_seconds:.4f}s")
    print(f"report: {path}")
    return 0


def _parse_seeds(text) -> list:
    if text is None:
        return list(range(10))
    if isinstance(text, list):
        return [int(s) for s in text]
    parts = [p for p in str(text).split(",") if p]
    if len(parts) == 1:
        return list(range(int(parts[0])))
    return [int(p) for p in parts]


def _run_one(cfg_dict):
    return run(RunConfig.from_dict(cfg_dict))


def cmd_bench(args) -> int:
    file_cfg = {}
    if args.config:
        file_cfg = json.loads(Path(args.config).read_text())
    methods = (args.methods.split(",") if args.methods
               else file_cfg.get("methods", ["vanilla", "fcp", "ffcp"]))
    seeds = _parse_seeds(args.seeds if args.seeds else file_cfg.get("seeds"))
    args.method = methods[0]
    args.seed = seeds[0]
    cfg = build_config(args)
    if args.print_config:
        print(json.dumps({**cfg.to_dict(), "methods": methods, "seeds": seeds}, indent=2))
        return 0
    jobs = []
    for m in methods:
        if m not in ALL_METHODS:
            raise ValueError(f"invalid run config: unknown method {m!r}")
        for s in seeds:
            jobs.append({**cfg.to_dict(), "method": m, "seed": s})
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            results = list(pool.map(_run_one, jobs))
    else:
        results = [_run_one(j) for j in jobs]
    reports = [r for rs in results for r in rs]
    out_dir = Path(cfg.output) if cfg.output else Path(os.environ.get(OUTPUT_DIR_ENV, "."))
    out_dir.mkdir(parents=True, exist_ok=True)
    bench.emit_report(reports, "json", out_dir / "bench.json")
    bench.emit_report(reports, "markdown", out_dir / "bench.md")
    print(bench.markdown_tables(reports))
    print(f"reports: {out_dir / 'bench.json'}, {out_dir / 'bench.md'}")
    return 0


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ffcp", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a generated dataset as CSV")
    g.add_argument("--kind", choices=("synthetic", "synthetic-hetero", "classes"),
                   default="synthetic")
    g.add_argument("--n", type=int, default=10000)
    g.add_argument("--d-x", type=int, default=100, dest="d_x")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    r = sub.add_parser("run", help="train a model and run one method")
    _add_run_flags(r, multi=False)
    r.set_defaults(func=cmd_run)

    b = sub.add_parser("bench", help="methods x seeds, aggregated into tables")
    _add_run_flags(b, multi=True)
    b.add_argument("--jobs", type=int, default=1)
    b.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, DataError, OSError) as exc:
        print(f"ffcp: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
