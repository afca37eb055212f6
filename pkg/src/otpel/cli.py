"""Command-line entry point: ``otpel <command> ...``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import config as config_mod
from . import experiment as ex
from .errors import OtpelError
from .train import DISTANCES_HEADER, METRICS_HEADER

SCHEMAS = f"""\
output files (under [run] out_dir):
  backbone.bin, source.bin, target.bin   pretrain
  bank.bin                               bank
  runs/<slug>/pel.bin, metrics.csv,
    run.json, distances.csv              adapt
  runs/<slug>/results.csv, eval.json     eval
  report.csv, report.txt, mcd.png        report --out

csv schemas:
  metrics.csv    {",".join(METRICS_HEADER)}
                 one row per step; distance columns filled once per epoch
  distances.csv  {",".join(DISTANCES_HEADER)}
  results.csv    {",".join(ex.evaluate.RESULTS_HEADER)}

figures (PNG, skipped with --no-plot) are written next to the CSV they plot.
the environment variable {config_mod.SEED_ENV} overrides [run] seed.
"""


def _config(args):
    return config_mod.load(args.config)


def _cells(args) -> list:
    if args.grid:
        return list(ex.GRID)
    if args.method is None:
        raise SystemExit("adapt: give --method (or --grid)")
    if args.method in ex.FT_METHODS:
        metric = None
    else:
        metric = None if args.no_ot else args.metric
    return [ex.Cell(args.method, metric)]


def cmd_init(args) -> int:
    path = Path(args.config)
    if path.exists() and not args.force:
        print(f"{path} exists; pass --force to overwrite", file=sys.stderr)
        return 1
    path.write_text(config_mod.RunConfig().to_ini())
    print(path)
    return 0


def cmd_pretrain(args) -> int:
    summary = ex.run_pretrain(_config(args))
    for key in ("source_heldout_mae", "target_heldout_mae", "backbone_params"):
        print(f"{key}: {summary[key]}")
    return 0


def cmd_bank(args) -> int:
    bank = ex.run_bank(_config(args))
    for tap in bank.taps:
        print(f"tap {tap}: {bank[tap].shape[0]} frames x {bank[tap].shape[1]}")
    return 0


def cmd_adapt(args) -> int:
    rc = _config(args)
    cells = _cells(args)
    if args.grid:
        for row in ex.run_grid(rc, cells, jobs=args.jobs, plot=not args.no_plot):
            print(f"{row['label']:<16} target MAE {row['heldout_target_mae']:.4f}  ratio {row['ratio']:.4%}")
        return 0
    for cell in cells:
        row = ex.run_adapt(rc, cell, plot=not args.no_plot)
        print(f"{row['label']}: target MAE {row['frozen_target_mae']:.4f} -> {row['heldout_target_mae']:.4f}")
        print(ex.run_dir(rc, cell))
    return 0


def cmd_eval(args) -> int:
    rc = _config(args)
    for directory in args.run_dirs:
        row = ex.run_eval(rc, directory)
        print(f"{row['method']}: MCD {row['mcd_mean']:.3f} ± {row['mcd_std']:.3f} dB")
    return 0


def cmd_report(args) -> int:
    rep = ex.run_report(args.run_dirs, args.out, plot=not args.no_plot)
    print(rep.table())
    return 0 if rep.rows else 1


def cmd_distances(args) -> int:
    for directory in args.run_dirs:
        print(ex.run_distances(directory, plot=not args.no_plot))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="otpel",
        description="Parameter-efficient adaptation of a frozen miniature TTS backbone with an OT regularizer.",
        epilog=SCHEMAS,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text, config=True):
        p = sub.add_parser(name, help=help_text, description=help_text, epilog=SCHEMAS,
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        if config:
            p.add_argument("config", help="run config file (INI)")
        p.set_defaults(fn=fn)
        return p

    p = add("init", cmd_init, "write a config file holding every default")
    p.add_argument("--force", action="store_true")

    add("pretrain", cmd_pretrain, "generate corpora and pretrain the backbone")
    add("bank", cmd_bank, "build the source feature bank from the frozen backbone")

    p = add("adapt", cmd_adapt, "adapt one method (or the full grid) on the target split")
    p.add_argument("--method", choices=ex.ADAPT_METHODS)
    p.add_argument("--metric", choices=ex.METRIC_CHOICES, default="SWD")
    p.add_argument("--no-ot", action="store_true", help="train without the OT term")
    p.add_argument("--grid", action="store_true", help="run all 11 method/metric cells, then eval each")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for --grid")
    p.add_argument("--no-plot", action="store_true")

    p = add("eval", cmd_eval, "MCD on the held-out target split; writes results.csv")
    p.add_argument("run_dirs", nargs="+", type=Path)

    p = add("report", cmd_report, "aggregate results.csv files into one table", config=False)
    p.add_argument("run_dirs", nargs="+", type=Path)
    p.add_argument("--out", type=Path, help="directory for report.csv, report.txt and mcd.png")
    p.add_argument("--no-plot", action="store_true")

    p = add("distances", cmd_distances, "write per-epoch before/after distances", config=False)
    p.add_argument("run_dirs", nargs="+", type=Path)
    p.add_argument("--no-plot", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.fn(args)
    except OtpelError as exc:
        print(f"otpel: error [{exc.code}]: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
