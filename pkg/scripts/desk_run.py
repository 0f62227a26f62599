#!/usr/bin/env python3
"""Full desk experiment: corpus -> pretraining -> TCL and CL grounders -> val mIoU.

Example::

    python3 scripts/desk_run.py --out runs/desk --collapse

Runs after pretraining go in parallel, one process per core (``--jobs``).
A summary is printed and written to ``OUT/summary.tsv``.
"""
import argparse
from pathlib import Path

from tclseg.desk import COLLAPSE_RUN, DEFAULT_RUNS, run_desk


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--out", type=Path, default=Path("runs/desk"))
    ap.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                    help="config override applied to every stage")
    ap.add_argument("--jobs", type=int, help="concurrent grounder runs (default: CPU count)")
    ap.add_argument("--collapse", action="store_true", help="also train with lambda_area = 0")
    ap.add_argument("--reuse", action="store_true", help="reuse an existing corpus and encoder")
    args = ap.parse_args()
    runs = dict(DEFAULT_RUNS)
    if args.collapse:
        runs.update(COLLAPSE_RUN)
    res = run_desk(args.out, args.overrides, runs, args.jobs, args.out / "desk.log", args.reuse)
    text = res.summary()
    (args.out / "summary.tsv").write_text(text)
    print(text, end="")
    if "tcl" in res.runs and "cl" in res.runs:
        gap = 100 * (res.runs["tcl"].miou - res.runs["cl"].miou)
        print(f"TCL - CL: {gap:+.1f} mIoU points")


if __name__ == "__main__":
    main()
