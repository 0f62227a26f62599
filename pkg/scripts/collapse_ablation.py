#!/usr/bin/env python3
"""Area-prior ablation: positive-mask area over training with and without the prior.

Reuses the corpus and encoder of an existing workspace (see desk_run.py) and
trains one grounder per ``lambda_area`` value, printing the mean positive and
negative mask area over the final 100 steps.

    python3 scripts/collapse_ablation.py --out runs/desk --lambdas 0 0.4
"""
import argparse
from pathlib import Path

from tclseg.desk import run_desk


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--out", type=Path, default=Path("runs/desk"))
    ap.add_argument("--lambdas", type=float, nargs="+", default=[0.0, 0.4])
    ap.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    ap.add_argument("--jobs", type=int)
    args = ap.parse_args()
    runs = {f"area-{lam:g}": (f"train.lambda_area={lam}",) for lam in args.lambdas}
    res = run_desk(args.out, args.overrides, runs, args.jobs, args.out / "collapse.log",
                   reuse_pretrain=True)
    print("lambda_area\tpos_area\tneg_area\tmiou")
    for lam in args.lambdas:
        r = res.runs[f"area-{lam:g}"]
        print(f"{lam:g}\t{r.final_pos_area:.4f}\t{r.final_neg_area:.4f}\t{r.miou:.4f}")


if __name__ == "__main__":
    main()
