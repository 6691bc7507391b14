#!/usr/bin/env python3
"""Unattended full-scale 118-bus pipeline (long-running).

Reproduces the large-system protocol end to end on the bundled 118-bus
case: 10,000 training / 1,000 test samples, 200 epochs, w1=1, w2=0.1,
256/128 hidden layers, then a timed evaluation with warm-start recovery.
Expect several hours on a desktop core; intermediate artifacts land in
--out-dir so the run can be inspected while it progresses.

Usage: python scripts/full_scale_118.py --out-dir runs/full118 [--workers N]
"""

import argparse
import sys
from pathlib import Path

from deepsolve.cli import main as cli


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out-dir", default="runs/full118")
    ap.add_argument("--workers", type=int, default=None)
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()

    out = Path(args.out_dir)
    data = out / "data"
    model = out / "model118.ckpt"
    report = out / "report.csv"
    workers = ["--workers", str(args.workers)] if args.workers else []

    steps = [
        ["gen-data", "--case", "case118", "--train-count", "10000",
         "--test-count", "1000", "--range", "0.9:1.1", "--seed", str(args.seed),
         "--out-dir", str(data), *workers],
        ["train", "--case", "case118", "--data-dir", str(data), "--hidden", "256/128",
         "--epochs", "200", "--batch", "32", "--w1", "1", "--w2", "0.1",
         "--seed", str(args.seed + 1), "--out", str(model)],
        ["eval", "--model", str(model), "--case", "case118", "--data-dir", str(data),
         "--recover", "--report", str(report),
         "--dump-comparison", str(out / "comparison.csv")],
    ]
    for step in steps:
        print("+ deepsolve " + " ".join(step), flush=True)
        rc = cli(step)
        if rc != 0:
            return rc
    return 0


if __name__ == "__main__":
    sys.exit(main())
