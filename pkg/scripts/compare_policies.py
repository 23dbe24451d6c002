#!/usr/bin/env python3
"""Desk-scale policy comparison: trains every (policy, seed) cell on the shared
synthetic dataset and prints the mean/std of the median-of-last-10-epochs top-1."""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from automix.cli import DataConfig, make_run_dir, run_comparison
from automix.trainer import POLICIES, TrainConfig


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--policies", default=",".join(POLICIES))
    parser.add_argument("--seeds", default="0,1,2")
    parser.add_argument("--epochs", type=int, default=30)
    parser.add_argument("--n-per-class", type=int, default=500)
    parser.add_argument("--image-size", type=int, default=64)
    parser.add_argument("--base-lr", type=float, default=0.03)
    parser.add_argument("--jobs", type=int, default=2)
    parser.add_argument("--out-dir", default="runs")
    args = parser.parse_args()

    cfg = TrainConfig(policy="automix", epochs=args.epochs, base_lr=args.base_lr)
    data_cfg = DataConfig(kind="synthetic", n_per_class=args.n_per_class,
                          image_size=args.image_size, classes=4,
                          eval_per_class=max(args.n_per_class // 5, 20))
    out_dir = make_run_dir(Path(args.out_dir), "compare")
    summary = run_comparison(cfg, data_cfg, args.policies.split(","),
                             [int(s) for s in args.seeds.split(",")], out_dir,
                             jobs=args.jobs)
    print(f"\n{'policy':<10} {'mean':>8} {'std':>8}   medians")
    for row in summary:
        medians = " ".join(f"{m:.4f}" for m in row["medians"])
        print(f"{row['policy']:<10} {row['mean']:>8.4f} {row['std']:>8.4f}   {medians}")
    print(f"\nper-cell runs and summary.csv in {out_dir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
