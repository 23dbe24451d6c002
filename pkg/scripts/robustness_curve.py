#!/usr/bin/env python3
"""Sign-attack error curve for a finished run directory, across epsilon values."""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from automix import cli, metrics


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("run_dir", help="run directory containing manifest and checkpoints")
    parser.add_argument("--epsilons", default="0,0.00784313725490196,0.03137254901960784",
                        help="comma list in pixel units (defaults to 0, 2/255, 8/255)")
    parser.add_argument("--params", default="student", choices=("student", "teacher"))
    args = parser.parse_args()

    run_dir = Path(args.run_dir)
    train_cfg, data_cfg, params, stats = cli._load_eval_bundle(run_dir, args.params)
    _, eval_ds = cli.build_datasets(data_cfg)

    print(f"{'epsilon':>12} {'error':>10}")
    for eps in (float(v) for v in args.epsilons.split(",")):
        error = metrics.fgsm_error(params, eval_ds.images, eval_ds.labels, eps,
                                   train_cfg.encoder, stats=stats)
        print(f"{eps:>12.6f} {error:>10.4f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
