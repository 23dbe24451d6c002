#!/usr/bin/env python3
"""Train only the mask generator against a frozen random encoder and report how
closely the spatial mask mean tracks the requested mixing ratio."""

import argparse
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from automix import data, mixblock, models, trainer
from automix.trainer import TrainConfig

GRID = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--steps", type=int, default=500)
    parser.add_argument("--lr", type=float, default=1.0)
    parser.add_argument("--gamma", type=float, default=0.1)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    cfg = TrainConfig(policy="automix", seed=args.seed)
    ds = data.gen_synthetic_shapes(n_per_class=64, size=64, k=4, seed=11)
    std, _ = data.standardize(ds)
    frozen = models.init_params(cfg.encoder, seed=args.seed + 21)

    fresh = mixblock.init_mix_params(cfg.encoder.feature_channels(cfg.feature_layer),
                                     seed=args.seed)
    untrained = trainer.mask_lambda_residuals(frozen, fresh, cfg, std.images, lam_grid=GRID)
    mix = trainer.train_mask_generator(frozen, cfg, std.images, steps=args.steps,
                                       lr=args.lr, gamma=args.gamma, lam_grid=GRID,
                                       seed=args.seed)
    trained = trainer.mask_lambda_residuals(frozen, mix, cfg, std.images, lam_grid=GRID)

    print(f"{'lambda':>8} {'untrained':>12} {'trained':>12}")
    for lam in GRID:
        print(f"{lam:>8.1f} {untrained[lam]:>12.4f} {trained[lam]:>12.4f}")
    print(f"{'mean':>8} {np.mean(list(untrained.values())):>12.4f} "
          f"{np.mean(list(trained.values())):>12.4f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
