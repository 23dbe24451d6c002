"""Hand-crafted mixing baselines and the shared label interpolation.

Linear interpolation mixes whole images; the box policy transplants a
rectangle whose area tracks 1 - lambda and corrects lambda from the realized
integer area. Both satisfy x_mix = m * x_i + (1 - m) * x_j for their masks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError, ParameterError
from .tensor import Tensor


@dataclass(frozen=True)
class MixRatio:
    lam: float
    alpha: float

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ParameterError(f"mixing ratio must lie in [0, 1], got {self.lam}")


@dataclass
class MixedBatch:
    """A mixed batch plus everything the losses need to score it."""

    x_mix: Tensor                      # [N, C, H, W]
    lam: np.ndarray                    # per-sample effective mixing ratio
    index_i: np.ndarray | None = None  # pairing permutations, when drawn by the caller
    index_j: np.ndarray | None = None
    mask: Tensor | None = None         # [N, 1, H, W] weight on the first sample

    def __post_init__(self):
        self.lam = np.atleast_1d(np.asarray(self.lam, dtype=np.float64))
        if np.any(self.lam < 0.0) or np.any(self.lam > 1.0):
            raise ParameterError("per-sample lambda outside [0, 1]")
        if self.mask is not None:
            m = self.mask.data
            if np.any(m < 0.0) or np.any(m > 1.0):
                raise ParameterError("mask entries outside [0, 1]")


def pair_permutation(n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform random pairing permutation; a singleton batch pairs with itself."""
    if n < 1:
        raise ParameterError("cannot pair an empty batch")
    return rng.permutation(n)


def sample_lambda(alpha: float, rng: np.random.Generator) -> MixRatio:
    """Beta(alpha, alpha) draw via two Gamma variates g1 / (g1 + g2)."""
    if alpha <= 0:
        raise ParameterError(f"Beta concentration must be positive, got {alpha}")
    g1 = rng.gamma(alpha)
    g2 = rng.gamma(alpha)
    return MixRatio(lam=float(g1 / (g1 + g2)), alpha=float(alpha))


def _check_one_hot(y: np.ndarray) -> None:
    if np.any((y != 0.0) & (y != 1.0)) or not np.allclose(y.sum(axis=-1), 1.0, atol=0):
        raise ContractError("labels must be exact one-hot vectors")


def mix_label(y_i: np.ndarray, y_j: np.ndarray, lam: float) -> np.ndarray:
    """Convex combination lam * y_i + (1 - lam) * y_j of one-hot labels."""
    y_i = np.asarray(y_i, dtype=np.float64)
    y_j = np.asarray(y_j, dtype=np.float64)
    if y_i.shape != y_j.shape:
        raise ContractError(f"label shapes differ: {y_i.shape} vs {y_j.shape}")
    _check_one_hot(y_i)
    _check_one_hot(y_j)
    if not 0.0 <= lam <= 1.0:
        raise ParameterError(f"lambda must lie in [0, 1], got {lam}")
    return lam * y_i + (1.0 - lam) * y_j


def mixup_linear(x_i: np.ndarray, x_j: np.ndarray, lam: float) -> np.ndarray:
    """Whole-image convex combination lam * x_i + (1 - lam) * x_j."""
    x_i = np.asarray(x_i, dtype=np.float64)
    x_j = np.asarray(x_j, dtype=np.float64)
    if x_i.shape != x_j.shape:
        raise DimensionError(f"mixup_linear shapes differ: {x_i.shape} vs {x_j.shape}")
    return lam * x_i + (1.0 - lam) * x_j


def mixup_batch(x_i: np.ndarray, x_j: np.ndarray, lam: float,
                index_i: np.ndarray | None = None,
                index_j: np.ndarray | None = None) -> MixedBatch:
    mixed = mixup_linear(x_i, x_j, lam)
    n, _, h, w = mixed.shape
    mask = Tensor(np.full((n, 1, h, w), lam))
    return MixedBatch(x_mix=Tensor(mixed), lam=np.full(n, lam),
                      index_i=index_i, index_j=index_j, mask=mask)


def cutmix_box(x_i: np.ndarray, x_j: np.ndarray, lam: float,
               rng: np.random.Generator,
               index_i: np.ndarray | None = None,
               index_j: np.ndarray | None = None) -> MixedBatch:
    """Replace one rectangle of x_i by x_j; side lengths scale with sqrt(1 - lam).

    The box's top-left corner is drawn uniformly over positions that keep the
    box inside the image, then clipped as a guard, and lambda is corrected to
    1 - realized_area / (H * W).
    """
    x_i = np.asarray(x_i, dtype=np.float64)
    x_j = np.asarray(x_j, dtype=np.float64)
    if x_i.shape != x_j.shape:
        raise DimensionError(f"cutmix shapes differ: {x_i.shape} vs {x_j.shape}")
    if not 0.0 <= lam <= 1.0:
        raise ParameterError(f"lambda must lie in [0, 1], got {lam}")
    n, _, h, w = x_i.shape
    if h < 2 or w < 2:
        raise DimensionError(f"cutmix needs image sides >= 2, got {h}x{w}")

    ratio = math.sqrt(1.0 - lam)
    box_h = int(h * ratio)
    box_w = int(w * ratio)
    top = int(rng.integers(0, h - box_h + 1))
    left = int(rng.integers(0, w - box_w + 1))
    bottom = min(top + box_h, h)
    right = min(left + box_w, w)

    mask = np.ones((n, 1, h, w))
    mask[:, :, top:bottom, left:right] = 0.0
    mixed = x_i.copy()
    mixed[:, :, top:bottom, left:right] = x_j[:, :, top:bottom, left:right]
    area = (bottom - top) * (right - left)
    lam_effective = 1.0 - area / float(h * w)
    return MixedBatch(x_mix=Tensor(mixed), lam=np.full(n, lam_effective),
                      index_i=index_i, index_j=index_j, mask=Tensor(mask))
