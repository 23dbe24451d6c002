"""Training objectives: cross entropy, pair-weighted mixup cross entropy, the
mask/ratio fidelity hinge, and the classification/generation bookkeeping split."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ParameterError
from .tensor import Tensor, log_softmax, relu

HINGE_EPSILON = 0.1


def _per_row_ce(logits: Tensor, y: np.ndarray) -> Tensor:
    if np.isnan(logits.data).any():
        raise NumericError("cross entropy received NaN logits")
    target = np.asarray(y, dtype=np.float64)
    logp = log_softmax(logits)
    return (logp * Tensor(-target)).sum(axis=1)


def cross_entropy(logits: Tensor, y: np.ndarray) -> Tensor:
    """Mean over the batch of -y . log softmax(logits)."""
    return _per_row_ce(logits, y).mean()


def _as_lambda_weights(lam, n: int) -> np.ndarray:
    weights = np.atleast_1d(np.asarray(lam, dtype=np.float64))
    if weights.size == 1:
        weights = np.full(n, float(weights[0]))
    if weights.shape != (n,):
        raise ParameterError(f"lambda must be a scalar or one value per row, got shape {weights.shape}")
    if np.any(weights < 0.0) or np.any(weights > 1.0):
        raise ParameterError("lambda outside [0, 1]")
    return weights


def mixup_ce(logits: Tensor, y_i: np.ndarray, y_j: np.ndarray, lam) -> Tensor:
    """Convex combination of per-row cross entropies against both labels.

    lam may be a scalar applied batch-wide or one corrected value per row.
    """
    n = logits.shape[0]
    weights = _as_lambda_weights(lam, n)
    rows_i = _per_row_ce(logits, y_i)
    rows_j = _per_row_ce(logits, y_j)
    w = Tensor(weights)
    return (w * rows_i + (1.0 - w) * rows_j).mean()


def lambda_loss(mask: Tensor, lam, gamma: float) -> Tensor:
    """Hinge on |lambda - spatial mean of the mask| beyond the fixed margin,
    averaged over the batch and scaled by the schedule weight."""
    if gamma < 0.0:
        raise ParameterError(f"gamma must be non-negative, got {gamma}")
    n = mask.shape[0]
    weights = _as_lambda_weights(lam, n)
    mask_means = mask.mean(axis=(1, 2, 3))
    residual = abs(mask_means - Tensor(weights))
    return float(gamma) * relu(residual - HINGE_EPSILON).mean()


@dataclass(frozen=True)
class GammaSchedule:
    """Linear decay of the fidelity-loss weight to zero over training."""

    total_steps: int
    gamma0: float = 0.1
    epsilon: float = HINGE_EPSILON

    def __post_init__(self):
        if self.total_steps < 1:
            raise ParameterError("schedule needs at least one step")

    def gamma(self, step: int) -> float:
        return max(0.0, self.gamma0 * (1.0 - step / self.total_steps))


@dataclass(frozen=True)
class LossBreakdown:
    ce: float
    mce_cls: float
    mce_gen: float
    lambda_loss: float
    total: float


def _scalar(value) -> float:
    return value.item() if isinstance(value, Tensor) else float(value)


def split_losses(cls_terms, gen_terms) -> LossBreakdown:
    """Bookkeeping split: (ce, mce_cls) drive the classifier, (mce_gen,
    lambda_loss) drive the generator; gradient routing itself is the trainer's
    stop-gradient placement."""
    ce, mce_cls = (_scalar(t) for t in cls_terms)
    mce_gen, lam = (_scalar(t) for t in gen_terms)
    return LossBreakdown(ce=ce, mce_cls=mce_cls, mce_gen=mce_gen,
                         lambda_loss=lam, total=ce + mce_cls + mce_gen + lam)
