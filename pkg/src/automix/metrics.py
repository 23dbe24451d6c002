"""Evaluation: accuracy, mixed-pair containment accuracy, calibration, a
single-step sign attack, and mask summary statistics."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import models
from .data import ChannelStats, one_hot
from .errors import ContractError, ParameterError
from .losses import cross_entropy
from .tensor import Tensor, backward, no_grad, reset_tape


def top1_accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of rows whose argmax equals the label; ties go to the lowest index."""
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    return float((logits.argmax(axis=1) == labels).mean())


def mixed_topk_accuracy(logits: np.ndarray, y_i: np.ndarray,
                        y_j: np.ndarray) -> tuple[float, float]:
    """(top-1 lands in the label pair, top-2 equals the label pair).

    Rows with identical pair labels are excluded from both denominators;
    containment is ill-posed for them.
    """
    logits = np.asarray(logits)
    y_i = np.asarray(y_i)
    y_j = np.asarray(y_j)
    valid = y_i != y_j
    if not valid.any():
        return 0.0, 0.0
    # stable sort of the negated rows breaks ties toward the lowest class index
    order = np.argsort(-logits[valid], axis=1, kind="stable")
    top1 = order[:, 0]
    top2 = order[:, :2]
    yi, yj = y_i[valid], y_j[valid]
    in_pair = (top1 == yi) | (top1 == yj)
    equals_pair = (((top2[:, 0] == yi) & (top2[:, 1] == yj))
                   | ((top2[:, 0] == yj) & (top2[:, 1] == yi)))
    return float(in_pair.mean()), float(equals_pair.mean())


@dataclass(frozen=True)
class CalibrationBin:
    low: float
    high: float
    count: int
    confidence: float
    accuracy: float


@dataclass(frozen=True)
class CalibrationReport:
    bins: tuple[CalibrationBin, ...]
    ece: float
    total: int


def calibration_report(confidences: np.ndarray, correctness: np.ndarray,
                       bin_count: int = 15) -> CalibrationReport:
    """Equal-width bins on (0, 1]; ece = sum_b (n_b / N) |acc_b - conf_b|."""
    confidences = np.asarray(confidences, dtype=np.float64)
    correctness = np.asarray(correctness, dtype=np.float64)
    if confidences.size == 0:
        raise ContractError("calibration needs at least one prediction")
    if np.any(confidences < 0.0) or np.any(confidences > 1.0):
        raise ParameterError("confidences must lie in [0, 1]")
    indices = np.clip(np.ceil(confidences * bin_count).astype(int) - 1, 0, bin_count - 1)
    bins = []
    weighted_gap = 0.0
    n = confidences.size
    for b in range(bin_count):
        member = indices == b
        count = int(member.sum())
        if count:
            conf = float(confidences[member].mean())
            acc = float(correctness[member].mean())
            weighted_gap += (count / n) * abs(acc - conf)
        else:
            conf = acc = 0.0
        bins.append(CalibrationBin(low=b / bin_count, high=(b + 1) / bin_count,
                                   count=count, confidence=conf, accuracy=acc))
    return CalibrationReport(bins=tuple(bins), ece=weighted_gap, total=n)


def ece(confidences: np.ndarray, correctness: np.ndarray, bins: int = 15) -> float:
    return calibration_report(confidences, correctness, bins).ece


def write_reliability_csv(report: CalibrationReport, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_low", "bin_high", "count", "confidence", "accuracy"])
        for b in report.bins:
            writer.writerow([repr(b.low), repr(b.high), b.count, repr(b.confidence), repr(b.accuracy)])


def softmax_confidence(logits: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(max softmax probability, argmax class) per row."""
    logits = np.asarray(logits)
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=1, keepdims=True)
    return probs.max(axis=1), probs.argmax(axis=1)


def fgsm_error(params: models.ParamSet, images: np.ndarray, labels: np.ndarray,
               epsilon: float, config: models.EncoderConfig,
               stats: ChannelStats | None = None, batch_size: int = 256) -> float:
    """Error rate under x + epsilon * sign(grad_x CE), clipped to [0, 1] pixels.

    ``images`` live in [0, 1]; when ``stats`` is given the model consumes the
    standardized view and the perturbation/clipping still happen in pixel space.
    Resets the tape; do not call mid-training-step.
    """
    if epsilon < 0:
        raise ParameterError(f"epsilon must be non-negative, got {epsilon}")

    def to_model(x01):
        if stats is None:
            return x01
        mean = np.asarray(stats.mean).reshape(1, -1, 1, 1)
        std = np.asarray(stats.std).reshape(1, -1, 1, 1)
        return (x01 - mean) / std

    labels = np.asarray(labels)
    k = config.num_classes
    wrong = 0
    for start in range(0, images.shape[0], batch_size):
        reset_tape()
        x01 = images[start:start + batch_size]
        y = labels[start:start + batch_size]
        probe = Tensor(to_model(x01), requires_grad=True)
        loss = cross_entropy(models.forward_logits(params, probe, config), one_hot(y, k))
        grad = backward(loss)[probe]
        adv01 = np.clip(x01 + epsilon * np.sign(grad), 0.0, 1.0)
        with no_grad():
            logits = models.forward_logits(params, Tensor(to_model(adv01)), config)
        wrong += int((logits.data.argmax(axis=1) != y).sum())
    reset_tape()
    return wrong / images.shape[0]


def mask_stats(masks, lambdas) -> tuple[float, float]:
    """(mean |spatial mask mean - lambda|, mean spatial standard deviation)."""
    data = masks.data if isinstance(masks, Tensor) else np.asarray(masks)
    lam = np.atleast_1d(np.asarray(lambdas, dtype=np.float64))
    n = data.shape[0]
    if lam.size == 1:
        lam = np.full(n, float(lam[0]))
    means = data.reshape(n, -1).mean(axis=1)
    stds = data.reshape(n, -1).std(axis=1)
    return float(np.abs(means - lam).mean()), float(stds.mean())
