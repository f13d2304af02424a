"""Training losses for probability masks: cross-entropy, overlap, combined.

Values and gradients are plain numpy; every reduction goes through math.fsum,
which is exactly rounded and therefore independent of summation order. Targets
are 0/1, predictions are probabilities clamped away from the endpoints on
ingestion so logs and quotients stay finite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InputError

DEFAULT_CLAMP = 1e-7
DEFAULT_SMOOTHING = 1e-7
DEFAULT_OVERLAP_WEIGHT = 0.01


@dataclass(frozen=True)
class LossConfig:
    clamp: float = DEFAULT_CLAMP
    smoothing: float = DEFAULT_SMOOTHING  # added to the overlap numerator and denominator
    overlap_weight: float = DEFAULT_OVERLAP_WEIGHT  # epsilon in bce + epsilon*dice

    def __post_init__(self) -> None:
        if not (0 < self.clamp < 0.5):
            raise InputError(f"clamp must be in (0, 0.5), got {self.clamp}")
        if self.smoothing <= 0:
            raise InputError(f"smoothing must be positive, got {self.smoothing}")
        if self.overlap_weight < 0:
            raise InputError(f"overlap weight must be >= 0, got {self.overlap_weight}")


@dataclass(frozen=True)
class MaskPair:
    """A flattened (target, prediction) pair sharing one shape.

    Predictions are clamped to [clamp, 1 - clamp] on construction; targets
    must be exactly 0 or 1."""

    target: np.ndarray
    prediction: np.ndarray
    clamp: float = DEFAULT_CLAMP

    def __post_init__(self) -> None:
        y = np.array(self.target, dtype=np.float64, copy=True).ravel()
        p = np.array(self.prediction, dtype=np.float64, copy=True).ravel()
        if y.shape != p.shape:
            raise InputError(f"target and prediction differ in size: {y.shape} vs {p.shape}")
        if y.size == 0:
            raise InputError("mask pair must be non-empty")
        if not np.isin(y, (0.0, 1.0)).all():
            raise InputError("targets must be exactly 0 or 1")
        if not np.isfinite(p).all():
            raise InputError("predictions must be finite")
        p = np.clip(p, self.clamp, 1.0 - self.clamp)
        y.flags.writeable = False
        p.flags.writeable = False
        object.__setattr__(self, "target", y)
        object.__setattr__(self, "prediction", p)


def _fsum(values: np.ndarray) -> float:
    return math.fsum(values.tolist())


def bce(pair: MaskPair) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy and its gradient w.r.t. each prediction.

    loss = -(1/N) * sum(y*log(p) + (1-y)*log(1-p))
    dL/dp_i = -(1/N) * (y_i/p_i - (1-y_i)/(1-p_i))
    """
    y, p = pair.target, pair.prediction
    n = y.size
    terms = y * np.log(p) + (1.0 - y) * np.log1p(-p)
    loss = -_fsum(terms) / n
    grad = -(y / p - (1.0 - y) / (1.0 - p)) / n
    return loss, grad


def dice(pair: MaskPair, smoothing: float = DEFAULT_SMOOTHING) -> tuple[float, np.ndarray]:
    """Soft overlap loss and gradient.

    loss = 1 - (2*sum(y*p) + mu) / (sum(y) + sum(p) + mu)
    dL/dp_i = -(2*y_i*B - A) / B^2   with A, B the numerator and denominator.
    """
    y, p = pair.target, pair.prediction
    a = 2.0 * _fsum(y * p) + smoothing
    b = _fsum(y) + _fsum(p) + smoothing
    loss = 1.0 - a / b
    grad = -(2.0 * y * b - a) / (b * b)
    return loss, grad


def combined(pair: MaskPair, config: LossConfig | None = None) -> tuple[float, np.ndarray]:
    """Cross-entropy plus overlap_weight times the overlap loss."""
    cfg = config or LossConfig()
    bce_loss, bce_grad = bce(pair)
    dice_loss, dice_grad = dice(pair, cfg.smoothing)
    return bce_loss + cfg.overlap_weight * dice_loss, bce_grad + cfg.overlap_weight * dice_grad


def finite_difference_gradients(
    pair: MaskPair,
    config: LossConfig | None = None,
    h: float = 1e-5,
) -> dict[str, np.ndarray]:
    """Central-difference gradients of all three losses for every element.

    Uses the exact single-element perturbation of each loss: for the
    cross-entropy only term i moves, for the overlap loss only the two
    running sums move, so (L(p + h e_i) - L(p - h e_i)) / 2h is evaluated
    without re-summing N terms per element (and without the catastrophic
    cancellation a naive re-summation oracle would suffer)."""
    cfg = config or LossConfig()
    y, p = pair.target, pair.prediction
    if np.any(p - h <= 0.0) or np.any(p + h >= 1.0):
        raise InputError(
            "finite differences need every probability at least h away from 0 and 1"
        )
    n = float(p.size)

    up = -(y * np.log(p + h) + (1.0 - y) * np.log1p(-(p + h))) / n
    dn = -(y * np.log(p - h) + (1.0 - y) * np.log1p(-(p - h))) / n
    bce_fd = (up - dn) / (2.0 * h)

    a = 2.0 * _fsum(y * p) + cfg.smoothing
    b = _fsum(y) + _fsum(p) + cfg.smoothing
    dice_up = 1.0 - (a + 2.0 * y * h) / (b + h)
    dice_dn = 1.0 - (a - 2.0 * y * h) / (b - h)
    dice_fd = (dice_up - dice_dn) / (2.0 * h)

    return {
        "bce": bce_fd,
        "dice": dice_fd,
        "combined": bce_fd + cfg.overlap_weight * dice_fd,
    }


def gradient_check(
    pairs: int = 100,
    side: int = 32,
    seed: int = 0,
    h: float = 1e-5,
    config: LossConfig | None = None,
) -> dict[str, float]:
    """Worst relative disagreement between analytic and finite-difference
    gradients over seeded random mask pairs; keys 'bce', 'dice', 'combined'."""
    cfg = config or LossConfig()
    rng = np.random.default_rng(seed)
    worst = {"bce": 0.0, "dice": 0.0, "combined": 0.0}
    for _ in range(pairs):
        y = rng.integers(0, 2, size=(side, side)).astype(np.float64)
        p = rng.uniform(0.01, 0.99, size=(side, side))
        pair = MaskPair(y, p, clamp=cfg.clamp)
        fd = finite_difference_gradients(pair, cfg, h)
        analytic = {
            "bce": bce(pair)[1],
            "dice": dice(pair, cfg.smoothing)[1],
            "combined": combined(pair, cfg)[1],
        }
        for name in worst:
            denom = np.maximum(np.abs(fd[name]), 1e-12)
            rel = float(np.max(np.abs(analytic[name] - fd[name]) / denom))
            worst[name] = max(worst[name], rel)
    return worst
