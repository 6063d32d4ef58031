"""Composing test-time augmentation with split conformal calibration.

Two strategies are supported:

* ``traditional``: average the K augmented predictions of each case, then
  score the averages (N calibration scores).
* ``multi``: score every augmented prediction on its own (N * K scores).

Both center test intervals on the augmentation mean.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .conformal import (
    ABSOLUTE,
    NORMALIZED,
    ConformalCalibrator,
    PredictionInterval,
    clamp_scales,
    fit_calibrator,
    predict_interval,
)
from .core import AugmentedPredictionBundle, ValidationError, check_uniform_k

TRADITIONAL = "traditional_average_then_conformalize"
MULTI_SAMPLE = "multi_sample_conformalize_each"
STRATEGY_KINDS = (TRADITIONAL, MULTI_SAMPLE)

# CLI spelling -> strategy kind; "none" is plain split CP on single predictions
CLI_MODES = {"none": TRADITIONAL, "traditional": TRADITIONAL, "multi": MULTI_SAMPLE}


@dataclass(frozen=True)
class TtaStrategy:
    kind: str
    k_augment: int

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise ValidationError(f"unknown TTA strategy {self.kind!r}")
        if self.k_augment < 1:
            raise ValidationError("k_augment must be >= 1")

    @property
    def exchangeability(self) -> str:
        # per-augmentation scores of one case are not independent of each other
        return "heuristic" if self.kind == MULTI_SAMPLE and self.k_augment > 1 else "exact"


def aggregate_point(bundle: AugmentedPredictionBundle) -> float:
    if bundle.k == 0:
        raise ValidationError("empty bundle")
    return float(np.mean(bundle.aug_preds))


def augmentation_spread(bundle: AugmentedPredictionBundle) -> float:
    """Sample standard deviation across augmentations (needs K >= 2)."""
    if bundle.k < 2:
        raise ValidationError("normalized scores need at least two augmentations per case")
    return float(np.std(bundle.aug_preds, ddof=1))


def _arrays(bundles: Sequence[AugmentedPredictionBundle]) -> tuple[np.ndarray, np.ndarray]:
    check_uniform_k(bundles)
    y = np.array([b.y_true for b in bundles], dtype=float)
    preds = np.array([b.aug_preds for b in bundles], dtype=float)
    return y, preds


def spread_array(preds: np.ndarray) -> np.ndarray:
    if preds.shape[1] < 2:
        raise ValidationError("normalized scores need at least two augmentations per case")
    return clamp_scales(np.std(preds, axis=1, ddof=1), preds.shape[0])


def traditional_scores_array(y: np.ndarray, preds: np.ndarray, score_kind: str = ABSOLUTE) -> np.ndarray:
    """Scores of the augmentation means; ``preds`` has shape (N, K)."""
    scores = np.abs(y - preds.mean(axis=1))
    if score_kind == NORMALIZED:
        scores = scores / spread_array(preds)
    return scores


def multi_sample_scores_array(y: np.ndarray, preds: np.ndarray, score_kind: str = ABSOLUTE) -> np.ndarray:
    """Per-augmentation scores, flattened row-major (case 0's K scores first)."""
    scores = np.abs(y[:, None] - preds)
    if score_kind == NORMALIZED:
        scores = scores / spread_array(preds)[:, None]
    return scores.ravel()


def traditional_scores(bundles, score_kind: str = ABSOLUTE) -> np.ndarray:
    return traditional_scores_array(*_arrays(bundles), score_kind)


def multi_sample_scores(bundles, score_kind: str = ABSOLUTE) -> np.ndarray:
    return multi_sample_scores_array(*_arrays(bundles), score_kind)


def calibrate_traditional(calib_bundles, alpha: float, score_kind: str = ABSOLUTE,
                          created_from: str = "") -> ConformalCalibrator:
    return fit_calibrator(traditional_scores(calib_bundles, score_kind), alpha,
                          score_kind=score_kind, created_from=created_from)


def calibrate_multi_sample(calib_bundles, alpha: float, score_kind: str = ABSOLUTE,
                           created_from: str = "") -> ConformalCalibrator:
    return fit_calibrator(multi_sample_scores(calib_bundles, score_kind), alpha,
                          score_kind=score_kind, created_from=created_from)


def calibrate(strategy: TtaStrategy, calib_bundles, alpha: float, score_kind: str = ABSOLUTE,
              created_from: str = "") -> ConformalCalibrator:
    k = check_uniform_k(calib_bundles)
    if k != strategy.k_augment:
        raise ValidationError(f"bundles have K={k}, strategy expects K={strategy.k_augment}")
    fit = calibrate_multi_sample if strategy.kind == MULTI_SAMPLE else calibrate_traditional
    return fit(calib_bundles, alpha, score_kind=score_kind, created_from=created_from)


def predict_with_strategy(calibrator: ConformalCalibrator, strategy: TtaStrategy,
                          test_bundle: AugmentedPredictionBundle) -> PredictionInterval:
    if test_bundle.k != strategy.k_augment:
        raise ValidationError(
            f"bundle {test_bundle.id!r} has K={test_bundle.k}, strategy expects K={strategy.k_augment}")
    scale = augmentation_spread(test_bundle) if calibrator.score_kind == NORMALIZED else None
    return predict_interval(calibrator, aggregate_point(test_bundle), scale=scale)
