"""Split conformal prediction intervals for regression, with test-time augmentation."""

__version__ = "0.1.0"

from .conformal import (
    ConformalCalibrator,
    PredictionInterval,
    average_interval_width,
    empirical_coverage,
    fit_calibrator,
    nonconformity_scores,
    predict_interval,
)
from .core import (
    AugmentedPredictionBundle,
    PredictionRecord,
    SplitSpec,
    TScoreReference,
    ValidationError,
    WhoCategory,
    pair_within_window,
    split_dataset,
    t_score,
    who_category,
    who_category_set,
)
from .tta import (
    TtaStrategy,
    aggregate_point,
    calibrate_multi_sample,
    calibrate_traditional,
    predict_with_strategy,
)

__all__ = [
    "AugmentedPredictionBundle",
    "ConformalCalibrator",
    "PredictionInterval",
    "PredictionRecord",
    "SplitSpec",
    "TScoreReference",
    "TtaStrategy",
    "ValidationError",
    "WhoCategory",
    "aggregate_point",
    "average_interval_width",
    "calibrate_multi_sample",
    "calibrate_traditional",
    "empirical_coverage",
    "fit_calibrator",
    "nonconformity_scores",
    "pair_within_window",
    "predict_interval",
    "predict_with_strategy",
    "split_dataset",
    "t_score",
    "who_category",
    "who_category_set",
]
