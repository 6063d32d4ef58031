"""Split conformal prediction for regression.

Scores are absolute residuals (optionally divided by a per-case spread), the
radius is the ``ceil((n + 1)(1 - alpha))``-th smallest calibration score, and
intervals are symmetric around the point prediction.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np

from .core import PredictionRecord, ValidationError

ABSOLUTE = "absolute_residual"
NORMALIZED = "normalized_residual"
SCORE_KINDS = (ABSOLUTE, NORMALIZED)

# floor on the per-case spread used by normalized scores
SCALE_EPS = 1e-6


@dataclass(frozen=True)
class ConformalCalibrator:
    alpha: float
    q_radius: float
    n_calib: int
    score_kind: str = ABSOLUTE
    created_from: str = ""

    def __post_init__(self):
        _check_alpha(self.alpha)
        if not (self.q_radius >= 0):
            raise ValidationError(f"q_radius must be >= 0, got {self.q_radius!r}")
        if self.n_calib < 1:
            raise ValidationError("n_calib must be >= 1")
        if self.score_kind not in SCORE_KINDS:
            raise ValidationError(f"unknown score kind {self.score_kind!r}")

    @property
    def level(self) -> float:
        return 1.0 - self.alpha

    def to_dict(self) -> dict:
        d = asdict(self)
        d["q_radius"] = encode_float(self.q_radius)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ConformalCalibrator":
        try:
            return cls(
                alpha=float(d["alpha"]),
                q_radius=decode_float(d["q_radius"]),
                n_calib=int(d["n_calib"]),
                score_kind=d.get("score_kind", ABSOLUTE),
                created_from=d.get("created_from", ""),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"malformed calibrator: {exc}") from exc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ConformalCalibrator":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class PredictionInterval:
    center: float
    lower: float
    upper: float
    alpha: float

    @property
    def radius(self) -> float:
        return (self.upper - self.lower) / 2.0

    @property
    def width(self) -> float:
        return self.upper - self.lower

    def contains(self, y: float) -> bool:
        return self.lower <= y <= self.upper


def encode_float(x: float):
    """JSON-safe float: infinities become ``"inf"``/``"-inf"``."""
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return x


def decode_float(x) -> float:
    if isinstance(x, str):
        if x in ("inf", "-inf"):
            return float(x)
        raise ValueError(f"bad float literal {x!r}")
    return float(x)


def _check_alpha(alpha: float) -> None:
    if not (0.0 < alpha < 1.0):
        raise ValidationError(f"alpha must lie in (0, 1), got {alpha!r}")


def quantile_rank(n: int, alpha: float) -> int:
    """1-based rank ``ceil((n + 1)(1 - alpha))``, computed in exact arithmetic.

    ``alpha`` is taken at its shortest decimal representation so that e.g.
    0.05 behaves as 1/20 rather than as its binary approximation.
    """
    a = Fraction(repr(float(alpha)))
    return math.ceil((n + 1) * (1 - a))


def nonconformity_scores(records: Sequence[PredictionRecord], scales: Sequence[float] | None = None) -> np.ndarray:
    """Absolute residuals ``|y_true - y_pred|``, in record order.

    With ``scales`` given, each residual is divided by ``max(scale, SCALE_EPS)``.
    """
    if len(records) == 0:
        raise ValidationError("no calibration records")
    y = np.array([r.y_true for r in records], dtype=float)
    yhat = np.array([r.y_pred for r in records], dtype=float)
    scores = np.abs(y - yhat)
    if scales is not None:
        scores = scores / clamp_scales(scales, len(records))
    return scores


def clamp_scales(scales: Sequence[float], n: int) -> np.ndarray:
    s = np.asarray(scales, dtype=float)
    if s.shape != (n,):
        raise ValidationError(f"expected {n} scales, got shape {s.shape}")
    if not np.all(np.isfinite(s)) or np.any(s < 0):
        raise ValidationError("scales must be finite and non-negative")
    return np.maximum(s, SCALE_EPS)


def fit_calibrator(scores: Sequence[float], alpha: float, score_kind: str = ABSOLUTE,
                   created_from: str = "") -> ConformalCalibrator:
    scores = np.asarray(scores, dtype=float).ravel()
    if scores.size == 0:
        raise ValidationError("cannot calibrate on an empty score set")
    _check_alpha(alpha)
    if np.isnan(scores).any():
        raise ValidationError("scores contain NaN")
    if (scores < 0).any():
        raise ValidationError("nonconformity scores must be non-negative")

    n = scores.size
    k = quantile_rank(n, alpha)
    if k > n:
        q = math.inf
    else:
        q = float(np.sort(scores, kind="stable")[max(k, 1) - 1])
    return ConformalCalibrator(alpha=float(alpha), q_radius=q, n_calib=n,
                               score_kind=score_kind, created_from=created_from)


def predict_interval(calibrator: ConformalCalibrator, y_pred: float, scale: float | None = None) -> PredictionInterval:
    """Symmetric interval ``y_pred +/- q`` (times the case spread for normalized scores)."""
    y_pred = float(y_pred)
    if not math.isfinite(y_pred):
        raise ValidationError(f"non-finite prediction {y_pred!r}")
    radius = calibrator.q_radius
    if calibrator.score_kind == NORMALIZED:
        if scale is None:
            raise ValidationError("normalized calibrator needs a per-case scale")
        if math.isfinite(radius):
            radius = radius * max(float(scale), SCALE_EPS)
    return PredictionInterval(center=y_pred, lower=y_pred - radius, upper=y_pred + radius,
                              alpha=calibrator.alpha)


def empirical_coverage(intervals: Sequence[PredictionInterval], truths: Sequence[float]) -> float:
    if len(intervals) != len(truths):
        raise ValidationError(f"{len(intervals)} intervals but {len(truths)} truths")
    if len(intervals) == 0:
        raise ValidationError("no intervals to evaluate")
    hits = sum(iv.lower <= y <= iv.upper for iv, y in zip(intervals, truths))
    return hits / len(intervals)


def average_interval_width(intervals: Sequence[PredictionInterval]) -> float:
    """Mean interval width; ``inf`` when any interval is unbounded."""
    if len(intervals) == 0:
        raise ValidationError("no intervals to evaluate")
    widths = np.array([iv.upper - iv.lower for iv in intervals], dtype=float)
    if np.isinf(widths).any():
        return math.inf
    return float(widths.mean())
