"""Point-prediction and interval metrics, and the summary report."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .core import ValidationError


def _pair(y_true, y_pred) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(y_true, dtype=float).ravel()
    b = np.asarray(y_pred, dtype=float).ravel()
    if a.size != b.size:
        raise ValidationError(f"length mismatch: {a.size} vs {b.size}")
    if a.size == 0:
        raise ValidationError("empty input")
    return a, b


def mae(y_true, y_pred) -> float:
    a, b = _pair(y_true, y_pred)
    return math.fsum(np.abs(a - b)) / a.size


def rmse(y_true, y_pred) -> float:
    a, b = _pair(y_true, y_pred)
    d = np.abs(a - b)
    top = float(d.max())
    if top == 0:
        return 0.0
    # scale first so tiny errors do not underflow when squared
    d = d / top
    return top * math.sqrt(math.fsum(d * d) / a.size)


def mape(y_true, y_pred) -> float:
    """Mean absolute percentage error, in percent."""
    a, b = _pair(y_true, y_pred)
    if np.any(a == 0):
        raise ValidationError("MAPE undefined: zero target value")
    return math.fsum(100.0 * np.abs(a - b) / np.abs(a)) / a.size


def pearson_r(x, y) -> float:
    a, b = _pair(x, y)
    if a.size < 2:
        raise ValidationError("Pearson R needs at least two points")
    da = a - a.mean()
    db = b - b.mean()
    saa = math.fsum(da * da)
    sbb = math.fsum(db * db)
    if saa == 0 or sbb == 0:
        raise ValidationError("Pearson R undefined: zero variance")
    # one square root keeps r(x, x) at exactly 1 for well-scaled data
    r = math.fsum(da * db) / math.sqrt(saa * sbb)
    return max(-1.0, min(1.0, r))


def error_width_correlation(y_true, intervals) -> float:
    """Pearson R between ``|y_true - center|`` and interval width."""
    if len(y_true) != len(intervals):
        raise ValidationError("length mismatch between truths and intervals")
    errors = [abs(y - iv.center) for y, iv in zip(y_true, intervals)]
    widths = [iv.upper - iv.lower for iv in intervals]
    if not all(math.isfinite(w) for w in widths):
        raise ValidationError("error/width correlation undefined for unbounded intervals")
    # a shared radius leaves only rounding noise in the widths
    if max(widths) - min(widths) <= 1e-9 * max(abs(w) for w in widths):
        raise ValidationError("error/width correlation undefined: constant widths")
    return pearson_r(errors, widths)


@dataclass
class LevelEntry:
    alpha: float
    cp_radius: float
    empirical_coverage: float
    avg_width: float

    @property
    def confidence_percent(self) -> int:
        return round(100 * (1 - self.alpha))


@dataclass
class EvaluationReport:
    mae: float | None
    rmse: float | None
    mape: float | None
    pearson_r: float | None
    n_test: int
    levels: list[LevelEntry] = field(default_factory=list)
    error_width_correlation: float | None = None
    model: str = ""
    strategy: str = "none"
    exchangeability: str = "exact"
    n_calib: int | None = None

    def __post_init__(self):
        if self.mae is not None and self.rmse is not None and self.mae > self.rmse * (1 + 1e-12):
            raise ValidationError("inconsistent report: mae > rmse")
        for lv in self.levels:
            if not 0 <= lv.empirical_coverage <= 1:
                raise ValidationError("coverage outside [0, 1]")

    def level(self, alpha: float) -> LevelEntry | None:
        for lv in self.levels:
            if math.isclose(lv.alpha, alpha):
                return lv
        return None

    def metrics_only(self) -> dict:
        """Numeric content without the descriptive labels."""
        d = self.to_dict()
        for key in ("model", "strategy", "exchangeability"):
            d.pop(key)
        return d

    def to_dict(self) -> dict:
        d = asdict(self)
        for lv in d["levels"]:
            for key in ("cp_radius", "avg_width"):
                lv[key] = _enc(lv[key])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EvaluationReport":
        d = dict(d)
        d.pop("manifest", None)
        levels = [LevelEntry(alpha=lv["alpha"], cp_radius=_dec(lv["cp_radius"]),
                             empirical_coverage=lv["empirical_coverage"], avg_width=_dec(lv["avg_width"]))
                  for lv in d.pop("levels", [])]
        return cls(levels=levels, **d)

    def to_json(self, **extra) -> str:
        d = self.to_dict()
        d.update(extra)
        return json.dumps(d, indent=2, sort_keys=True) + "\n"


def _enc(x):
    if x is not None and isinstance(x, float) and math.isinf(x):
        return "inf"
    return x


def _dec(x):
    return math.inf if x == "inf" else x


# -- table rendering -------------------------------------------------------

TABLE_LEVELS = (0.01, 0.05, 0.10)


def _cell(x: float | None) -> str:
    if x is None:
        return "--"
    if math.isinf(x):
        return "inf"
    return f"{x:.4f}"


def render_table(reports: Sequence[EvaluationReport], levels: Sequence[float] = TABLE_LEVELS) -> str:
    """Fixed-width text table: point metrics, then one CP radius column per level."""
    header = ["Model", "MAE↓", "R↑", "RMSE↓", "MAPE↓"] + [f"CP {round(100 * (1 - a))}%↓" for a in levels]
    rows = []
    for rep in reports:
        row = [rep.model or rep.strategy, _cell(rep.mae), _cell(rep.pearson_r), _cell(rep.rmse), _cell(rep.mape)]
        for a in levels:
            lv = rep.level(a)
            row.append(_cell(lv.cp_radius if lv else None))
        rows.append(row)
    widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
    lines = []
    for r in [header] + rows:
        cells = [r[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(r[1:], widths[1:])]
        lines.append("  ".join(cells).rstrip())
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def render_levels(report: EvaluationReport) -> str:
    lines = ["level   radius   coverage   avg_width"]
    for lv in report.levels:
        lines.append(f"{lv.confidence_percent:>4d}%  {_cell(lv.cp_radius):>7}  {lv.empirical_coverage:9.4f}  "
                     f"{_cell(lv.avg_width):>10}")
    return "\n".join(lines) + "\n"


def plot_data_csv(y_true, y_pred) -> str:
    a, b = _pair(y_true, y_pred)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["y_true", "y_pred", "abs_error"])
    for t, p in zip(a, b):
        w.writerow([repr(float(t)), repr(float(p)), repr(float(abs(t - p)))])
    return buf.getvalue()


# -- report assembly -------------------------------------------------------

def report_from_intervals(y_true, centers, intervals_by_alpha: dict, radius_by_alpha: dict | None = None,
                          model: str = "", strategy: str = "none", exchangeability: str = "exact",
                          n_calib: int | None = None, point_metrics: bool = True) -> EvaluationReport:
    from .conformal import average_interval_width, empirical_coverage

    y_true = [float(y) for y in y_true]
    centers = [float(c) for c in centers]
    _pair(y_true, centers)
    point = dict(mae=None, rmse=None, mape=None, pearson_r=None)
    if point_metrics:
        point = dict(mae=mae(y_true, centers), rmse=rmse(y_true, centers),
                     mape=mape(y_true, centers) if all(y != 0 for y in y_true) else None,
                     pearson_r=_safe_pearson(y_true, centers))

    levels = []
    ew_corr = None
    for alpha in sorted(intervals_by_alpha):
        ivs = intervals_by_alpha[alpha]
        if len(ivs) != len(y_true):
            raise ValidationError(f"alpha={alpha}: {len(ivs)} intervals for {len(y_true)} cases")
        radius = radius_by_alpha[alpha] if radius_by_alpha else float(np.median([iv.radius for iv in ivs]))
        levels.append(LevelEntry(alpha=alpha, cp_radius=radius,
                                 empirical_coverage=empirical_coverage(ivs, y_true),
                                 avg_width=average_interval_width(ivs)))
        if ew_corr is None:
            try:
                ew_corr = error_width_correlation(y_true, ivs)
            except ValidationError:
                pass
    return EvaluationReport(n_test=len(y_true), levels=levels, error_width_correlation=ew_corr,
                            model=model, strategy=strategy, exchangeability=exchangeability,
                            n_calib=n_calib, **point)


def _safe_pearson(a, b):
    try:
        return pearson_r(a, b)
    except ValidationError:
        return None


def build_report(data, calibrators, strategy=None, model: str = "") -> EvaluationReport:
    """Evaluate test cases against fitted calibrators, one per significance level.

    ``data`` holds :class:`PredictionRecord` or :class:`AugmentedPredictionBundle`
    items; records are treated as K=1 bundles. ``strategy`` defaults to
    traditional averaging with the data's K.
    """
    from .core import AugmentedPredictionBundle, check_uniform_k
    from .tta import TRADITIONAL, TtaStrategy, aggregate_point, predict_with_strategy

    if not data:
        raise ValidationError("no test cases")
    bundles = [d if isinstance(d, AugmentedPredictionBundle) else AugmentedPredictionBundle.from_record(d)
               for d in data]
    k = check_uniform_k(bundles)
    if strategy is None:
        strategy = TtaStrategy(TRADITIONAL, k)
    y_true = [b.y_true for b in bundles]
    centers = [aggregate_point(b) for b in bundles]
    intervals = {c.alpha: [predict_with_strategy(c, strategy, b) for b in bundles] for c in calibrators}
    radii = {c.alpha: c.q_radius for c in calibrators}
    n_calib = {c.n_calib for c in calibrators}
    return report_from_intervals(
        y_true, centers, intervals, radii, model=model, strategy=strategy.kind,
        exchangeability=strategy.exchangeability, n_calib=n_calib.pop() if len(n_calib) == 1 else None)
