"""Shared record types, dataset splitting, and BMD diagnostic utilities."""

from __future__ import annotations

import csv
import datetime as _dt
import enum
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

DEFAULT_RATIOS = (0.7, 0.1, 0.1, 0.1)
PARTITIONS = ("train", "val", "test", "calib")

OSTEOPOROSIS_MAX_T = -2.5
NORMAL_MIN_T = -1.0


class ValidationError(ValueError):
    """Bad user input: malformed files, inconsistent sizes, invalid parameters."""


def _require_finite(name: str, value: float) -> float:
    value = float(value)
    if not math.isfinite(value):
        raise ValidationError(f"{name} must be finite, got {value!r}")
    return value


@dataclass(frozen=True)
class PredictionRecord:
    id: str
    y_true: float
    y_pred: float
    group_id: str | None = None

    def __post_init__(self):
        if not self.id:
            raise ValidationError("record id must be non-empty")
        object.__setattr__(self, "y_true", _require_finite("y_true", self.y_true))
        object.__setattr__(self, "y_pred", _require_finite("y_pred", self.y_pred))


@dataclass(frozen=True)
class AugmentedPredictionBundle:
    """Per-case predictions under K test-time augmentations."""

    id: str
    y_true: float
    aug_preds: tuple[float, ...]
    group_id: str | None = None

    def __post_init__(self):
        if not self.id:
            raise ValidationError("bundle id must be non-empty")
        object.__setattr__(self, "y_true", _require_finite("y_true", self.y_true))
        preds = tuple(_require_finite("aug_pred", p) for p in self.aug_preds)
        if not preds:
            raise ValidationError(f"bundle {self.id!r} has no augmented predictions")
        object.__setattr__(self, "aug_preds", preds)

    @property
    def k(self) -> int:
        return len(self.aug_preds)

    @classmethod
    def from_record(cls, record: PredictionRecord) -> "AugmentedPredictionBundle":
        return cls(record.id, record.y_true, (record.y_pred,), record.group_id)


@dataclass(frozen=True)
class SplitSpec:
    ratios: tuple[float, float, float, float] = DEFAULT_RATIOS
    seed: int = 0
    group_aware: bool = True

    def __post_init__(self):
        ratios = tuple(float(r) for r in self.ratios)
        if len(ratios) != 4:
            raise ValidationError("ratios must have four entries (train, val, test, calib)")
        if any(r < 0 or not math.isfinite(r) for r in ratios):
            raise ValidationError(f"ratios must be non-negative, got {ratios}")
        if abs(math.fsum(ratios) - 1.0) > 1e-9:
            raise ValidationError(f"ratios must sum to 1, got {math.fsum(ratios)!r}")
        object.__setattr__(self, "ratios", ratios)


@dataclass(frozen=True)
class TScoreReference:
    mu_ref: float
    sigma_ref: float

    def __post_init__(self):
        _require_finite("mu_ref", self.mu_ref)
        if not (math.isfinite(self.sigma_ref) and self.sigma_ref > 0):
            raise ValidationError(f"sigma_ref must be positive, got {self.sigma_ref!r}")


@dataclass(frozen=True)
class Split:
    train: list[int] = field(default_factory=list)
    val: list[int] = field(default_factory=list)
    test: list[int] = field(default_factory=list)
    calib: list[int] = field(default_factory=list)

    def as_tuple(self) -> tuple[list[int], list[int], list[int], list[int]]:
        return self.train, self.val, self.test, self.calib

    def sizes(self) -> tuple[int, int, int, int]:
        return tuple(len(p) for p in self.as_tuple())


def _group_of(item: Any) -> str | None:
    if isinstance(item, Mapping):
        g = item.get("group_id")
    else:
        g = getattr(item, "group_id", None)
    return None if g in (None, "") else str(g)


def split_dataset(records: Sequence[Any], spec: SplitSpec) -> Split:
    """Assign every record to one of train/val/test/calib.

    Units (whole groups when ``spec.group_aware``, single records otherwise) are
    shuffled with the seed, laid end to end, and each unit goes to the
    partition whose cumulative-ratio band contains the unit's midpoint.
    Partition sizes therefore deviate from the ratios by at most one unit.
    """
    n = len(records)
    if n == 0:
        raise ValidationError("cannot split an empty dataset")

    if spec.group_aware:
        groups: dict[str, list[int]] = {}
        for i, item in enumerate(records):
            g = _group_of(item)
            if g is None:
                raise ValidationError(f"record {i} has no group_id but group_aware=True")
            groups.setdefault(g, []).append(i)
        # first-appearance order, then seeded shuffle
        units = list(groups.values())
    else:
        units = [[i] for i in range(n)]

    rng = np.random.default_rng(spec.seed)
    order = rng.permutation(len(units))
    bounds = np.cumsum(spec.ratios) * n
    bounds[-1] = np.inf

    parts: list[list[int]] = [[], [], [], []]
    filled = 0
    for u in order:
        members = units[u]
        mid = filled + len(members) / 2.0
        p = int(np.searchsorted(bounds, mid, side="right"))
        parts[min(p, 3)].extend(members)
        filled += len(members)
    return Split(*(sorted(p) for p in parts))


def parse_date(value: Any) -> _dt.date:
    if isinstance(value, _dt.datetime):
        return value.date()
    if isinstance(value, _dt.date):
        return value
    try:
        text = str(value).strip()
        if len(text) > 10:
            return _dt.datetime.fromisoformat(text).date()
        return _dt.date.fromisoformat(text)
    except ValueError as exc:
        raise ValidationError(f"malformed date {value!r}") from exc


def pair_within_window(
    image_dates: Sequence[tuple[str, Any]],
    dxa_dates: Sequence[tuple[str, Any]],
    window_days: int = 180,
) -> list[tuple[int, int]]:
    """Match each image to the nearest-dated DXA scan of the same subject.

    Entries are ``(subject_key, date)``. Returns ``(image_index, dxa_index)``
    pairs for images that have a DXA scan within ``window_days`` calendar days.
    Equal distances go to the earlier scan.
    """
    by_subject: dict[str, list[tuple[_dt.date, int]]] = {}
    for j, (key, d) in enumerate(dxa_dates):
        by_subject.setdefault(str(key), []).append((parse_date(d), j))
    images = [(str(key), parse_date(d)) for key, d in image_dates]

    pairs = []
    for i, (key, img_date) in enumerate(images):
        best = None
        for dxa_date, j in by_subject.get(key, ()):
            gap = abs((dxa_date - img_date).days)
            if gap > window_days:
                continue
            rank = (gap, dxa_date, j)
            if best is None or rank < best:
                best = rank
        if best is not None:
            pairs.append((i, best[2]))
    return pairs


class WhoCategory(enum.IntEnum):
    """Ordered from lowest to highest bone density."""

    OSTEOPOROSIS = 0
    OSTEOPENIA = 1
    NORMAL = 2

    @property
    def label(self) -> str:
        return self.name.capitalize()


def t_score(bmd: float, ref: TScoreReference) -> float:
    bmd = _require_finite("bmd", bmd)
    return (bmd - ref.mu_ref) / ref.sigma_ref


def who_category(t: float) -> WhoCategory:
    t = _require_finite("T-score", t)
    if t <= OSTEOPOROSIS_MAX_T:
        return WhoCategory.OSTEOPOROSIS
    if t < NORMAL_MIN_T:
        return WhoCategory.OSTEOPENIA
    return WhoCategory.NORMAL


def categories_for_t_range(t_lo: float, t_hi: float) -> frozenset[WhoCategory]:
    if t_lo > t_hi or math.isnan(t_lo) or math.isnan(t_hi):
        raise ValidationError(f"invalid T-score range [{t_lo}, {t_hi}]")
    cats = set()
    if t_lo <= OSTEOPOROSIS_MAX_T:
        cats.add(WhoCategory.OSTEOPOROSIS)
    if t_lo < NORMAL_MIN_T and t_hi > OSTEOPOROSIS_MAX_T:
        cats.add(WhoCategory.OSTEOPENIA)
    if t_hi >= NORMAL_MIN_T:
        cats.add(WhoCategory.NORMAL)
    return frozenset(cats)


def who_category_set(interval, ref: TScoreReference) -> frozenset[WhoCategory]:
    """WHO categories compatible with a BMD prediction interval.

    Endpoints may be infinite; the T-score map is affine so the BMD interval
    maps onto ``[t(lower), t(upper)]``.
    """
    if interval.lower > interval.upper:
        raise ValidationError("interval lower bound exceeds upper bound")
    t_lo = (interval.lower - ref.mu_ref) / ref.sigma_ref
    t_hi = (interval.upper - ref.mu_ref) / ref.sigma_ref
    return categories_for_t_range(t_lo, t_hi)


def format_categories(cats: Iterable[WhoCategory]) -> str:
    return "|".join(c.label for c in sorted(cats))


# -- CSV ingestion ---------------------------------------------------------

RECORD_HEADER = ("id", "y_true", "y_pred")
BUNDLE_HEADER = ("id", "y_true", "aug_index", "y_pred")


def _read_rows(path: str | Path) -> tuple[list[str], list[dict[str, str]]]:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            rows = list(reader)
            header = list(reader.fieldnames or [])
    except FileNotFoundError as exc:
        raise ValidationError(f"no such file: {path}") from exc
    return header, rows


def _float(row: dict[str, str], key: str, where: str) -> float:
    try:
        value = float(row[key])
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"{where}: column {key!r} is not a number: {row.get(key)!r}") from exc
    return _require_finite(f"{where} {key}", value)


def detect_format(path: str | Path) -> str:
    """Return ``"bundles"`` or ``"records"`` from the CSV header."""
    header, _ = _read_rows(path)
    if "aug_index" in header:
        return "bundles"
    if all(c in header for c in RECORD_HEADER):
        return "records"
    raise ValidationError(f"{path}: unrecognised header {header}")


def read_records(path: str | Path) -> list[PredictionRecord]:
    header, rows = _read_rows(path)
    missing = [c for c in RECORD_HEADER if c not in header]
    if missing:
        raise ValidationError(f"{path}: missing columns {missing}")
    if not rows:
        raise ValidationError(f"{path}: no data rows")
    out = []
    for n, row in enumerate(rows, start=2):
        where = f"{path}:{n}"
        out.append(PredictionRecord(
            id=row["id"],
            y_true=_float(row, "y_true", where),
            y_pred=_float(row, "y_pred", where),
            group_id=row.get("group_id") or None,
        ))
    return out


def read_bundles(path: str | Path) -> list[AugmentedPredictionBundle]:
    header, rows = _read_rows(path)
    missing = [c for c in BUNDLE_HEADER if c not in header]
    if missing:
        raise ValidationError(f"{path}: missing columns {missing}")
    if not rows:
        raise ValidationError(f"{path}: no data rows")

    cases: dict[str, dict] = {}
    for n, row in enumerate(rows, start=2):
        where = f"{path}:{n}"
        case = cases.setdefault(row["id"], {"y_true": _float(row, "y_true", where), "preds": {}})
        if _float(row, "y_true", where) != case["y_true"]:
            raise ValidationError(f"{where}: y_true differs between rows of id {row['id']!r}")
        try:
            k = int(row["aug_index"])
        except ValueError as exc:
            raise ValidationError(f"{where}: bad aug_index {row['aug_index']!r}") from exc
        if k in case["preds"]:
            raise ValidationError(f"{where}: duplicate aug_index {k} for id {row['id']!r}")
        case["preds"][k] = _float(row, "y_pred", where)

    bundles = []
    for cid, case in cases.items():
        idx = sorted(case["preds"])
        if idx != list(range(len(idx))):
            raise ValidationError(f"{path}: id {cid!r} aug_index must run 0..K-1, got {idx}")
        bundles.append(AugmentedPredictionBundle(cid, case["y_true"], tuple(case["preds"][k] for k in idx)))
    check_uniform_k(bundles)
    return bundles


def read_as_bundles(path: str | Path) -> list[AugmentedPredictionBundle]:
    """Load either CSV layout; single-prediction files become K=1 bundles."""
    if detect_format(path) == "bundles":
        return read_bundles(path)
    return [AugmentedPredictionBundle.from_record(r) for r in read_records(path)]


def check_uniform_k(bundles: Sequence[AugmentedPredictionBundle]) -> int:
    if not bundles:
        raise ValidationError("no bundles given")
    ks = {b.k for b in bundles}
    if len(ks) != 1:
        raise ValidationError(f"inconsistent augmentation counts across bundles: {sorted(ks)}")
    return ks.pop()
