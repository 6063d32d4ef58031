"""Synthetic regression tasks and Monte Carlo coverage experiments.

A base model is trained once per task. Each trial then draws fresh
calibration and test sets from its own counter-based generator, simulates
test-time augmentation as jitter on the model's predictions, calibrates, and
records coverage and mean width. Trials are independent and reduced in index
order, so results do not depend on how many threads ran them.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path

import numpy as np

from .conformal import ABSOLUTE, NORMALIZED, SCORE_KINDS, fit_calibrator
from .core import AugmentedPredictionBundle, ValidationError
from .trainer import LinearModel, TrainConfig, train
from .tta import multi_sample_scores_array, spread_array, traditional_scores_array

NOISE_MODELS = ("gaussian", "heteroscedastic", "heavy_tail")
STRATEGIES = ("none", "traditional", "multi")


@dataclass(frozen=True)
class SyntheticTask:
    n_train: int = 1000
    n_val: int = 200
    n_calib: int = 500
    n_test: int = 2000
    dim: int = 8
    true_weights: tuple[float, ...] | None = None
    intercept: float = 0.85
    weight_scale: float = 0.05
    noise: str = "gaussian"
    noise_scale: float = 0.1
    tail_dof: float = 3.0
    aug_jitter: float = 0.02
    aug_mode: str = "additive"
    # scale each case's jitter with its noise level (heteroscedastic tasks only)
    aug_follows_noise: bool = False
    k_augment: int = 8
    seed: int = 0

    def __post_init__(self):
        for name in ("n_train", "n_val", "n_calib", "n_test", "dim", "k_augment"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")
        if self.n_val < 2:
            raise ValidationError("n_val must be >= 2")
        if self.noise not in NOISE_MODELS:
            raise ValidationError(f"noise must be one of {NOISE_MODELS}")
        if self.noise_scale < 0 or self.aug_jitter < 0 or self.weight_scale < 0:
            raise ValidationError("noise_scale, aug_jitter and weight_scale must be >= 0")
        if self.aug_mode not in ("additive", "multiplicative"):
            raise ValidationError("aug_mode must be 'additive' or 'multiplicative'")
        if self.tail_dof <= 2:
            raise ValidationError("tail_dof must exceed 2")
        if self.true_weights is not None:
            object.__setattr__(self, "true_weights", tuple(float(w) for w in self.true_weights))
            if len(self.true_weights) != self.dim:
                raise ValidationError("true_weights must have dim entries")

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticTask":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValidationError(f"unknown task keys: {sorted(unknown)}")
        return cls(**d)


def _generator(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=key)))


def task_weights(task: SyntheticTask) -> np.ndarray:
    if task.true_weights is not None:
        return np.asarray(task.true_weights)
    return _generator(task.seed, 0, 0).normal(0.0, task.weight_scale, size=task.dim)


def _noise_sd(task: SyntheticTask, X: np.ndarray) -> np.ndarray:
    if task.noise == "heteroscedastic":
        return task.noise_scale * (0.25 + np.abs(X[:, 0]))
    return np.full(X.shape[0], task.noise_scale)


def draw_cases(task: SyntheticTask, rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
    X = rng.standard_normal((n, task.dim))
    sd = _noise_sd(task, X)
    if task.noise == "heavy_tail":
        eps = rng.standard_t(task.tail_dof, size=n)
    else:
        eps = rng.standard_normal(n)
    y = task.intercept + X @ task_weights(task) + sd * eps
    return X, y


def augment(task: SyntheticTask, rng: np.random.Generator, X: np.ndarray, pred: np.ndarray) -> np.ndarray:
    """(N, K) matrix of simulated augmented predictions around ``pred``."""
    scale = np.full(pred.shape, task.aug_jitter)
    if task.aug_follows_noise and task.noise_scale > 0:
        scale = scale * _noise_sd(task, X) / task.noise_scale
    jitter = rng.standard_normal((pred.size, task.k_augment)) * scale[:, None]
    if task.aug_mode == "multiplicative":
        return pred[:, None] * (1.0 + jitter)
    return pred[:, None] + jitter


@dataclass
class SyntheticData:
    model: LinearModel
    train: tuple[np.ndarray, np.ndarray]
    val: tuple[np.ndarray, np.ndarray]
    calib: tuple[np.ndarray, np.ndarray]
    test: tuple[np.ndarray, np.ndarray]
    calib_bundles: list[AugmentedPredictionBundle]
    test_bundles: list[AugmentedPredictionBundle]
    train_log: list[dict] = field(default_factory=list)


def fit_base_model(task: SyntheticTask, config: TrainConfig | None = None):
    rng = _generator(task.seed, 0, 1)
    Xtr, ytr = draw_cases(task, rng, task.n_train)
    Xv, yv = draw_cases(task, rng, task.n_val)
    config = config or TrainConfig(batch_size=32, max_epochs=150, seed=task.seed)
    result = train(Xtr, ytr, Xv, yv, config)
    return result, (Xtr, ytr), (Xv, yv)


def _bundles(prefix: str, y: np.ndarray, preds: np.ndarray) -> list[AugmentedPredictionBundle]:
    return [AugmentedPredictionBundle(f"{prefix}{i}", float(t), tuple(float(p) for p in row))
            for i, (t, row) in enumerate(zip(y, preds))]


def generate(task: SyntheticTask, config: TrainConfig | None = None) -> SyntheticData:
    """One full synthetic dataset: trained model, splits, and calibration/test bundles."""
    result, tr, va = fit_base_model(task, config)
    rng = _generator(task.seed, 2)
    Xc, yc = draw_cases(task, rng, task.n_calib)
    Xt, yt = draw_cases(task, rng, task.n_test)
    pc = augment(task, rng, Xc, result.model.predict(Xc))
    pt = augment(task, rng, Xt, result.model.predict(Xt))
    return SyntheticData(model=result.model, train=tr, val=va, calib=(Xc, yc), test=(Xt, yt),
                         calib_bundles=_bundles("c", yc, pc), test_bundles=_bundles("t", yt, pt),
                         train_log=result.log)


# -- Monte Carlo -----------------------------------------------------------

def _radius_and_scores(strategy: str, y, base_pred, aug, score_kind):
    if strategy == "none":
        if score_kind == NORMALIZED:
            raise ValidationError("normalized scores need augmentations; use 'traditional' or 'multi'")
        return np.abs(y - base_pred)
    if strategy == "traditional":
        return traditional_scores_array(y, aug, score_kind)
    return multi_sample_scores_array(y, aug, score_kind)


def _one_trial(task, model, trial, alphas, strategies, score_kind):
    rng = _generator(task.seed, 1, trial)
    Xc, yc = draw_cases(task, rng, task.n_calib)
    Xt, yt = draw_cases(task, rng, task.n_test)
    pc, pt = model.predict(Xc), model.predict(Xt)
    ac, at = augment(task, rng, Xc, pc), augment(task, rng, Xt, pt)

    cov = np.empty((len(strategies), len(alphas)))
    width = np.empty_like(cov)
    radius = np.empty_like(cov)
    for si, strat in enumerate(strategies):
        scores = _radius_and_scores(strat, yc, pc, ac, score_kind)
        center = pt if strat == "none" else at.mean(axis=1)
        scale = spread_array(at) if score_kind == NORMALIZED else 1.0
        for ai, alpha in enumerate(alphas):
            q = fit_calibrator(scores, alpha, score_kind=score_kind).q_radius
            if math.isinf(q):
                cov[si, ai], width[si, ai], radius[si, ai] = 1.0, math.inf, math.inf
                continue
            r = q * scale
            cov[si, ai] = np.mean((center - r <= yt) & (yt <= center + r))
            width[si, ai] = float(np.mean(np.broadcast_to(2.0 * r, yt.shape)))
            radius[si, ai] = q
    return cov, width, radius


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("CONFREG_THREADS", "1")))
    except ValueError:
        return 1


def run_trials(task, alphas, strategies, n_trials, score_kind=ABSOLUTE, model=None):
    """Arrays of shape (n_trials, n_strategies, n_alphas): coverage, width, radius."""
    if n_trials < 1:
        raise ValidationError("n_trials must be >= 1")
    if score_kind not in SCORE_KINDS:
        raise ValidationError(f"unknown score kind {score_kind!r}")
    for s in strategies:
        if s not in STRATEGIES:
            raise ValidationError(f"unknown strategy {s!r}; expected one of {STRATEGIES}")
    if model is None:
        model = fit_base_model(task)[0].model

    def job(t):
        return _one_trial(task, model, t, alphas, strategies, score_kind)

    workers = _threads()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(job, range(n_trials)))
    else:
        results = [job(t) for t in range(n_trials)]
    cov, width, radius = (np.stack([r[i] for r in results]) for i in range(3))
    return cov, width, radius


@dataclass
class CoverageSummary:
    strategy: str
    alpha: float
    n_trials: int
    n_calib: int
    coverage_mean: float
    coverage_stderr: float
    width_mean: float
    radius_mean: float

    @property
    def lower_bound(self) -> float:
        return 1 - self.alpha - 3 * self.coverage_stderr

    @property
    def upper_bound(self) -> float:
        """Finite-sample ceiling ``1 - alpha + 1/(n+1)`` plus three standard errors."""
        return 1 - self.alpha + 1 / (self.n_calib + 1) + 3 * self.coverage_stderr

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("width_mean", "radius_mean"):
            if math.isinf(d[k]):
                d[k] = "inf"
        d["covers_nominal"] = bool(self.coverage_mean >= self.lower_bound)
        return d


def _summarise(strategy, alpha, n_calib, cov, width, radius) -> CoverageSummary:
    n = cov.size
    se = float(np.std(cov, ddof=1) / math.sqrt(n)) if n > 1 else math.nan
    return CoverageSummary(strategy=strategy, alpha=float(alpha), n_trials=n, n_calib=n_calib,
                           coverage_mean=float(np.mean(cov)), coverage_stderr=se,
                           width_mean=float(np.mean(width)), radius_mean=float(np.mean(radius)))


def _n_calib(task, strategy):
    return task.n_calib * task.k_augment if strategy == "multi" else task.n_calib


def coverage_trial(task: SyntheticTask, alpha: float, strategy: str = "none", n_trials: int = 200,
                   score_kind: str = ABSOLUTE, model=None) -> CoverageSummary:
    cov, width, radius = run_trials(task, [alpha], [strategy], n_trials, score_kind, model)
    return _summarise(strategy, alpha, _n_calib(task, strategy), cov[:, 0, 0], width[:, 0, 0], radius[:, 0, 0])


def strategy_face_off(task: SyntheticTask, alphas=(0.1, 0.05, 0.01), strategies=("traditional", "multi"),
                      n_trials: int = 200, score_kind: str = ABSOLUTE, model=None) -> list[CoverageSummary]:
    """One summary row per (strategy, alpha), all strategies sharing the same draws."""
    if len(strategies) < 1:
        raise ValidationError("need at least one strategy")
    cov, width, radius = run_trials(task, list(alphas), list(strategies), n_trials, score_kind, model)
    return [_summarise(s, a, _n_calib(task, s), cov[:, si, ai], width[:, si, ai], radius[:, si, ai])
            for si, s in enumerate(strategies) for ai, a in enumerate(alphas)]


def render_face_off(rows: list[CoverageSummary]) -> str:
    header = f"{'strategy':<12} {'level':>6} {'n_calib':>8} {'coverage':>9} {'stderr':>8} {'radius':>8} {'width':>8}"
    lines = [header, "-" * len(header)]
    for r in rows:
        lines.append(f"{r.strategy:<12} {round(100 * (1 - r.alpha)):>5d}% {r.n_calib:>8d} {r.coverage_mean:9.4f} "
                     f"{r.coverage_stderr:8.5f} {r.radius_mean:8.4f} {r.width_mean:8.4f}")
    return "\n".join(lines) + "\n"


# -- scenario files --------------------------------------------------------

SCENARIO_KEYS = {"name", "description", "task", "alphas", "strategies", "n_trials", "score", "train"}


@dataclass
class Scenario:
    name: str
    task: SyntheticTask
    alphas: tuple[float, ...] = (0.1, 0.05, 0.01)
    strategies: tuple[str, ...] = ("none", "traditional", "multi")
    n_trials: int = 200
    score: str = ABSOLUTE
    train: TrainConfig | None = None
    description: str = ""

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        unknown = set(d) - SCENARIO_KEYS
        if unknown:
            raise ValidationError(f"unknown scenario keys: {sorted(unknown)}")
        score = {"abs": ABSOLUTE, "normalized": NORMALIZED}.get(d.get("score", "abs"), d.get("score"))
        if score not in SCORE_KINDS:
            raise ValidationError(f"unknown score kind {d.get('score')!r}")
        alphas = tuple(float(a) for a in d.get("alphas", (0.1, 0.05, 0.01)))
        for a in alphas:
            if not 0 < a < 1:
                raise ValidationError(f"alpha {a} outside (0, 1)")
        strategies = tuple(d.get("strategies", ("none", "traditional", "multi")))
        for s in strategies:
            if s not in STRATEGIES:
                raise ValidationError(f"unknown strategy {s!r}")
        return cls(
            name=str(d.get("name", "scenario")),
            description=str(d.get("description", "")),
            task=SyntheticTask.from_dict(dict(d.get("task", {}))),
            alphas=alphas,
            strategies=strategies,
            n_trials=int(d.get("n_trials", 200)),
            score=score,
            train=TrainConfig.from_dict(d["train"]) if "train" in d else None,
        )

    def to_dict(self) -> dict:
        d = {"name": self.name, "description": self.description, "task": asdict(self.task),
             "alphas": list(self.alphas), "strategies": list(self.strategies),
             "n_trials": self.n_trials, "score": self.score}
        if self.train is not None:
            d["train"] = asdict(self.train)
        return d


def bundled_scenarios() -> list[str]:
    root = resources.files("confreg") / "scenarios"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def load_scenario(name_or_path: str | Path) -> Scenario:
    """Load a scenario from a JSON file, or by name from the bundled set."""
    path = Path(name_or_path)
    try:
        if path.is_file():
            text = path.read_text(encoding="utf-8")
        elif str(name_or_path) in bundled_scenarios():
            text = (resources.files("confreg") / "scenarios" / f"{name_or_path}.json").read_text(encoding="utf-8")
        else:
            raise ValidationError(f"no scenario file or bundled scenario named {name_or_path!r}")
        return Scenario.from_dict(json.loads(text))
    except (json.JSONDecodeError, TypeError) as exc:
        raise ValidationError(f"malformed scenario: {exc}") from exc


def run_scenario(scenario: Scenario) -> list[CoverageSummary]:
    model = fit_base_model(scenario.task, scenario.train)[0].model
    return strategy_face_off(scenario.task, scenario.alphas, scenario.strategies, scenario.n_trials,
                             scenario.score, model=model)
