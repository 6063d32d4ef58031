"""Small differentiable regressor trained with a robust-loss recipe.

Huber loss, decoupled-weight-decay moment optimizer, cosine annealing with
warm restarts (epoch granular), global-norm gradient clipping and early
stopping on validation Pearson R. The model is linear in the features, with
an optional tanh hidden layer.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields
from typing import Iterator

import numpy as np

from .core import ValidationError
from .metrics import pearson_r


@dataclass(frozen=True)
class TrainConfig:
    delta: float = 0.5
    lr_max: float = 5e-4
    weight_decay: float = 0.01
    t0: int = 10
    t_mult: int = 2
    lr_min: float = 1e-6
    clip_norm: float = 1.0
    patience: int = 15
    max_epochs: int = 200
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps_moment: float = 1e-8
    batch_size: int | None = None  # None = full batch
    hidden_units: int = 0
    init_scale: float = 0.01

    def __post_init__(self):
        if not self.delta > 0:
            raise ValidationError("delta must be positive")
        # equality allowed so a zero learning rate can freeze training
        if not (0 <= self.lr_min <= self.lr_max):
            raise ValidationError("need 0 <= lr_min <= lr_max")
        if self.patience < 1 or self.t0 < 1 or self.t_mult < 1:
            raise ValidationError("patience, t0 and t_mult must be >= 1")
        if self.max_epochs < 1:
            raise ValidationError("max_epochs must be >= 1")
        if not self.clip_norm > 0:
            raise ValidationError("clip_norm must be positive")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if self.hidden_units < 0:
            raise ValidationError("hidden_units must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class LinearModel:
    """``y = weights . x + bias``; with hidden weights, ``x`` is first mapped through ``tanh(x W + b)``."""

    weights: np.ndarray
    bias: float
    hidden_weights: np.ndarray | None = None
    hidden_bias: np.ndarray | None = None

    def params(self) -> dict[str, np.ndarray]:
        p = {"weights": np.asarray(self.weights, dtype=float), "bias": np.asarray(float(self.bias))}
        if self.hidden_weights is not None:
            p["hidden_weights"] = np.asarray(self.hidden_weights, dtype=float)
            p["hidden_bias"] = np.asarray(self.hidden_bias, dtype=float)
        return p

    @classmethod
    def from_params(cls, p: dict[str, np.ndarray]) -> "LinearModel":
        return cls(
            weights=p["weights"].copy(),
            bias=float(p["bias"]),
            hidden_weights=None if "hidden_weights" not in p else p["hidden_weights"].copy(),
            hidden_bias=None if "hidden_bias" not in p else p["hidden_bias"].copy(),
        )

    def predict(self, X) -> np.ndarray:
        return forward(self.params(), np.asarray(X, dtype=float))

    def to_dict(self) -> dict:
        return {k: v.tolist() for k, v in self.params().items()}

    @classmethod
    def from_dict(cls, d: dict) -> "LinearModel":
        try:
            return cls.from_params({k: np.asarray(v, dtype=float) for k, v in d.items()})
        except KeyError as exc:
            raise ValidationError(f"model file lacks {exc}") from exc


@dataclass
class TrainState:
    epoch: int = 0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    best_r: float = -math.inf
    since_improvement: int = 0
    best_params: dict[str, np.ndarray] | None = None

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "TrainState":
        return cls(m={k: np.zeros_like(v) for k, v in params.items()},
                   v={k: np.zeros_like(v) for k, v in params.items()})


@dataclass
class TrainResult:
    model: LinearModel
    log: list[dict]
    best_r: float
    epochs_run: int
    stopped_early: bool

    def log_jsonl(self) -> str:
        return "".join(json.dumps(rec, sort_keys=True) + "\n" for rec in self.log)


def huber_loss(residual, delta: float = 0.5):
    e = np.asarray(residual, dtype=float)
    if not np.all(np.isfinite(e)):
        raise ValidationError("non-finite residual")
    if not delta > 0:
        raise ValidationError("delta must be positive")
    a = np.abs(e)
    out = np.where(a <= delta, 0.5 * e * e, delta * (a - 0.5 * delta))
    return float(out) if out.ndim == 0 else out


def huber_grad(residual, delta: float = 0.5):
    e = np.asarray(residual, dtype=float)
    if not np.all(np.isfinite(e)):
        raise ValidationError("non-finite residual")
    if not delta > 0:
        raise ValidationError("delta must be positive")
    out = np.where(np.abs(e) <= delta, e, delta * np.sign(e))
    return float(out) if out.ndim == 0 else out


def cosine_warm_restart_lr(t_cur: float, t_i: float, lr_max: float, lr_min: float) -> float:
    if t_i <= 0:
        raise ValidationError("cycle length must be positive")
    if not 0 <= t_cur <= t_i:
        raise ValidationError(f"t_cur={t_cur} outside [0, {t_i}]")
    # endpoints returned verbatim so restarts and cycle ends are exact
    if t_cur == 0:
        return float(lr_max)
    if t_cur == t_i:
        return float(lr_min)
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * t_cur / t_i))


def cycle_position(epoch: int, t0: int, t_mult: int) -> tuple[int, int]:
    """``(t_cur, t_i)`` for a 0-based epoch under geometric cycle lengths."""
    t_cur, t_i = epoch, t0
    while t_cur >= t_i:
        t_cur -= t_i
        t_i *= t_mult
    return t_cur, t_i


def cycle_lengths(t0: int, t_mult: int, count: int) -> list[int]:
    return [t0 * t_mult ** i for i in range(count)]


def scheduled_lr(epoch: int, config: TrainConfig) -> float:
    t_cur, t_i = cycle_position(epoch, config.t0, config.t_mult)
    return cosine_warm_restart_lr(t_cur, t_i, config.lr_max, config.lr_min)


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_gradient(grad, max_norm: float = 1.0):
    """Rescale to L2 norm ``max_norm`` if larger. Accepts an array or a dict of arrays."""
    if not max_norm > 0:
        raise ValidationError("max_norm must be positive")
    as_dict = isinstance(grad, dict)
    grads = grad if as_dict else {"g": np.asarray(grad, dtype=float)}
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        raise ValidationError("non-finite gradient")
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads if as_dict else grads["g"]


def optimizer_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: TrainState,
                   lr: float, config: TrainConfig) -> tuple[dict[str, np.ndarray], TrainState]:
    """One moment-based update with weight decay applied to the parameters directly."""
    if params.keys() != grads.keys():
        raise ValidationError("parameter and gradient names differ")
    if not state.m:
        state = TrainState.zeros_like(params)
    t = state.step + 1
    b1, b2 = config.beta1, config.beta2
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValidationError(f"shape mismatch for {name}: {g.shape} vs {p.shape}")
        m = b1 * state.m[name] + (1 - b1) * g
        v = b2 * state.v[name] + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        new_params[name] = p - lr * (m_hat / (np.sqrt(v_hat) + config.eps_moment)) - lr * config.weight_decay * p
        new_m[name], new_v[name] = m, v
    new_state = TrainState(epoch=state.epoch, step=t, m=new_m, v=new_v, best_r=state.best_r,
                           since_improvement=state.since_improvement, best_params=state.best_params)
    return new_params, new_state


def init_params(n_features: int, config: TrainConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    s = config.init_scale
    if config.hidden_units:
        h = config.hidden_units
        return {
            "weights": rng.normal(0.0, s, size=h),
            "bias": np.asarray(0.0),
            "hidden_weights": rng.normal(0.0, 1.0 / math.sqrt(n_features), size=(n_features, h)),
            "hidden_bias": np.zeros(h),
        }
    return {"weights": rng.normal(0.0, s, size=n_features), "bias": np.asarray(0.0)}


def forward(params: dict[str, np.ndarray], X: np.ndarray) -> np.ndarray:
    if "hidden_weights" in params:
        X = np.tanh(X @ params["hidden_weights"] + params["hidden_bias"])
    return X @ params["weights"] + params["bias"]


def loss_and_grad(params: dict[str, np.ndarray], X: np.ndarray, y: np.ndarray,
                  delta: float) -> tuple[float, dict[str, np.ndarray]]:
    """Mean Huber loss over the batch and its gradient w.r.t. every parameter."""
    n = X.shape[0]
    hidden = "hidden_weights" in params
    h = np.tanh(X @ params["hidden_weights"] + params["hidden_bias"]) if hidden else X
    resid = h @ params["weights"] + params["bias"] - y
    loss = float(np.mean(huber_loss(resid, delta)))
    g_out = huber_grad(resid, delta) / n
    grads = {"weights": h.T @ g_out, "bias": np.asarray(g_out.sum())}
    if hidden:
        g_pre = np.outer(g_out, params["weights"]) * (1.0 - h * h)
        grads["hidden_weights"] = X.T @ g_pre
        grads["hidden_bias"] = g_pre.sum(axis=0)
    return loss, grads


def _batches(n: int, batch_size: int | None, rng: np.random.Generator) -> Iterator[np.ndarray]:
    if batch_size is None or batch_size >= n:
        yield np.arange(n)
        return
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def _as_matrix(X, name: str) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2 or X.shape[0] < 1 or X.shape[1] < 1:
        raise ValidationError(f"{name} must be a non-empty 2-D matrix")
    if not np.all(np.isfinite(X)):
        raise ValidationError(f"{name} contains non-finite values")
    return X


def train(features, targets, val_features, val_targets, config: TrainConfig = TrainConfig()) -> TrainResult:
    X = _as_matrix(features, "features")
    Xv = _as_matrix(val_features, "val_features")
    y = np.asarray(targets, dtype=float)
    yv = np.asarray(val_targets, dtype=float)
    if y.shape != (X.shape[0],) or yv.shape != (Xv.shape[0],):
        raise ValidationError("targets do not match feature rows")
    if Xv.shape[1] != X.shape[1]:
        raise ValidationError("train and validation feature widths differ")
    if not (np.all(np.isfinite(y)) and np.all(np.isfinite(yv))):
        raise ValidationError("targets contain non-finite values")
    if yv.size < 2 or np.ptp(yv) == 0:
        raise ValidationError("validation targets have zero variance; Pearson R is undefined")

    rng = np.random.default_rng(config.seed)
    params = init_params(X.shape[1], config, rng)
    params["bias"] = np.asarray(float(y.mean()))
    state = TrainState.zeros_like(params)
    # the untrained model is the first checkpoint
    state.best_r = pearson_r(forward(params, Xv), yv)
    state.best_params = {k: v.copy() for k, v in params.items()}

    log = []
    stopped = False
    for epoch in range(config.max_epochs):
        lr = scheduled_lr(epoch, config)
        total, seen = 0.0, 0
        for idx in _batches(X.shape[0], config.batch_size, rng):
            loss, grads = loss_and_grad(params, X[idx], y[idx], config.delta)
            grads = clip_gradient(grads, config.clip_norm)
            params, state = optimizer_step(params, grads, state, lr, config)
            total += loss * idx.size
            seen += idx.size
        state.epoch = epoch + 1
        r = pearson_r(forward(params, Xv), yv)
        if r > state.best_r:
            state.best_r = r
            state.best_params = {k: v.copy() for k, v in params.items()}
            state.since_improvement = 0
        else:
            state.since_improvement += 1
        log.append({"epoch": epoch, "lr": lr, "train_loss": total / seen,
                    "val_pearson_r": r, "best_so_far": state.best_r})
        if state.since_improvement >= config.patience:
            stopped = True
            break

    return TrainResult(model=LinearModel.from_params(state.best_params), log=log,
                       best_r=state.best_r, epochs_run=len(log), stopped_early=stopped)
