"""Independent reference implementations used by several test modules."""

import math
from decimal import Decimal

import numpy as np

from confreg.trainer import loss_and_grad


def brute_force_quantile(scores, alpha):
    """Sort, then walk ranks until k >= (n + 1)(1 - alpha) in decimal arithmetic."""
    ordered = sorted(float(s) for s in scores)
    n = len(ordered)
    target = (n + 1) * (1 - Decimal(repr(float(alpha))))
    k = 1
    while k < target:
        k += 1
    return math.inf if k > n else ordered[k - 1]


def finite_difference(params, X, y, delta, h=1e-6):
    """Central differences of the mean Huber loss, one coordinate at a time."""
    out = {}
    for name, value in params.items():
        grad = np.zeros_like(value, dtype=float)
        it = np.nditer(value, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            plus = {k: v.copy() for k, v in params.items()}
            minus = {k: v.copy() for k, v in params.items()}
            plus[name][idx] += h
            minus[name][idx] -= h
            grad[idx] = (loss_and_grad(plus, X, y, delta)[0] - loss_and_grad(minus, X, y, delta)[0]) / (2 * h)
        out[name] = grad
    return out


def huber_reference(e, delta):
    """Piecewise definition written out with plain floats."""
    a = abs(e)
    return 0.5 * e * e if a <= delta else delta * (a - 0.5 * delta)
