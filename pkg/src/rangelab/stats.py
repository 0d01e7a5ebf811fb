"""Small statistical helpers shared by the experiment modules."""

from __future__ import annotations

import math

import numpy as np

from .errors import ContractError


def wilson_ci(hits: int, trials: int, z: float = 1.96) -> tuple:
    """Wilson score interval for a binomial proportion.

    For hits = 0 the lower end is exactly 0 and the upper end is the
    usual one-sided bound, so zero-hit tails are never reported as 0.
    """
    if trials <= 0:
        raise ContractError("wilson_ci needs trials > 0")
    p = hits / trials
    z2 = z * z
    denom = 1.0 + z2 / trials
    center = (p + z2 / (2 * trials)) / denom
    half = z * math.sqrt(p * (1 - p) / trials + z2 / (4 * trials ** 2)) / denom
    return max(0.0, center - half), min(1.0, center + half)


def weighted_linear_fit(x, y, weights=None) -> dict:
    """Weighted least squares of y on x; slope, intercept, R^2, se_slope."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.size < 2:
        raise ContractError("need at least two points to fit a line")
    if np.allclose(x, x[0]):
        raise ContractError("degenerate design: all abscissae equal")
    w = np.ones_like(x) if weights is None else np.asarray(weights,
                                                           dtype=np.float64)
    w = w / w.sum()
    xbar = float((w * x).sum())
    ybar = float((w * y).sum())
    sxx = float((w * (x - xbar) ** 2).sum())
    sxy = float((w * (x - xbar) * (y - ybar)).sum())
    slope = sxy / sxx
    intercept = ybar - slope * xbar
    resid = y - (intercept + slope * x)
    ss_res = float((w * resid ** 2).sum())
    ss_tot = float((w * (y - ybar) ** 2).sum())
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    dof = max(x.size - 2, 1)
    se_slope = math.sqrt(max(ss_res, 0.0) / (sxx * dof))
    return {"slope": slope, "intercept": intercept, "r2": r2,
            "se_slope": se_slope, "points": int(x.size)}


def log_mean_exp(values: np.ndarray) -> float:
    """log(mean(exp(values))) computed stably."""
    values = np.asarray(values, dtype=np.float64)
    m = float(values.max())
    return m + math.log(float(np.exp(values - m).mean()))
