"""Fit-smooth-predict aggregation of many features into one signal.

Each day t with at least two usable stocks gets a cross-sectional regression
of the R-day forward return on the day's features. The coefficients used on
day t are the mean of the fits from days ``t - window .. t - R``: those are
the fits whose responses have been realized by day t.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .lasso import LassoConvergenceError, adaptive_lasso, ols

log = logging.getLogger(__name__)

SMOOTH_WINDOW = 252


@dataclass
class AggregateResult:
    signal: np.ndarray      # (S, T)
    coef: np.ndarray        # (T, K + 1) daily fits, NaN rows where skipped
    smoothed: np.ndarray    # (T, K + 1) coefficients applied on each day
    method: str


def fit_cross_sections(features: np.ndarray, fwd: np.ndarray, method: str = "ols",
                       min_stocks: int = 2) -> np.ndarray:
    """Daily coefficients (intercept first); rows stay NaN for skipped days."""
    F = np.asarray(features, dtype=np.float64)
    S, T, K = F.shape
    coef = np.full((T, K + 1), np.nan)
    for t in range(T):
        X, y = F[:, t], fwd[:, t]
        ok = np.isfinite(y) & np.isfinite(X).all(axis=1)
        if ok.sum() < min_stocks:
            continue
        if method == "ols":
            coef[t] = ols(X[ok], y[ok])
        elif method in ("lasso", "adaptive-lasso", "adaptive_lasso"):
            try:
                coef[t] = adaptive_lasso(X[ok], y[ok]).coef
            except LassoConvergenceError as e:
                log.warning("day %d: %s; no fit", t, e)
        else:
            raise ValueError(f"unknown fit method {method!r}")
    return coef


def smooth_coefficients(coef: np.ndarray, window: int = SMOOTH_WINDOW, horizon: int = 1,
                        min_fits: int | None = None) -> np.ndarray:
    """Trailing mean over fits at days ``t - window .. t - horizon``.

    ``min_fits`` defaults to the number of days in that range, i.e. the full
    warm-up; a smaller value emits coefficients earlier.
    """
    T = len(coef)
    if min_fits is None:
        min_fits = window - horizon + 1
    min_fits = max(1, min_fits)
    out = np.full_like(coef, np.nan)
    have = np.isfinite(coef).all(axis=1)
    for t in range(T):
        lo, hi = max(0, t - window), t - horizon
        if hi < lo:
            continue
        rows = np.arange(lo, hi + 1)
        rows = rows[have[rows]]
        if len(rows) >= min_fits:
            out[t] = coef[rows].mean(axis=0)
    return out


def aggregate_signal(features: np.ndarray, fwd: np.ndarray, method: str = "ols",
                     window: int = SMOOTH_WINDOW, horizon: int = 1,
                     min_fits: int | None = None) -> AggregateResult:
    F = np.asarray(features, dtype=np.float64)
    coef = fit_cross_sections(F, np.asarray(fwd, dtype=np.float64), method)
    sm = smooth_coefficients(coef, window, horizon, min_fits)
    sig = sm[None, :, 0] + np.einsum("stk,tk->st", F, sm[:, 1:])
    sig[~np.isfinite(sig)] = np.nan
    return AggregateResult(sig, coef, sm, method)
