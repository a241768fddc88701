"""Price-trend signals on dense ``(stocks, days)`` close arrays.

All signals are oriented so that a higher value is more bullish; cells without
enough history are NaN.
"""
from __future__ import annotations

import csv
from pathlib import Path
from typing import Mapping

import numpy as np
from scipy.stats import rankdata

from ..data import PricePanel
from ..io import fmt

MOM_SKIP = 21
MOM_LOOKBACK = 252
STR_LOOKBACK = 21
WSTR_LOOKBACK = 5
TREND_LAGS = (5, 10, 20, 50)


def _close(x) -> np.ndarray:
    return np.asarray(x.close if isinstance(x, PricePanel) else x, dtype=np.float64)


def lagged(a: np.ndarray, k: int) -> np.ndarray:
    """``out[:, t] = a[:, t - k]`` with NaN where ``t < k``."""
    out = np.full_like(a, np.nan, dtype=np.float64)
    if k == 0:
        out[:] = a
    elif k < a.shape[1]:
        out[:, k:] = a[:, :-k]
    return out


def mom(panel, skip: int = MOM_SKIP, lookback: int = MOM_LOOKBACK) -> np.ndarray:
    c = _close(panel)
    return lagged(c, skip) / lagged(c, lookback) - 1.0


def str_(panel, lookback: int = STR_LOOKBACK) -> np.ndarray:
    c = _close(panel)
    return -(c / lagged(c, lookback) - 1.0)


def wstr(panel, lookback: int = WSTR_LOOKBACK) -> np.ndarray:
    return str_(panel, lookback)


def rolling_mean(a: np.ndarray, n: int) -> np.ndarray:
    """Trailing ``n``-day mean along the time axis; NaN if any value in the window is missing."""
    a = np.asarray(a, dtype=np.float64)
    out = np.full_like(a, np.nan)
    if n <= a.shape[1]:
        win = np.lib.stride_tricks.sliding_window_view(a, n, axis=1)
        out[:, n - 1:] = win.mean(axis=-1)
    return out


def trend_features(panel, lags=TREND_LAGS) -> np.ndarray:
    """``(S, T, K)`` moving averages of close normalized by today's close."""
    c = _close(panel)
    return np.stack([rolling_mean(c, L) / c for L in lags], axis=-1)


def rank_normalize(values: np.ndarray) -> np.ndarray:
    """Average ranks mapped to ``2 r / (N + 1) - 1``; NaN entries stay NaN and are not counted."""
    v = np.asarray(values, dtype=np.float64)
    out = np.full_like(v, np.nan)
    ok = np.isfinite(v)
    n = int(ok.sum())
    if n:
        out[ok] = 2.0 * rankdata(v[ok]) / (n + 1) - 1.0
    return out


def rank_normalize_panel(a: np.ndarray) -> np.ndarray:
    """Apply :func:`rank_normalize` to every day's cross-section (axis 0) of ``(S, T[, K])``."""
    a = np.asarray(a, dtype=np.float64)
    out = np.full_like(a, np.nan)
    flat = a.reshape(a.shape[0], a.shape[1], -1)
    of = out.reshape(flat.shape)
    for t in range(flat.shape[1]):
        for k in range(flat.shape[2]):
            of[:, t, k] = rank_normalize(flat[:, t, k])
    return out


SIGNALS = {"mom": mom, "str": str_, "wstr": wstr}
LOOKBACKS = {"mom": MOM_LOOKBACK, "str": STR_LOOKBACK, "wstr": WSTR_LOOKBACK,
             "trend": max(TREND_LAGS), "alpha": 0}


def write_signals(path: str | Path, stocks, dates, signals: Mapping[str, np.ndarray],
                  header: str | None = None) -> None:
    """Long-format CSV ``ticker,date,signal_name,value`` skipping NaN cells."""
    with Path(path).open("w", newline="") as fh:
        if header:
            fh.write(f"# {header}\n")
        w = csv.writer(fh)
        w.writerow(["ticker", "date", "signal_name", "value"])
        for name, arr in signals.items():
            for s, t in zip(*np.nonzero(np.isfinite(arr))):
                w.writerow([stocks[s], str(dates[t]), name, fmt(arr[s, t])])
