"""Importance weights from localization matrices, weighted moving averages, EWMA and
time-scale transfer.

Weight vectors are stored most-recent-first: ``omega[..., 0]`` weights day t,
``omega[..., d]`` weights day t - d. Chart columns run oldest to newest, so the
column profile is reversed when converted.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .io import fmt, read_tensor, write_tensor

SUM_EPS = 1e-12


@dataclass(frozen=True)
class TripleIWeights:
    omega: np.ndarray
    source: str = "direct"

    def __post_init__(self):
        w = np.asarray(self.omega, dtype=np.float64)
        if w.ndim != 1 or len(w) == 0:
            raise ValueError("weights must be a nonempty vector")
        if (w < 0).any() or abs(w.sum() - 1) > 1e-10:
            raise ValueError("weights must be nonnegative and sum to 1")
        object.__setattr__(self, "omega", w)

    @property
    def D(self) -> int:
        return len(self.omega)


def interp_profile(profile: np.ndarray, D: int) -> np.ndarray:
    """Piecewise-linear resample of the last axis to length ``D``, endpoints pinned."""
    profile = np.asarray(profile, dtype=np.float64)
    n = profile.shape[-1]
    if D < 1:
        raise ValueError("D must be >= 1")
    if n == 1:
        return np.repeat(profile, D, axis=-1)
    pos = np.linspace(0.0, n - 1.0, D) if D > 1 else np.zeros(1)
    i0 = np.minimum(np.floor(pos).astype(int), n - 2)
    frac = pos - i0
    return profile[..., i0] * (1 - frac) + profile[..., i0 + 1] * frac


def compress_resize_normalize_batch(mats: np.ndarray, D: int) -> tuple[np.ndarray, np.ndarray]:
    """``(..., H, W)`` localization matrices -> ``(..., D)`` weights and a fallback mask."""
    mats = np.asarray(mats, dtype=np.float64)
    prof = interp_profile(mats.mean(axis=-2), D)
    total = prof.sum(axis=-1, keepdims=True)
    fallback = total[..., 0] < SUM_EPS
    w = np.where(total < SUM_EPS, 1.0 / D, prof / np.where(total < SUM_EPS, 1.0, total))
    return w[..., ::-1].copy(), fallback


def compress_resize_normalize(mat: np.ndarray, D: int) -> TripleIWeights:
    w, fb = compress_resize_normalize_batch(mat, D)
    return TripleIWeights(w, "uniform-fallback" if bool(fb) else "direct")


def ewma_weights(lam: float, D: int) -> TripleIWeights:
    if not 0 < lam < 1:
        raise ValueError(f"smoothing parameter must lie in (0, 1), got {lam}")
    w = lam * (1 - lam) ** np.arange(D)
    return TripleIWeights(w / w.sum(), "ewma")


def uniform_weights(D: int) -> TripleIWeights:
    return TripleIWeights(np.full(D, 1.0 / D), "uniform-fallback")


def transfer_weights(period_weights: TripleIWeights | np.ndarray, period: int) -> TripleIWeights:
    """Spread each period's weight evenly over its ``period`` days."""
    if period < 1:
        raise ValueError("period must be >= 1")
    w = period_weights.omega if isinstance(period_weights, TripleIWeights) else np.asarray(period_weights, float)
    return TripleIWeights(np.repeat(w, period) / period, "transferred")


def transfer_weight_array(omega: np.ndarray, period: int) -> np.ndarray:
    return np.repeat(np.asarray(omega, dtype=np.float64), period, axis=-1) / period


def weighted_average(x: np.ndarray, omega: np.ndarray) -> np.ndarray:
    """``sum_d omega[s, t, d] * x[s, t - d]``; NaN without full history or weights.

    ``x`` is ``(S, T)``; ``omega`` is ``(S, T, D)`` (NaN rows mean no weights)
    or a single ``(D,)`` vector applied everywhere.
    """
    x = np.asarray(x, dtype=np.float64)
    S, T = x.shape
    omega = np.asarray(omega, dtype=np.float64)
    D = omega.shape[-1]
    if omega.ndim == 1:
        omega = np.broadcast_to(omega, (S, T, D))
    out = np.full((S, T), np.nan)
    if T < D:
        return out
    # lags[s, t', d] = x[s, t' + D - 1 - d] for t' = t - D + 1
    win = np.lib.stride_tricks.sliding_window_view(x, D, axis=1)[..., ::-1]
    out[:, D - 1:] = np.einsum("std,std->st", win, omega[:, D - 1:])
    return out


def twma(x: np.ndarray, omega: np.ndarray, yhat: np.ndarray | None = None) -> np.ndarray:
    """Weighted moving average choosing each cell's weights by predicted class.

    ``omega`` is ``(S, T, 2, D)`` when ``yhat`` is given, else ``(S, T, D)``.
    """
    omega = np.asarray(omega, dtype=np.float64)
    if yhat is not None:
        yhat = np.asarray(yhat)
        sel = np.clip(yhat, 0, 1).astype(np.int64)
        omega = np.take_along_axis(omega, sel[..., None, None], axis=2)[:, :, 0]
        omega = np.where((yhat < 0)[..., None], np.nan, omega)
    return weighted_average(x, omega)


@dataclass
class WeightPanel:
    """Per-(stock, day) weights for both classes and the ensemble prediction."""
    stocks: tuple
    dates: np.ndarray
    omega: np.ndarray       # (S, T, 2, D) most-recent-first; NaN where no image
    yhat: np.ndarray        # (S, T) int, -1 where no image
    probs: np.ndarray       # (S, T, 2)
    fallback: np.ndarray    # (S, T, 2) bool
    source: str = "direct"
    meta: dict = field(default_factory=dict)

    @property
    def D(self) -> int:
        return self.omega.shape[-1]

    def selected(self) -> np.ndarray:
        sel = np.clip(self.yhat, 0, 1)
        w = np.take_along_axis(self.omega, sel[..., None, None], axis=2)[:, :, 0]
        return np.where((self.yhat < 0)[..., None], np.nan, w)

    def stats(self) -> dict:
        have = self.yhat >= 0
        sel = self.selected()[have]
        return {"cells": int(have.sum()), "fallback_rate": float(self.fallback[have].mean()) if have.any() else 0.0,
                "mean_selected": sel.mean(axis=0).tolist() if len(sel) else [],
                "frac_up": float((self.yhat[have] == 1).mean()) if have.any() else 0.0}

    def transferred(self, period: int, dates: np.ndarray | None = None) -> WeightPanel:
        return WeightPanel(self.stocks, self.dates if dates is None else dates,
                           transfer_weight_array(self.omega, period), self.yhat, self.probs,
                           self.fallback, "transferred", dict(self.meta, period=period))

    def to_csv(self, path: str | Path, header: str | None = None) -> None:
        with Path(path).open("w", newline="") as fh:
            if header:
                fh.write(f"# {header}\n")
            w = csv.writer(fh)
            w.writerow(["ticker", "date", "class", "d", "omega"])
            for s, t in zip(*np.nonzero(self.yhat >= 0)):
                for j in (0, 1):
                    for d in range(self.D):
                        w.writerow([self.stocks[s], str(self.dates[t]), j, d + 1, fmt(self.omega[s, t, j, d])])

    def save(self, path: str | Path, **header) -> None:
        """Binary form: omega tensor plus ``.json`` sidecar of the index arrays."""
        path = Path(path)
        write_tensor(path, np.nan_to_num(self.omega, nan=-1.0), "f32", source=self.source,
                     stocks=list(self.stocks), dates=[str(d) for d in self.dates], meta=self.meta, **header)
        write_tensor(path.with_suffix(".aux"), np.concatenate(
            [self.yhat[..., None].astype(np.float64), self.probs, self.fallback.astype(np.float64)], axis=-1),
            "f64", **header)

    @classmethod
    def load(cls, path: str | Path) -> WeightPanel:
        path = Path(path)
        om, meta = read_tensor(path)
        aux, _ = read_tensor(path.with_suffix(".aux"))
        om = om.astype(np.float64)
        om[om < 0] = np.nan
        return cls(tuple(meta["stocks"]), np.array(meta["dates"], dtype="datetime64[D]"), om,
                   aux[..., 0].astype(np.int64), aux[..., 1:3], aux[..., 3:5] > 0.5,
                   meta.get("source", "direct"), meta.get("meta", {}))
