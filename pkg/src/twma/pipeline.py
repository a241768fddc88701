"""Glue between the modules: images from panels, ensembles, weight panels, TWMA signals."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import nn
from .chart import (STD_FLOOR, ChartSpec, NormStats, WindowIndex, apply_norm, fit_norm, panel_windows,
                    render_windows)
from .data import PricePanel, collapse_arrays, forward_returns
from .saliency import DEFAULT_B, DEFAULT_SIGMA_SCALE, explain_batch, resize_map
from .signals.aggregate import aggregate_signal
from .signals.alpha import default_alphas, eval_alpha
from .signals.classic import SIGNALS, rank_normalize_panel, trend_features
from .triple_i import WeightPanel, compress_resize_normalize_batch, ewma_weights, twma, weighted_average

log = logging.getLogger(__name__)


@dataclass
class TrainingSet:
    images: np.ndarray   # normalized (N, size, size, 3) float32
    y: np.ndarray
    win: WindowIndex
    norm: NormStats


def training_windows(panel: PricePanel, D: int, R: int, train_end: int, period: int = 1,
                     max_images: int | None = None, seed: int = 0) -> tuple[WindowIndex, np.ndarray]:
    """Windows ending before ``train_end`` whose R-step label is realized before it too."""
    span_R = R * period
    fwd = forward_returns(panel, span_R)
    T = panel.n_days
    mask = np.zeros(T, bool)
    last = train_end - 1 - span_R
    if last >= 0:
        mask[:last + 1] = True
    win = panel_windows(panel, D, mask, period)
    r = fwd[win.stock_idx, win.day_idx]
    keep = np.isfinite(r)
    win = win.subset(keep)
    y = (r[keep] > 0).astype(np.int64)
    if max_images is not None and len(win) > max_images:
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x1A6E]))
        idx = np.sort(rng.choice(len(win), max_images, replace=False))
        win, y = win.subset(idx), y[idx]
    return win, y


def windows_at(panel: PricePanel, D: int, stock_idx: np.ndarray, day_idx: np.ndarray,
               period: int = 1) -> WindowIndex:
    """Windows with the given stock / end-day indices (the inverse of storing a WindowIndex)."""
    si = np.asarray(stock_idx, dtype=np.int64)
    di = np.asarray(day_idx, dtype=np.int64)
    span = D * period
    if len(di) and (di.min() < span - 1 or di.max() >= panel.n_days):
        raise ValueError("window end day outside the panel")
    cols = di[:, None] - span + 1 + np.arange(span)
    arrays = [a[si[:, None], cols] for a in (panel.open, panel.high, panel.low, panel.close, panel.volume)]
    if period > 1:
        arrays = list(collapse_arrays(*arrays, period))
    return WindowIndex(si, di, tuple(np.ascontiguousarray(a) for a in arrays))


def build_training_set(panel: PricePanel, spec: ChartSpec, R: int, train_end: int, size: int,
                       period: int = 1, max_images: int | None = None, seed: int = 0) -> TrainingSet:
    win, y = training_windows(panel, spec.window_D, R, train_end, period, max_images, seed)
    if len(win) == 0:
        raise ValueError("no complete training windows; the training period is too short")
    raw = render_windows(win, spec, size)
    norm = fit_norm(raw)
    return TrainingSet(apply_norm(raw, norm).astype(np.float32), y, win, norm)


def train_ensemble(config: nn.ResNetConfig, ts: TrainingSet, seeds: Sequence[int],
                   on_epoch: Callable[[int, dict], None] | None = None, **train_kw):
    results = []
    for s in seeds:
        cb = (lambda h, s=s: on_epoch(s, h)) if on_epoch else None
        res = nn.train(config, ts.images, ts.y, seed=int(s), on_epoch=cb, **train_kw)
        results.append(res)
    return results


def noise_sigma(norm: NormStats, scale: float = DEFAULT_SIGMA_SCALE) -> np.ndarray:
    """Noise scale per channel in normalized units (channels with no spread stay noiseless)."""
    return np.array([scale if s > STD_FLOOR else 0.0 for s in norm.std])


def weight_panel(models: Sequence[nn.ResNetModel], panel: PricePanel, spec: ChartSpec, norm: NormStats,
                 size: int, day_mask: np.ndarray | None = None, period: int = 1, B: int = DEFAULT_B,
                 sigma_scale: float = DEFAULT_SIGMA_SCALE, seed: int = 0, chunk: int = 256) -> WeightPanel:
    """Ensemble-averaged importance weights for every renderable window.

    Each member's localization matrices are turned into weights separately and
    the weights are averaged; the predicted class comes from the mean
    probabilities.
    """
    D = spec.window_D
    S, T = panel.shape
    win = panel_windows(panel, D, day_mask, period)
    omega = np.full((S, T, 2, D), np.nan)
    yhat = np.full((S, T), -1, dtype=np.int64)
    probs = np.full((S, T, 2), np.nan)
    fallback = np.zeros((S, T, 2), dtype=bool)
    sigma = noise_sigma(norm, sigma_scale)
    for s0 in range(0, len(win), chunk):
        sub = win.subset(slice(s0, s0 + chunk))
        x = apply_norm(render_windows(sub, spec, size), norm).astype(np.float32)
        keys = sub.stock_idx.astype(np.int64) * T + sub.day_idx
        ex = explain_batch(models, x, B=B, sigma=sigma, seed=seed, keys=keys)
        w, fb = compress_resize_normalize_batch(ex.member_matrices, D)   # (M, n, 2, D)
        si, ti = sub.stock_idx, sub.day_idx
        omega[si, ti] = w.mean(axis=0)
        fallback[si, ti] = fb.all(axis=0)
        probs[si, ti] = ex.probs
        yhat[si, ti] = (ex.probs[:, 1] > ex.probs[:, 0]).astype(np.int64)
    meta = {"D": D, "period": period, "B": B, "sigma_scale": sigma_scale, "seed": seed,
            "members": len(models)}
    return WeightPanel(panel.stocks, panel.dates, omega, yhat, probs, fallback, "direct", meta)


def localization_for(models, panel: PricePanel, spec: ChartSpec, norm: NormStats, size: int,
                     first_day: int, n: int, B: int = DEFAULT_B, sigma_scale: float = DEFAULT_SIGMA_SCALE,
                     seed: int = 0):
    """Localization maps at input resolution for the first ``n`` windows ending on or after ``first_day``."""
    mask = np.zeros(panel.n_days, bool)
    mask[first_day:] = True
    win = panel_windows(panel, spec.window_D, mask)
    order = np.lexsort((win.stock_idx, win.day_idx))[:n]
    win = win.subset(order)
    x = apply_norm(render_windows(win, spec, size), norm).astype(np.float32)
    keys = win.stock_idx.astype(np.int64) * panel.n_days + win.day_idx
    ex = explain_batch(models, x, B=B, sigma=noise_sigma(norm, sigma_scale), seed=seed, keys=keys)
    yhat = (ex.probs[:, 1] > ex.probs[:, 0]).astype(np.int64)
    return win, resize_map(ex.matrices, size), yhat


def enhance(signal: np.ndarray, wp: WeightPanel) -> np.ndarray:
    return twma(signal, wp.omega, wp.yhat)


def transfer_panel(wp: WeightPanel, period: int) -> WeightPanel:
    return wp.transferred(period)


# ---------------------------------------------------------------------------
# signal variants

def base_features(panel: PricePanel, name: str, alphas=None, trend_lags=(5, 10, 20, 50)) -> np.ndarray:
    """``(S, T)`` for the single signals, ``(S, T, K)`` features for the composite ones."""
    if name in SIGNALS:
        return SIGNALS[name](panel)
    if name == "trend":
        return trend_features(panel, tuple(trend_lags))
    if name == "alpha":
        alphas = alphas if alphas is not None else default_alphas()
        return rank_normalize_panel(np.stack([eval_alpha(a, panel) for a in alphas.values()], axis=-1))
    raise ValueError(f"unknown signal {name!r}")


def _per_feature(F: np.ndarray, fn) -> np.ndarray:
    if F.ndim == 2:
        return fn(F)
    return np.stack([fn(F[..., k]) for k in range(F.shape[-1])], axis=-1)


def signal_variants(panel: PricePanel, name: str, weights: dict, R: int = 1, alphas=None,
                    trend_lags=(5, 10, 20, 50), smooth_window: int = 252,
                    min_fits: int | None = None) -> dict[str, np.ndarray]:
    """Original signal plus one re-weighted version per entry of ``weights``.

    ``weights`` maps a prefix ("TWMA", "EWMA(0.5)", ...) to a WeightPanel or a
    fixed weight vector. Composite signals re-weight every feature and then
    run the cross-sectional aggregation on the re-weighted features.
    """
    F = base_features(panel, name, alphas, trend_lags)
    label = name.upper()
    variants = {label: F}
    for prefix, w in weights.items():
        if isinstance(w, WeightPanel):
            variants[f"{prefix}-{label}"] = _per_feature(F, lambda x, w=w: twma(x, w.omega, w.yhat))
        else:
            variants[f"{prefix}-{label}"] = _per_feature(F, lambda x, w=w: weighted_average(x, np.asarray(w)))
    if F.ndim == 2:
        return variants
    method = "ols" if name == "trend" else "lasso"
    fwd = forward_returns(panel, R)
    return {k: aggregate_signal(v, fwd, method, smooth_window, R, min_fits).signal for k, v in variants.items()}


def ewma_bank(lambdas, D: int) -> dict[str, np.ndarray]:
    return {f"EWMA({float(lam):g})": ewma_weights(float(lam), D).omega for lam in lambdas}
