"""Equal-weight long-short decile backtests and rule-universe comparisons."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import stats

from .io import fmt

log = logging.getLogger(__name__)

N_DECILES = 10
YEAR = 252
MONTH = 21
STD_EPS = 1e-12


def form_deciles(values: np.ndarray, min_stocks: int = N_DECILES) -> np.ndarray | None:
    """Decile 1..10 per stock (0 where the signal is missing), or None if too few are valid.

    Stocks are ordered by value with ties broken by position (stock id). With
    ``n = 10q + r`` valid stocks every decile holds ``q`` names; the ``r``
    leftovers go pairwise to the outer deciles first (1 and 10, then 2 and 9,
    ...) and an odd one to decile 5, so the two legs always have equal size.
    A cross-section smaller than ten (allowed only through ``min_stocks``)
    puts its lowest name in decile 1, its highest in 10 and spreads the rest.
    """
    v = np.asarray(values, dtype=np.float64)
    ok = np.flatnonzero(np.isfinite(v))
    n = len(ok)
    if n < max(2, min_stocks):
        return None
    order = ok[np.lexsort((ok, v[ok]))]
    out = np.zeros(len(v), dtype=np.int64)
    if n < N_DECILES:
        out[order] = np.arange(n) * (N_DECILES - 1) // (n - 1) + 1
        return out
    out[order] = np.repeat(np.arange(1, N_DECILES + 1), decile_sizes(n))
    return out


def decile_sizes(n: int) -> np.ndarray:
    q, r = divmod(n, N_DECILES)
    sizes = np.full(N_DECILES, q, dtype=np.int64)
    if r % 2:
        sizes[4] += 1
    for j in range(r // 2):
        sizes[j] += 1
        sizes[N_DECILES - 1 - j] += 1
    return sizes


def annualize(period_returns: np.ndarray, R: int) -> tuple[float, float | None]:
    """Annualized mean and Sharpe ratio (None when volatility vanishes)."""
    x = np.asarray(period_returns, dtype=np.float64)
    if len(x) == 0:
        return float("nan"), None
    ret = float(x.mean() * YEAR / R)
    if len(x) < 2:
        return ret, None
    sd = float(x.std(ddof=1))
    if sd < STD_EPS:
        return ret, None
    return ret, float(x.mean() / sd * math.sqrt(YEAR / R))


def _side_weights(members: np.ndarray, sign: float) -> dict[int, float]:
    return {int(i): sign / len(members) for i in members}


def _drift(weights: dict[int, float], growth: Mapping[int, float]) -> dict[int, float]:
    out = {}
    for sign in (1.0, -1.0):
        side = {i: w * growth[i] for i, w in weights.items() if (w > 0) == (sign > 0)}
        total = sum(side.values())
        if total != 0:
            out.update({i: sign * abs(w / total) for i, w in side.items()})
    return out


def turnover(new: Mapping[int, float], drifted: Mapping[int, float]) -> float:
    keys = set(new) | set(drifted)
    return float(sum(abs(new.get(i, 0.0) - drifted.get(i, 0.0)) for i in keys))


@dataclass
class BacktestReport:
    name: str
    R: int
    ret: float
    sr: float | None
    to: float | None
    n_periods: int
    period_returns: np.ndarray
    rebalance_days: np.ndarray
    decile_ret: np.ndarray
    decile_sr: list
    skipped_days: list = field(default_factory=list)
    turnovers: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def sr_undefined(self) -> bool:
        return self.sr is None

    def metrics(self) -> dict:
        return {"name": self.name, "R": self.R, "ret": self.ret, "sr": self.sr, "to": self.to,
                "n_periods": self.n_periods, "sr_undefined": self.sr_undefined,
                "skipped_days": len(self.skipped_days)}

    def to_dict(self) -> dict:
        d = self.metrics()
        d["deciles"] = [{"decile": k + 1, "ret": float(self.decile_ret[k]), "sr": self.decile_sr[k]}
                        for k in range(N_DECILES)]
        d["period_returns"] = [float(x) for x in self.period_returns]
        d["rebalance_days"] = [int(x) for x in self.rebalance_days]
        return d


def _rf_period(rf, t: int, R: int) -> float:
    if rf is None:
        return 0.0
    if np.isscalar(rf):
        return (1.0 + float(rf)) ** R - 1.0
    seg = np.asarray(rf, dtype=np.float64)[t + 1:t + R + 1]
    return float(np.prod(1.0 + seg) - 1.0)


def run_backtest(signal: np.ndarray, close: np.ndarray, R: int = 1, rf=0.0,
                 start: int = 0, end: int | None = None, name: str = "signal",
                 eligible: np.ndarray | None = None, min_stocks: int = N_DECILES) -> BacktestReport:
    """Long decile 10 / short decile 1, rebalanced every ``R`` days over ``[start, end]``.

    A period formed on day t earns ``close[t+R]/close[t] - 1`` per stock and
    needs ``t + R <= end``. Stocks need a signal and finite closes at both
    ends. ``rf`` is a constant daily rate or a per-day series aligned with the
    panel; excess returns subtract the compounded rate over the period.
    """
    sig = np.asarray(signal, dtype=np.float64)
    c = np.asarray(close, dtype=np.float64)
    S, T = c.shape
    end = T - 1 if end is None else min(end, T - 1)
    if R < 1:
        raise ValueError("holding period must be >= 1")
    period_rets, days, tos, skipped = [], [], [], []
    dec_rets = [[] for _ in range(N_DECILES)]
    prev, prev_growth = None, None
    for t in range(start, end - R + 1, R):
        with np.errstate(invalid="ignore", divide="ignore"):
            r = c[:, t + R] / c[:, t] - 1.0
        ok = np.isfinite(sig[:, t]) & np.isfinite(r)
        if eligible is not None:
            ok &= eligible[:, t]
        dec = form_deciles(np.where(ok, sig[:, t], np.nan), min_stocks)
        if dec is None:
            log.warning("day %d: fewer than %d stocks with a valid signal; skipped", t, max(2, min_stocks))
            skipped.append(t)
            prev = None
            continue
        rf_p = _rf_period(rf, t, R)
        longs = np.flatnonzero(dec == N_DECILES)
        shorts = np.flatnonzero(dec == 1)
        period_rets.append(r[longs].mean() - r[shorts].mean() - rf_p)
        for k in range(N_DECILES):
            members = dec == k + 1
            if members.any():
                dec_rets[k].append(r[members].mean() - rf_p)
        new = _side_weights(longs, 1.0)
        new.update(_side_weights(shorts, -1.0))
        if prev is not None:
            tos.append(turnover(new, _drift(prev, prev_growth)))
        prev = new
        prev_growth = {int(i): 1.0 + r[i] for i in np.concatenate([longs, shorts])}
        days.append(t)
    x = np.asarray(period_rets)
    ret, sr = annualize(x, R)
    to = float(np.mean(tos) * MONTH / R) if tos else None
    dr = np.full(N_DECILES, np.nan)
    dsr = [None] * N_DECILES
    for k in range(N_DECILES):
        dr[k], dsr[k] = annualize(np.asarray(dec_rets[k]), R)
    return BacktestReport(name, R, ret, sr, to, len(x), x, np.asarray(days, dtype=np.int64), dr, dsr,
                          skipped, np.asarray(tos))


@dataclass
class DistributionComparison:
    ids: list
    sr_a: np.ndarray
    sr_b: np.ndarray
    diff: np.ndarray
    t: float
    p: float
    flag: str  # "ok", "no-difference" or "degenerate"

    @property
    def n(self) -> int:
        return len(self.diff)

    @property
    def mean_a(self) -> float:
        return float(self.sr_a.mean())

    @property
    def mean_b(self) -> float:
        return float(self.sr_b.mean())

    def to_dict(self) -> dict:
        return {"n": self.n, "mean_a": self.mean_a, "mean_b": self.mean_b,
                "mean_diff": float(self.diff.mean()), "t": self.t, "p": self.p, "flag": self.flag}


def paired_t(diff: np.ndarray) -> tuple[float, float, str]:
    """One-sided test of mean(diff) > 0."""
    d = np.asarray(diff, dtype=np.float64)
    n = len(d)
    if n < 2:
        raise ValueError("need at least two paired observations")
    m = float(d.mean())
    sd = float(d.std(ddof=1))
    if sd < STD_EPS:
        if abs(m) < STD_EPS:
            return 0.0, 0.5, "no-difference"
        return math.copysign(math.inf, m), 0.0 if m > 0 else 1.0, "degenerate"
    t = m / (sd / math.sqrt(n))
    return t, float(stats.t.sf(t, n - 1)), "ok"


def compare_universes(sr_a: Mapping[str, float | None], sr_b: Mapping[str, float | None]) -> DistributionComparison:
    """Paired comparison of two rule-id -> Sharpe maps; pairs with an undefined side are dropped."""
    if set(sr_a) != set(sr_b):
        raise ValueError("rule ids differ between the two universes")
    ids = [k for k in sr_a if sr_a[k] is not None and sr_b[k] is not None
           and np.isfinite(sr_a[k]) and np.isfinite(sr_b[k])]
    a = np.array([sr_a[k] for k in ids], dtype=np.float64)
    b = np.array([sr_b[k] for k in ids], dtype=np.float64)
    t, p, flag = paired_t(a - b)
    return DistributionComparison(ids, a, b, a - b, t, p, flag)


# ---------------------------------------------------------------------------
# report files

def write_metrics_csv(reports: Sequence[BacktestReport], path: str | Path, header: str | None = None) -> None:
    with Path(path).open("w", newline="") as fh:
        if header:
            fh.write(f"# {header}\n")
        w = csv.writer(fh)
        w.writerow(["strategy", "R", "ret", "sr", "to", "n_periods"])
        for r in reports:
            w.writerow([r.name, r.R, fmt(r.ret), "undefined" if r.sr is None else fmt(r.sr),
                        "" if r.to is None else fmt(r.to), r.n_periods])


def write_deciles_csv(reports: Sequence[BacktestReport], path: str | Path, header: str | None = None) -> None:
    with Path(path).open("w", newline="") as fh:
        if header:
            fh.write(f"# {header}\n")
        w = csv.writer(fh)
        w.writerow(["strategy", "decile", "ret", "sr"])
        for r in reports:
            for k in range(N_DECILES):
                w.writerow([r.name, k + 1, fmt(r.decile_ret[k]),
                            "undefined" if r.decile_sr[k] is None else fmt(r.decile_sr[k])])


def write_json(obj, path: str | Path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def histogram(values: np.ndarray, bins: int = 30, range_: tuple | None = None):
    v = np.asarray([x for x in values if x is not None and np.isfinite(x)], dtype=np.float64)
    counts, edges = np.histogram(v, bins=bins, range=range_)
    return counts, edges


def write_histogram_csv(values, path: str | Path, bins: int = 30, range_: tuple | None = None,
                        header: str | None = None) -> None:
    counts, edges = histogram(values, bins, range_)
    with Path(path).open("w", newline="") as fh:
        if header:
            fh.write(f"# {header}\n")
        w = csv.writer(fh)
        w.writerow(["lo", "hi", "count"])
        for i, n in enumerate(counts):
            w.writerow([fmt(edges[i]), fmt(edges[i + 1]), int(n)])


def write_histogram_svg(values, path: str | Path, title: str = "", bins: int = 30,
                        range_: tuple | None = None, description: str | None = None) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    v = [x for x in values if x is not None and np.isfinite(x)]
    with matplotlib.rc_context({"svg.hashsalt": "twma", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(5, 3.2))
        ax.hist(v, bins=bins, range=range_, color="#4a78b5", edgecolor="white")
        if v:
            ax.axvline(float(np.mean(v)), color="#c0392b", lw=1.2)
        ax.set_xlabel("annualized Sharpe ratio")
        ax.set_ylabel("rules")
        if title:
            ax.set_title(title, fontsize=10)
        fig.tight_layout()
        meta = {"Date": None}
        if description:
            meta["Description"] = description
        fig.savefig(path, format="svg", metadata=meta)
        plt.close(fig)
