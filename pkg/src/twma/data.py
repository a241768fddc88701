"""Daily OHLCV panels: CSV I/O, synthetic generation, labels and down-sampling."""
from __future__ import annotations

import csv
import json
import logging
import math
import sys
import warnings
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path
from typing import Iterable, Iterator, Mapping

import numpy as np

log = logging.getLogger(__name__)

FIELDS = ("open", "high", "low", "close", "volume")
HEADER = ("date", "ticker", "open", "high", "low", "close", "volume")
RERANK_EVERY = 126


class PanelError(ValueError):
    """Base class for panel construction problems."""


class EmptyInputError(PanelError):
    pass


class PanelParseError(PanelError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class PanelValidationError(PanelError):
    def __init__(self, lines: list[int]):
        super().__init__(f"rows violating OHLCV invariants at lines {lines}")
        self.lines = lines


@dataclass(frozen=True)
class OhlcvBar:
    date: date
    open: float
    high: float
    low: float
    close: float
    volume: float

    def problems(self) -> list[str]:
        out = []
        prices = (self.open, self.high, self.low, self.close)
        if not all(math.isfinite(p) and p > 0 for p in prices):
            out.append("prices must be positive and finite")
        if not (math.isfinite(self.volume) and self.volume >= 0):
            out.append("volume must be nonnegative")
        if self.low > min(self.open, self.close):
            out.append("low above min(open, close)")
        if self.high < max(self.open, self.close):
            out.append("high below max(open, close)")
        if self.low > self.high:
            out.append("high below low")
        return out

    @property
    def valid(self) -> bool:
        return not self.problems()


@dataclass(frozen=True)
class ReturnLabel:
    stock: str
    day: date
    horizon_R: int
    r: float
    y: int


def _readonly(a: np.ndarray | None) -> np.ndarray | None:
    if a is None:
        return None
    a = np.ascontiguousarray(a, dtype=np.float64) if a.dtype != bool else np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


class PricePanel:
    """Dense ``(stock, day)`` OHLCV arrays; NaN marks a missing bar.

    Immutable after construction: the arrays are flagged read-only so the
    panel can be shared between threads.
    """

    def __init__(self, stocks: Iterable[str], dates: Iterable, open, high, low, close, volume,
                 mktcap=None, universe=None):
        self.stocks = tuple(stocks)
        self.dates = np.asarray(dates, dtype="datetime64[D]")
        self.dates.setflags(write=False)
        if self.dates.size > 1 and not np.all(np.diff(self.dates) > np.timedelta64(0, "D")):
            raise PanelError("calendar must be strictly increasing")
        shape = (len(self.stocks), self.dates.size)
        arrays = {}
        for name, a in zip(FIELDS, (open, high, low, close, volume)):
            a = np.asarray(a, dtype=np.float64)
            if a.shape != shape:
                raise PanelError(f"{name} has shape {a.shape}, expected {shape}")
            arrays[name] = _readonly(a)
        self.open = arrays["open"]
        self.high = arrays["high"]
        self.low = arrays["low"]
        self.close = arrays["close"]
        self.volume = arrays["volume"]
        self.mktcap = _readonly(None if mktcap is None else np.asarray(mktcap, dtype=np.float64))
        self.universe = _readonly(None if universe is None else np.asarray(universe, dtype=bool))
        self._index = {s: i for i, s in enumerate(self.stocks)}

    @property
    def n_stocks(self) -> int:
        return len(self.stocks)

    @property
    def n_days(self) -> int:
        return int(self.dates.size)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_stocks, self.n_days)

    @property
    def present(self) -> np.ndarray:
        return ~np.isnan(self.close)

    def stock_index(self, stock: str) -> int:
        return self._index[stock]

    def day_index(self, day) -> int:
        d = np.datetime64(day, "D")
        i = int(np.searchsorted(self.dates, d))
        if i >= self.n_days or self.dates[i] != d:
            raise KeyError(f"{day} not in calendar")
        return i

    def bar(self, stock: str, day) -> OhlcvBar | None:
        i, t = self.stock_index(stock), self.day_index(day)
        if np.isnan(self.close[i, t]):
            return None
        return OhlcvBar(self.dates[t].astype(date), float(self.open[i, t]), float(self.high[i, t]),
                        float(self.low[i, t]), float(self.close[i, t]), float(self.volume[i, t]))

    def bars(self) -> Iterator[tuple[str, OhlcvBar]]:
        for t in range(self.n_days):
            for i, s in enumerate(self.stocks):
                if not np.isnan(self.close[i, t]):
                    yield s, self.bar(s, self.dates[t])

    def in_universe(self) -> np.ndarray:
        """Boolean mask of tradable ``(stock, day)`` cells (size filter applied if any)."""
        if self.universe is None:
            return self.present
        return self.universe & self.present

    def invalid_cells(self) -> np.ndarray:
        o, h, l, c, v = self.open, self.high, self.low, self.close, self.volume
        with np.errstate(invalid="ignore"):
            bad = ~((o > 0) & (h > 0) & (l > 0) & (c > 0) & (v >= 0)
                    & (l <= np.minimum(o, c)) & (h >= np.maximum(o, c)) & (l <= h))
        return bad & self.present

    def __eq__(self, other) -> bool:
        if not isinstance(other, PricePanel):
            return NotImplemented

        def same(a, b):
            if a is None or b is None:
                return a is None and b is None
            return a.shape == b.shape and np.array_equal(a, b, equal_nan=a.dtype != bool)

        return (self.stocks == other.stocks and np.array_equal(self.dates, other.dates)
                and all(same(getattr(self, f), getattr(other, f)) for f in FIELDS)
                and same(self.mktcap, other.mktcap))

    def __repr__(self) -> str:
        return f"PricePanel(stocks={self.n_stocks}, days={self.n_days})"


@dataclass
class LoadSummary:
    rows_read: int = 0
    rows_rejected: int = 0
    rejected_lines: list[int] = field(default_factory=list)
    reasons: dict[int, list[str]] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({"rows_read": self.rows_read, "rows_rejected": self.rows_rejected,
                           "rejected_lines": self.rejected_lines,
                           "reasons": {str(k): v for k, v in self.reasons.items()}})


def _parse_float(text: str, line: int, name: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise PanelParseError(line, f"cannot parse {name}={text!r}") from None


def load_panel(path: str | Path, size_filter: int | None = None, strict: bool = False,
               report: bool = True) -> tuple[PricePanel, LoadSummary]:
    """Read ``date,ticker,open,high,low,close,volume[,mktcap]`` into a panel.

    Rows that parse but break the OHLCV invariants are dropped and listed in
    the returned summary (also written as JSON to stderr when ``report``);
    with ``strict`` they raise :class:`PanelValidationError` instead.
    ``size_filter=K`` keeps the top-K stocks by market cap, re-ranked every
    126 trading days.
    """
    path = Path(path)
    summary = LoadSummary()
    rows: dict[tuple[str, str], tuple] = {}
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header, first = None, 0
        for first, row in enumerate(reader, start=1):
            if row and row[0].lstrip().startswith("#"):
                continue  # leading comment lines (artifact headers)
            header = row
            break
        if header is None:
            raise EmptyInputError(f"{path} is empty")
        header = [h.strip().lower() for h in header]
        has_cap = header == [*HEADER, "mktcap"]
        if not has_cap and header != list(HEADER):
            raise PanelParseError(first, f"unexpected header {header}")
        width = len(header)
        for line, row in enumerate(reader, start=first + 1):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != width:
                raise PanelParseError(line, f"expected {width} fields, got {len(row)}")
            summary.rows_read += 1
            day_s, ticker = row[0].strip(), row[1].strip()
            try:
                day = date.fromisoformat(day_s)
            except ValueError:
                raise PanelParseError(line, f"bad ISO date {day_s!r}") from None
            if not ticker:
                raise PanelParseError(line, "empty ticker")
            vals = [_parse_float(row[k], line, header[k]) for k in range(2, width)]
            key = (ticker, day.isoformat())
            if key in rows:
                raise PanelParseError(line, f"duplicate bar for {ticker} on {day}")
            bar = OhlcvBar(day, *vals[:5])
            probs = bar.problems()
            if probs:
                summary.rows_rejected += 1
                summary.rejected_lines.append(line)
                summary.reasons[line] = probs
                continue
            rows[key] = (*vals,)
    if summary.rows_read == 0:
        raise EmptyInputError(f"{path} has no data rows")
    if strict and summary.rejected_lines:
        raise PanelValidationError(summary.rejected_lines)
    if report and summary.rows_rejected:
        print(summary.to_json(), file=sys.stderr)

    stocks = sorted({k[0] for k in rows})
    days = sorted({k[1] for k in rows})
    si = {s: i for i, s in enumerate(stocks)}
    ti = {d: i for i, d in enumerate(days)}
    shape = (len(stocks), len(days))
    arrs = [np.full(shape, np.nan) for _ in range(6 if has_cap else 5)]
    for (s, d), vals in rows.items():
        for a, v in zip(arrs, vals):
            a[si[s], ti[d]] = v
    mktcap = arrs[5] if has_cap else None
    universe = None
    if size_filter is not None:
        if mktcap is None:
            raise PanelError("size_filter needs a mktcap column")
        universe = size_universe(mktcap, size_filter)
    panel = PricePanel(stocks, np.array(days, dtype="datetime64[D]"), *arrs[:5],
                       mktcap=mktcap, universe=universe)
    return panel, summary


def size_universe(mktcap: np.ndarray, top_k: int, every: int = RERANK_EVERY) -> np.ndarray:
    """Top-K membership by market cap, frozen between re-ranking days."""
    S, T = mktcap.shape
    member = np.zeros((S, T), dtype=bool)
    for start in range(0, T, every):
        cap = mktcap[:, start]
        ok = np.flatnonzero(np.isfinite(cap))
        # stable: larger cap first, ties by stock order
        order = ok[np.argsort(-cap[ok], kind="stable")][:top_k]
        member[order, start:start + every] = True
    return member


def save_panel(panel: PricePanel, path: str | Path, header: str | None = None) -> None:
    """Write the CSV schema read by :func:`load_panel`; floats use shortest round-trip repr.

    ``header`` becomes a leading ``#`` comment line.
    """
    has_cap = panel.mktcap is not None
    with Path(path).open("w", newline="") as fh:
        if header:
            fh.write(f"# {header}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([*HEADER, "mktcap"] if has_cap else HEADER)
        for t in range(panel.n_days):
            d = str(panel.dates[t])
            for i, s in enumerate(panel.stocks):
                if np.isnan(panel.close[i, t]):
                    continue
                vals = [panel.open[i, t], panel.high[i, t], panel.low[i, t], panel.close[i, t],
                        panel.volume[i, t]]
                if has_cap:
                    vals.append(panel.mktcap[i, t])
                w.writerow([d, s, *(repr(float(v)) for v in vals)])


# ---------------------------------------------------------------------------
# synthetic panels

RECENCY_WEIGHTS = (0.35, 0.35, 0.1, 0.1, 0.1)

REGIMES = {
    "flat": {},
    "random_walk": {"vol": 0.02},
    "momentum": {"vol": 0.02, "drift_sd": 0.012, "persistence": 0.97},
    "reversal": {"vol": 0.02, "kappa": 0.3},
    # next-day return reverses a recency-weighted average of trailing 5-day returns
    "recency_reversal": {"vol": 0.02, "kappa": 0.12, "weights": RECENCY_WEIGHTS},
}


def _regime_params(regime: str | Mapping) -> tuple[str, dict]:
    if isinstance(regime, str):
        name, overrides = regime, {}
    else:
        regime = dict(regime)
        name = regime.pop("name")
        overrides = regime
    if name not in REGIMES:
        raise ValueError(f"unknown regime {name!r}; choose from {sorted(REGIMES)}")
    params = {**REGIMES[name], **overrides}
    return name, params


def synth_panel(n_stocks: int, n_days: int, seed: int, regime: str | Mapping = "random_walk",
                start: str = "2015-01-05") -> PricePanel:
    """Deterministic synthetic panel with optional planted return predictability.

    Daily bars come from a 16-step intraday log-price bridge between the open
    and the close, so high/low are the path extremes and the OHLC invariants
    hold by construction.
    """
    if n_stocks < 1 or n_days < 1:
        raise ValueError("n_stocks and n_days must be >= 1")
    name, p = _regime_params(regime)
    rng = np.random.default_rng(seed)
    dates = np.busday_offset(np.datetime64(start, "D"), np.arange(n_days), roll="forward")
    S, T = n_stocks, n_days
    stocks = [f"S{i:04d}" for i in range(S)]

    if name == "flat":
        ones = np.ones((S, T))
        return PricePanel(stocks, dates, ones, ones, ones, ones, np.full((S, T), 1e6),
                          mktcap=np.full((S, T), 1e9))

    vol = p["vol"]
    eps = rng.standard_normal((S, T)) * vol
    ret = np.zeros((S, T))
    if name == "random_walk":
        ret = eps
    elif name == "momentum":
        drift = np.zeros((S, T))
        shocks = rng.standard_normal((S, T)) * p["drift_sd"] * math.sqrt(1 - p["persistence"] ** 2)
        drift[:, 0] = rng.standard_normal(S) * p["drift_sd"]
        for t in range(1, T):
            drift[:, t] = p["persistence"] * drift[:, t - 1] + shocks[:, t]
        ret = drift + eps
    elif name == "reversal":
        ret[:, 0] = eps[:, 0]
        for t in range(1, T):
            ret[:, t] = -p["kappa"] * ret[:, t - 1] + eps[:, t]
    elif name == "recency_reversal":
        w = np.asarray(p["weights"], dtype=float)
        D = w.size
        for t in range(T):
            pred = 0.0
            if t >= D + 4:
                # trailing 5-day log returns ending at t-1, t-2, ..., t-D
                r5 = np.stack([ret[:, t - d - 5:t - d].sum(axis=1) for d in range(1, D + 1)], axis=1)
                pred = -p["kappa"] * (r5 @ w)
            ret[:, t] = pred + eps[:, t]

    log_p0 = np.log(10.0) + rng.standard_normal(S) * 0.5
    log_close = log_p0[:, None] + np.cumsum(ret, axis=1)
    prev_close = np.concatenate([log_p0[:, None], log_close[:, :-1]], axis=1)
    gap = rng.standard_normal((S, T)) * vol * 0.3
    log_open = prev_close + gap
    # Brownian bridge from open to close
    steps = 16
    incr = rng.standard_normal((S, T, steps)) * (vol / math.sqrt(steps))
    walk = np.concatenate([np.zeros((S, T, 1)), np.cumsum(incr, axis=2)], axis=2)
    frac = np.linspace(0.0, 1.0, steps + 1)
    bridge = walk - frac * walk[..., -1:]
    path = log_open[..., None] + frac * (log_close - log_open)[..., None] + bridge
    high = np.exp(path.max(axis=2))
    low = np.exp(path.min(axis=2))
    op = np.exp(log_open)
    cl = np.exp(log_close)
    high = np.maximum(high, np.maximum(op, cl))
    low = np.minimum(low, np.minimum(op, cl))
    base_vol = np.exp(rng.standard_normal(S) * 0.5 + 13.0)
    volume = np.round(base_vol[:, None] * np.exp(0.3 * rng.standard_normal((S, T))
                                                  + 8.0 * np.abs(ret)))
    shares = np.exp(rng.standard_normal(S) * 0.7 + 18.0)
    mktcap = cl * shares[:, None]
    return PricePanel(stocks, dates, op, high, low, cl, volume, mktcap=mktcap)


# ---------------------------------------------------------------------------
# labels and down-sampling

def forward_returns(panel: PricePanel, horizon: int) -> np.ndarray:
    """``close[t+R] / close[t] - 1`` by trading-day offset; NaN where undefined."""
    c = panel.close
    out = np.full(c.shape, np.nan)
    if horizon < panel.n_days:
        out[:, :-horizon] = c[:, horizon:] / c[:, :-horizon] - 1.0
    return out


@dataclass
class LabelSet:
    horizon_R: int
    r: np.ndarray
    y: np.ndarray
    n_skipped: int
    panel: PricePanel = field(repr=False)

    def to_records(self) -> list[ReturnLabel]:
        out = []
        for i, t in zip(*np.nonzero(~np.isnan(self.r))):
            out.append(ReturnLabel(self.panel.stocks[i], self.panel.dates[t].astype(date),
                                   self.horizon_R, float(self.r[i, t]), int(self.y[i, t])))
        return out

    def __len__(self) -> int:
        return int(np.count_nonzero(~np.isnan(self.r)))


def compute_labels(panel: PricePanel, horizon_R: int) -> LabelSet:
    """Binary direction labels ``y = 1`` iff the R-day return is strictly positive."""
    if horizon_R < 1:
        raise ValueError("horizon_R must be >= 1")
    r = forward_returns(panel, horizon_R)
    y = np.where(np.isnan(r), np.nan, (r > 0).astype(float))
    skipped = int(np.count_nonzero(panel.present & np.isnan(r)))
    if skipped:
        log.info("compute_labels: %d (stock, day) pairs lack day t+%d", skipped, horizon_R)
    return LabelSet(horizon_R, r, y, skipped, panel)


def collapse_arrays(o, h, l, c, v, period: int):
    """Aggregate the last axis in consecutive blocks of ``period``; trailing remainder dropped.

    A block with any missing value collapses to a missing bar.
    """
    n = o.shape[-1] // period
    cut = n * period

    def blocks(a):
        return a[..., :cut].reshape(*a.shape[:-1], n, period)

    ob, hb, lb, cb, vb = (blocks(np.asarray(a, dtype=float)) for a in (o, h, l, c, v))
    out = [ob[..., 0].copy(), hb.max(axis=-1), lb.min(axis=-1), cb[..., -1].copy(), vb.sum(axis=-1)]
    hole = np.isnan(cb).any(axis=-1)
    if hole.any():
        for a in out:
            a[hole] = np.nan
    return tuple(out)


def collapse_bars(panel: PricePanel, period: int) -> PricePanel:
    """Down-sample to one bar per ``period`` trading days, labelled by each block's last day."""
    if period < 2:
        raise ValueError("period must be >= 2")
    n = panel.n_days // period
    if n == 0:
        warnings.warn(f"panel has {panel.n_days} days, shorter than one period of {period}")
        empty = np.zeros((panel.n_stocks, 0))
        return PricePanel(panel.stocks, np.array([], dtype="datetime64[D]"), empty, empty,
                          empty, empty, empty)
    o, h, l, c, v = collapse_arrays(panel.open, panel.high, panel.low, panel.close,
                                    panel.volume, period)
    dates = panel.dates[period - 1:n * period:period]
    mktcap = None if panel.mktcap is None else panel.mktcap[:, period - 1:n * period:period]
    return PricePanel(panel.stocks, dates, o, h, l, c, v, mktcap=mktcap)
