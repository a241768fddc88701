"""Technical trading rules evaluated stock by stock.

Every rule maps a price history to a position in {-1, 0, +1} per day (NaN
during warm-up or where the close is missing).
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np
import yaml
from numpy.lib.stride_tricks import sliding_window_view

from .. import kernels
from ..data import PricePanel
from .classic import rolling_mean

FAMILIES = {
    "filter": ("x",),
    "ma-cross": ("fast", "slow"),
    "support-resistance": ("n",),
    "channel-breakout": ("n", "c"),
    "obv-ma": ("fast", "slow"),
}
_INTEGER = {"fast", "slow", "n"}


class RuleConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TradingRule:
    family: str
    params: tuple  # ((name, value), ...) in family order

    @property
    def id(self) -> str:
        inner = ",".join(f"{k}={_fmt_param(v)}" for k, v in self.params)
        return f"{self.family}({inner})"

    def p(self, name: str):
        return dict(self.params)[name]

    @property
    def lookback(self) -> int:
        d = dict(self.params)
        if self.family == "filter":
            return 0
        if self.family in ("ma-cross",):
            return int(d["slow"]) - 1
        if self.family == "obv-ma":
            return int(d["slow"])
        return int(d["n"])


def _fmt_param(v) -> str:
    return str(int(v)) if float(v) == int(v) and not isinstance(v, float) else repr(float(v))


def rule_universe(grid: Mapping[str, Mapping[str, list]]) -> list[TradingRule]:
    """Cartesian product of each family's parameter lists, families in the order given."""
    rules, seen = [], set()
    for family, spec in grid.items():
        if family not in FAMILIES:
            raise RuleConfigError(f"unknown rule family {family!r}")
        names = FAMILIES[family]
        missing = [n for n in names if n not in spec]
        extra = sorted(set(spec) - set(names))
        if missing or extra:
            raise RuleConfigError(f"{family}: expected parameters {names}, missing {missing}, unexpected {extra}")
        lists = []
        for n in names:
            vals = list(spec[n])
            if not vals:
                raise RuleConfigError(f"{family}.{n}: empty grid")
            for v in vals:
                if not np.isfinite(v) or v <= 0:
                    raise RuleConfigError(f"{family}.{n}: parameters must be positive, got {v}")
                if n in _INTEGER and int(v) != v:
                    raise RuleConfigError(f"{family}.{n}: window must be an integer, got {v}")
            lists.append([int(v) if n in _INTEGER else float(v) for v in vals])
        if "fast" in names:
            if max(lists[0]) >= min(lists[1]):
                raise RuleConfigError(f"{family}: every fast window must be shorter than every slow window")
        for combo in itertools.product(*lists):
            r = TradingRule(family, tuple(zip(names, combo)))
            if r.id in seen:
                raise RuleConfigError(f"duplicate rule id {r.id}")
            seen.add(r.id)
            rules.append(r)
    return rules


def grid_size(grid: Mapping[str, Mapping[str, list]]) -> int:
    return sum(int(np.prod([len(v) for v in spec.values()])) for spec in grid.values())


def load_grid(path: str | Path) -> dict:
    data = yaml.safe_load(Path(path).read_text())
    return data.get("rules", data)


def default_grid(full: bool = False) -> dict:
    name = "rules_full.yaml" if full else "rules.yaml"
    return load_grid(Path(__file__).resolve().parent.parent / "configs" / name)


def _prior_extreme(c: np.ndarray, n: int, fn) -> np.ndarray:
    # extreme of c[t-n .. t-1]
    out = np.full_like(c, np.nan)
    if n < c.shape[1]:
        win = sliding_window_view(c, n, axis=1)[:, :-1]
        out[:, n:] = fn(win, axis=-1)
    return out


def obv(close: np.ndarray, volume: np.ndarray) -> np.ndarray:
    """On-balance volume; missing days add nothing and read as NaN."""
    c = np.asarray(close, float)
    v = np.asarray(volume, float)
    step = np.zeros_like(c)
    step[:, 1:] = np.sign(c[:, 1:] - c[:, :-1]) * v[:, 1:]
    step[~np.isfinite(step)] = 0.0
    out = np.cumsum(step, axis=1)
    out[~np.isfinite(c)] = np.nan
    return out


def _sign(x: np.ndarray) -> np.ndarray:
    out = np.sign(x)
    out[~np.isfinite(x)] = np.nan
    return out


def eval_rule_arrays(rule: TradingRule, close: np.ndarray, volume: np.ndarray | None = None) -> np.ndarray:
    c = np.asarray(close, dtype=np.float64)
    d = dict(rule.params)
    fam = rule.family
    if fam == "filter":
        out = np.asarray(kernels.filter_rule(np.ascontiguousarray(c), float(d["x"])))
    elif fam == "ma-cross":
        out = _sign(rolling_mean(c, d["fast"]) - rolling_mean(c, d["slow"]))
    elif fam == "obv-ma":
        if volume is None:
            raise ValueError("obv-ma needs volume")
        o = obv(c, volume)
        out = _sign(rolling_mean(o, d["fast"]) - rolling_mean(o, d["slow"]))
        # day 0 has no volume step; the first full slow window of steps ends at day `slow`
        out[:, :d["slow"]] = np.nan
    elif fam in ("support-resistance", "channel-breakout"):
        n = d["n"]
        hi = _prior_extreme(c, n, np.max)
        lo = _prior_extreme(c, n, np.min)
        with np.errstate(invalid="ignore"):
            out = np.where(c > hi, 1.0, np.where(c < lo, -1.0, 0.0))
            if fam == "channel-breakout":
                out = np.where((hi - lo) / lo <= d["c"], out, 0.0)
        out[~(np.isfinite(hi) & np.isfinite(lo) & np.isfinite(c))] = np.nan
    else:
        raise RuleConfigError(f"unknown rule family {fam!r}")
    return out


def eval_rule(rule: TradingRule, panel: PricePanel, day: int | None = None) -> np.ndarray:
    out = eval_rule_arrays(rule, panel.close, panel.volume)
    return out if day is None else out[:, day]
