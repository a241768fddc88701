"""A small expression language for formulaic alphas.

Grammar::

    expr   := term (("+" | "-") term)*
    term   := unary (("*" | "/") unary)*
    unary  := "-" unary | atom
    atom   := NUMBER | FIELD | NAME "(" expr ("," expr)* ")" | "(" expr ")"

Fields: ``close open high low volume returns``. Functions:
``delta(x, n)``, ``ts_mean(x, n)``, ``ts_std(x, n)``, ``ts_rank(x, n)``,
``ts_max(x, n)``, ``ts_min(x, n)``, ``ts_corr(x, y, n)``, ``rank(x)``,
``sign(x)``, ``abs(x)``. Window arguments are positive integer literals.
Time-series operators use trailing windows ending at the evaluation day and
yield NaN when any input in the window is missing; ``rank`` is the
cross-sectional average rank divided by the count, in ``(0, 1]``.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml
from numpy.lib.stride_tricks import sliding_window_view
from scipy.stats import rankdata

from ..data import PricePanel

FIELDS = ("close", "open", "high", "low", "volume", "returns")
# name -> (number of series args, takes a window)
FUNCS = {
    "delta": (1, True), "ts_mean": (1, True), "ts_std": (1, True), "ts_rank": (1, True),
    "ts_max": (1, True), "ts_min": (1, True), "ts_corr": (2, True),
    "rank": (1, False), "sign": (1, False), "abs": (1, False),
}


class AlphaSyntaxError(ValueError):
    def __init__(self, pos: int, msg: str, text: str = ""):
        super().__init__(f"syntax error at position {pos}: {msg}")
        self.pos = pos
        self.text = text


class AlphaTypeError(TypeError):
    def __init__(self, path: str, msg: str):
        super().__init__(f"type error at {path}: {msg}")
        self.path = path


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Field:
    name: str


@dataclass(frozen=True)
class Neg:
    arg: object


@dataclass(frozen=True)
class BinOp:
    op: str
    left: object
    right: object


@dataclass(frozen=True)
class Call:
    name: str
    args: tuple


_TOKEN = re.compile(r"\s*(?:(\d+\.\d*(?:[eE][-+]?\d+)?|\.\d+(?:[eE][-+]?\d+)?|\d+(?:[eE][-+]?\d+)?)|([A-Za-z_]\w*)|(.))")


def _tokenize(text: str):
    pos, out = 0, []
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None or m.end() == pos:
            break
        start = m.start(m.lastindex) if m.lastindex else pos
        if m.group(1) is not None:
            out.append(("num", m.group(1), start))
        elif m.group(2) is not None:
            out.append(("name", m.group(2), start))
        elif m.group(3) is not None:
            ch = m.group(3)
            if ch not in "+-*/(),":
                raise AlphaSyntaxError(start, f"unexpected character {ch!r}", text)
            out.append(("op", ch, start))
        pos = m.end()
    out.append(("end", "", len(text)))
    return out


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.toks = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.toks[self.i]

    def take(self, kind=None, value=None):
        tok = self.toks[self.i]
        if (kind and tok[0] != kind) or (value and tok[1] != value):
            want = value or kind
            got = tok[1] or "end of input"
            raise AlphaSyntaxError(tok[2], f"expected {want!r}, got {got!r}", self.text)
        self.i += 1
        return tok

    def expr(self):
        node = self.term()
        while self.peek()[0] == "op" and self.peek()[1] in "+-":
            op = self.take()[1]
            node = BinOp(op, node, self.term())
        return node

    def term(self):
        node = self.unary()
        while self.peek()[0] == "op" and self.peek()[1] in "*/":
            op = self.take()[1]
            node = BinOp(op, node, self.unary())
        return node

    def unary(self):
        if self.peek()[:2] == ("op", "-"):
            self.take()
            return Neg(self.unary())
        return self.atom()

    def atom(self):
        kind, val, pos = self.peek()
        if kind == "num":
            self.take()
            return Num(float(val))
        if kind == "name":
            self.take()
            if self.peek()[:2] == ("op", "("):
                if val not in FUNCS:
                    raise AlphaSyntaxError(pos, f"unknown function {val!r}", self.text)
                self.take()
                args = [self.expr()]
                while self.peek()[:2] == ("op", ","):
                    self.take()
                    args.append(self.expr())
                self.take("op", ")")
                return Call(val, tuple(args))
            if val not in FIELDS:
                raise AlphaSyntaxError(pos, f"unknown field {val!r}", self.text)
            return Field(val)
        if (kind, val) == ("op", "("):
            self.take()
            node = self.expr()
            self.take("op", ")")
            return node
        raise AlphaSyntaxError(pos, f"unexpected {val or 'end of input'!r}", self.text)


def _check(node, path="root") -> str:
    """Return ``"series"`` or ``"scalar"``; raise :class:`AlphaTypeError` on misuse."""
    if isinstance(node, Num):
        return "scalar"
    if isinstance(node, Field):
        return "series"
    if isinstance(node, Neg):
        return _check(node.arg, path + ".arg")
    if isinstance(node, BinOp):
        a = _check(node.left, path + ".left")
        b = _check(node.right, path + ".right")
        return "series" if "series" in (a, b) else "scalar"
    n_series, windowed = FUNCS[node.name]
    want = n_series + (1 if windowed else 0)
    if len(node.args) != want:
        raise AlphaTypeError(path, f"{node.name} takes {want} arguments, got {len(node.args)}")
    for i in range(n_series):
        if _check(node.args[i], f"{path}.args[{i}]") != "series":
            raise AlphaTypeError(f"{path}.args[{i}]", f"{node.name} expects a series, got a scalar")
    if windowed:
        w = node.args[-1]
        wpath = f"{path}.args[{n_series}]"
        if not isinstance(w, Num):
            raise AlphaTypeError(wpath, f"{node.name} window must be an integer literal, got a series")
        if w.value != int(w.value) or w.value < 1:
            raise AlphaTypeError(wpath, f"{node.name} window must be a positive integer, got {w.value}")
        if node.name == "ts_corr" and w.value < 2:
            raise AlphaTypeError(wpath, "ts_corr window must be at least 2")
    return "series"


@dataclass(frozen=True)
class AlphaExpr:
    tree: object
    text: str = ""

    @property
    def lookback(self) -> int:
        return lookback(self.tree)

    def __str__(self) -> str:
        return to_text(self.tree)


def parse_alpha(text: str) -> AlphaExpr:
    p = _Parser(text)
    tree = p.expr()
    tok = p.peek()
    if tok[0] != "end":
        raise AlphaSyntaxError(tok[2], f"unexpected {tok[1]!r} after expression", text)
    _check(tree)
    return AlphaExpr(tree, text)


def to_text(node) -> str:
    if isinstance(node, AlphaExpr):
        node = node.tree
    if isinstance(node, Num):
        v = node.value
        return str(int(v)) if v == int(v) and abs(v) < 1e15 else repr(v)
    if isinstance(node, Field):
        return node.name
    if isinstance(node, Neg):
        return f"(-{to_text(node.arg)})"
    if isinstance(node, BinOp):
        return f"({to_text(node.left)} {node.op} {to_text(node.right)})"
    return f"{node.name}({', '.join(to_text(a) for a in node.args)})"


def lookback(node) -> int:
    """Days of history beyond the evaluation day that the expression reads."""
    if isinstance(node, Num):
        return 0
    if isinstance(node, Field):
        return 1 if node.name == "returns" else 0
    if isinstance(node, Neg):
        return lookback(node.arg)
    if isinstance(node, BinOp):
        return max(lookback(node.left), lookback(node.right))
    n_series, windowed = FUNCS[node.name]
    inner = max(lookback(a) for a in node.args[:n_series])
    if not windowed:
        return inner
    n = int(node.args[-1].value)
    return inner + (n if node.name == "delta" else n - 1)


def _windows(x: np.ndarray, n: int):
    # (S, T) -> view (S, T - n + 1, n), plus output buffer
    return sliding_window_view(x, n, axis=1), np.full_like(x, np.nan)


def _ts(fn, x: np.ndarray, n: int) -> np.ndarray:
    if n > x.shape[1]:
        return np.full_like(x, np.nan)
    win, out = _windows(x, n)
    with np.errstate(invalid="ignore", divide="ignore"):
        out[:, n - 1:] = fn(win)
    return out


def _ts_rank(win):
    last = win[..., -1:]
    less = (win < last).sum(-1)
    eq = (win == last).sum(-1)
    r = (less + (eq + 1) / 2.0) / win.shape[-1]
    return np.where(np.isnan(win).any(-1), np.nan, r)


def _ts_corr(x, y, n):
    if n > x.shape[1]:
        return np.full_like(x, np.nan)
    wx, out = _windows(x, n)
    wy = sliding_window_view(y, n, axis=1)
    dx = wx - wx.mean(-1, keepdims=True)
    dy = wy - wy.mean(-1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        out[:, n - 1:] = (dx * dy).sum(-1) / np.sqrt((dx * dx).sum(-1) * (dy * dy).sum(-1))
    return out


def _cs_rank(x: np.ndarray) -> np.ndarray:
    out = np.full_like(x, np.nan)
    for t in range(x.shape[1]):
        col = x[:, t]
        ok = np.isfinite(col)
        if ok.any():
            out[ok, t] = rankdata(col[ok]) / ok.sum()
    return out


def _fields(panel: PricePanel) -> dict[str, np.ndarray]:
    c = np.asarray(panel.close, dtype=np.float64)
    ret = np.full_like(c, np.nan)
    ret[:, 1:] = c[:, 1:] / c[:, :-1] - 1.0
    return {"close": c, "open": np.asarray(panel.open, float), "high": np.asarray(panel.high, float),
            "low": np.asarray(panel.low, float), "volume": np.asarray(panel.volume, float), "returns": ret}


def _eval(node, env):
    if isinstance(node, Num):
        return node.value
    if isinstance(node, Field):
        return env[node.name]
    if isinstance(node, Neg):
        return -_eval(node.arg, env)
    if isinstance(node, BinOp):
        a, b = _eval(node.left, env), _eval(node.right, env)
        with np.errstate(divide="ignore", invalid="ignore"):
            if node.op == "+":
                return a + b
            if node.op == "-":
                return a - b
            if node.op == "*":
                return a * b
            r = np.divide(a, b)
            return np.where(np.isfinite(r), r, np.nan) if isinstance(r, np.ndarray) else r
    name = node.name
    x = _eval(node.args[0], env)
    if name == "sign":
        return np.sign(x)
    if name == "abs":
        return np.abs(x)
    if name == "rank":
        return _cs_rank(x)
    n = int(node.args[-1].value)
    if name == "delta":
        out = np.full_like(x, np.nan)
        if n < x.shape[1]:
            out[:, n:] = x[:, n:] - x[:, :-n]
        return out
    if name == "ts_mean":
        return _ts(lambda w: w.mean(-1), x, n)
    if name == "ts_std":
        return _ts(lambda w: w.std(-1, ddof=1) if n > 1 else np.zeros(w.shape[:-1]), x, n)
    if name == "ts_max":
        return _ts(lambda w: w.max(-1), x, n)
    if name == "ts_min":
        return _ts(lambda w: w.min(-1), x, n)
    if name == "ts_rank":
        return _ts(_ts_rank, x, n)
    if name == "ts_corr":
        return _ts_corr(x, _eval(node.args[1], env), n)
    raise AssertionError(name)


def eval_alpha(expr: AlphaExpr | str, panel: PricePanel, day: int | None = None) -> np.ndarray:
    """Evaluate on the whole panel (``(S, T)``), or one day's cross-section if ``day`` is given."""
    if isinstance(expr, str):
        expr = parse_alpha(expr)
    env = _fields(panel)
    val = _eval(expr.tree, env)
    val = np.broadcast_to(np.asarray(val, dtype=np.float64), panel.close.shape).copy()
    val[~np.isfinite(val)] = np.nan
    return val if day is None else val[:, day]


def load_alphas(path: str | Path) -> dict[str, AlphaExpr]:
    data = yaml.safe_load(Path(path).read_text())
    items = data.get("alphas", data) if isinstance(data, dict) else data
    out = {}
    for item in items:
        name, text = item["name"], item["expr"]
        if name in out:
            raise ValueError(f"duplicate alpha name {name!r}")
        out[name] = parse_alpha(text)
    return out


def default_alphas() -> dict[str, AlphaExpr]:
    return load_alphas(Path(__file__).resolve().parent.parent / "configs" / "alphas.yaml")
