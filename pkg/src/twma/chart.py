"""Price-chart rasterization, bilinear resizing and pixel normalization.

Layout of a native ``224 x 11D`` image (rows grow downward):

* rows 0-174: price area (OHLC bars and moving-average line)
* rows 175-185: empty gap
* rows 186-223: volume area

Each day owns an 11-px slot: open tick in columns 0-4, the high-low line in
column 5, close tick in columns 6-10.
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import kernels
from .data import OhlcvBar, PricePanel

HEIGHT = 224
PRICE_ROWS = 175
GAP_ROWS = 11
VOL_ROWS = 38
VOL_TOP = PRICE_ROWS + GAP_ROWS
SLOT = 11
OUT_SIZE = 224
STD_FLOOR = 1e-6

# label -> RGB
PALETTE = np.array([
    [1.0, 1.0, 1.0],   # background
    [0.0, 0.0, 0.0],   # OHLC bars
    [0.0, 0.0, 1.0],   # moving average
    [0.0, 0.8, 0.0],   # up-day volume
    [0.9, 0.0, 0.0],   # down-day volume
])


class Structure(str, enum.Enum):
    OHLC_VB_MA = "OHLC+VB+MA"
    OHLC_VB = "OHLC+VB"
    OHLC_MA = "OHLC+MA"
    OHLC = "OHLC"

    @property
    def has_volume(self) -> bool:
        return "VB" in self.value

    @property
    def has_ma(self) -> bool:
        return "MA" in self.value


@dataclass(frozen=True)
class ChartSpec:
    window_D: int = 5
    structure: Structure = Structure.OHLC_VB_MA

    def __post_init__(self):
        if self.window_D < 1:
            raise ValueError("window_D must be >= 1")
        object.__setattr__(self, "structure", Structure(self.structure))

    @property
    def native_width(self) -> int:
        return SLOT * self.window_D

    def to_dict(self) -> dict:
        return {"window_D": self.window_D, "structure": self.structure.value}


@dataclass
class ChartImage:
    tensor: np.ndarray
    stock: str
    end_day: np.datetime64
    spec: ChartSpec

    def __post_init__(self):
        if self.tensor.shape != (OUT_SIZE, OUT_SIZE, 3):
            raise ValueError(f"chart tensor must be 224x224x3, got {self.tensor.shape}")


class RenderSkip(ValueError):
    """Window cannot be drawn (missing bars)."""


# ---------------------------------------------------------------------------
# geometry

def _price_rows(p: np.ndarray, pmin: np.ndarray, pmax: np.ndarray) -> np.ndarray:
    span = pmax - pmin
    flat = span <= 1e-12 * np.abs(pmax)
    safe = np.where(flat, 1.0, span)
    rows = np.floor((pmax - p) / safe * (PRICE_ROWS - 1) + 0.5)
    rows = np.where(flat, (PRICE_ROWS - 1) // 2, rows)
    return np.clip(rows, 0, PRICE_ROWS - 1).astype(np.int32)


def window_geometry(o, h, l, c, v):
    """Pixel rows for ``(N, D)`` OHLCV windows.

    Prices are rescaled so each window's first close is one; the moving
    average is the expanding in-window mean of closes. The joint min/max of
    OHLC and MA prices pin the bottom/top price rows whether or not the MA
    line is drawn, so structures only differ in which layers are painted.
    """
    o, h, l, c, v = (np.atleast_2d(np.asarray(a, dtype=np.float64)) for a in (o, h, l, c, v))
    if np.isnan(c).any() or np.isnan(o).any():
        raise RenderSkip("window contains missing bars")
    scale = c[:, :1]
    o, h, l, c = o / scale, h / scale, l / scale, c / scale
    D = c.shape[1]
    ma = np.cumsum(c, axis=1) / np.arange(1, D + 1)
    pmax = np.maximum(h.max(axis=1), ma.max(axis=1))[:, None]
    pmin = np.minimum(l.min(axis=1), ma.min(axis=1))[:, None]
    rows = {name: _price_rows(p, pmin, pmax) for name, p in
            (("open", o), ("close", c), ("high", h), ("low", l), ("ma", ma))}
    vmax = v.max(axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        vh = np.where(vmax > 0, np.floor(v / np.where(vmax > 0, vmax, 1.0) * VOL_ROWS + 0.5), 0)
    rows["vol_h"] = vh.astype(np.int32)
    rows["up"] = (c >= o).astype(np.uint8)
    return rows


def render_labels(o, h, l, c, v, spec: ChartSpec, backend=None) -> np.ndarray:
    """Label images ``(N, 224, 11D)`` for a batch of windows."""
    g = window_geometry(o, h, l, c, v)
    if g["open"].shape[1] != spec.window_D:
        raise ValueError(f"window has {g['open'].shape[1]} days, spec wants {spec.window_D}")
    k = kernels.backend if backend is None else backend
    return k.rasterize(g["open"], g["close"], g["high"], g["low"], g["ma"], g["vol_h"], g["up"],
                       spec.structure.has_ma, spec.structure.has_volume, HEIGHT)


def labels_to_rgb(labels: np.ndarray, dtype=np.float64) -> np.ndarray:
    return PALETTE.astype(dtype)[labels]


def _bars_to_arrays(window: Sequence[OhlcvBar] | np.ndarray):
    if isinstance(window, np.ndarray):
        a = np.asarray(window, dtype=np.float64)
        return a[:, 0], a[:, 1], a[:, 2], a[:, 3], a[:, 4]
    if any(b is None for b in window):
        raise RenderSkip("window contains missing bars")
    return tuple(np.array([getattr(b, f) for b in window], dtype=np.float64)
                 for f in ("open", "high", "low", "close", "volume"))


def render_native(window: Sequence[OhlcvBar] | np.ndarray, spec: ChartSpec) -> np.ndarray:
    """Draw one D-day window (bars or a ``(D, 5)`` OHLCV array) as ``224 x 11D x 3`` RGB."""
    o, h, l, c, v = _bars_to_arrays(window)
    if len(c) != spec.window_D:
        raise ValueError(f"window has {len(c)} days, spec wants {spec.window_D}")
    return labels_to_rgb(render_labels(o[None], h[None], l[None], c[None], v[None], spec)[0])


# ---------------------------------------------------------------------------
# resampling

def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """``(n_out, n_in)`` interpolation weights, half-pixel centers (align_corners=False)."""
    if n_in < 1 or n_out < 1:
        raise ValueError("sizes must be >= 1")
    m = np.zeros((n_out, n_in))
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, None)
    i0 = np.minimum(np.floor(src).astype(int), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m


def box_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Block-average weights for an integer down-sampling factor."""
    if n_in % n_out:
        raise ValueError(f"box down-sampling needs {n_out} to divide {n_in}")
    f = n_in // n_out
    return np.kron(np.eye(n_out), np.full((1, f), 1.0 / f))


def _apply_separable(img: np.ndarray, my: np.ndarray, mx: np.ndarray) -> np.ndarray:
    # img (..., H, W, C) -> (..., Ho, Wo, C); two batched matmuls
    *lead, H, W, C = img.shape
    Ho, Wo = my.shape[0], mx.shape[0]
    x = np.matmul(my, img.reshape(-1, H, W * C))
    x = np.matmul(x.reshape(-1, Ho, W, C).transpose(0, 1, 3, 2), mx.T)
    return np.ascontiguousarray(x.transpose(0, 1, 3, 2)).reshape(*lead, Ho, Wo, C)


def resize_bilinear(native: np.ndarray, out_hw: tuple[int, int] = (OUT_SIZE, OUT_SIZE)) -> np.ndarray:
    """Resample ``(H, W, C)`` or ``(N, H, W, C)`` images per channel."""
    native = np.asarray(native)
    H, W = native.shape[-3], native.shape[-2]
    my = bilinear_matrix(H, out_hw[0]).astype(native.dtype, copy=False)
    mx = bilinear_matrix(W, out_hw[1]).astype(native.dtype, copy=False)
    return _apply_separable(native, my, mx)


def input_matrices(native_h: int, native_w: int, size: int) -> tuple[np.ndarray, np.ndarray]:
    """Composite maps native -> 224x224 (bilinear) -> size x size (box average)."""
    my = bilinear_matrix(native_h, OUT_SIZE)
    mx = bilinear_matrix(native_w, OUT_SIZE)
    if size != OUT_SIZE:
        my = box_matrix(OUT_SIZE, size) @ my
        mx = box_matrix(OUT_SIZE, size) @ mx
    return my, mx


def labels_to_input(labels: np.ndarray, size: int = OUT_SIZE, dtype=np.float32) -> np.ndarray:
    """Label images straight to model-input tensors ``(N, size, size, 3)``."""
    my, mx = input_matrices(labels.shape[-2], labels.shape[-1], size)
    rgb = labels_to_rgb(labels, dtype=np.float64)
    return _apply_separable(rgb, my, mx).astype(dtype)


def to_chart_image(native: np.ndarray, stock: str, end_day, spec: ChartSpec) -> ChartImage:
    return ChartImage(resize_bilinear(native), stock, np.datetime64(end_day, "D"), spec)


# ---------------------------------------------------------------------------
# panels -> windows

@dataclass
class WindowIndex:
    """Stock / end-day indices of renderable windows plus their OHLCV arrays."""
    stock_idx: np.ndarray
    day_idx: np.ndarray
    ohlcv: tuple[np.ndarray, ...] = field(repr=False)

    def __len__(self) -> int:
        return int(self.stock_idx.size)

    def subset(self, mask_or_idx) -> WindowIndex:
        return WindowIndex(self.stock_idx[mask_or_idx], self.day_idx[mask_or_idx],
                           tuple(a[mask_or_idx] for a in self.ohlcv))


def panel_windows(panel: PricePanel, D: int, day_mask: np.ndarray | None = None,
                  period: int = 1) -> WindowIndex:
    """All complete windows of ``D`` bars (``D * period`` days when collapsing periods).

    A window whose days contain a hole is skipped, never imputed.
    ``day_mask`` (length ``n_days``) restricts which end days are considered.
    """
    from .data import collapse_arrays

    span = D * period
    S, T = panel.shape
    if T < span:
        empty = np.zeros((0, D))
        return WindowIndex(np.zeros(0, int), np.zeros(0, int), (empty,) * 5)
    view = lambda a: np.lib.stride_tricks.sliding_window_view(a, span, axis=1)  # noqa: E731
    holes = view(np.isnan(panel.close)).any(axis=-1)            # (S, T - span + 1)
    ok = ~holes
    if day_mask is not None:
        ok &= np.asarray(day_mask, bool)[span - 1:][None, :]
    si, wi = np.nonzero(ok)
    arrays = [view(a)[si, wi] for a in (panel.open, panel.high, panel.low, panel.close, panel.volume)]
    if period > 1:
        arrays = list(collapse_arrays(*arrays, period))
    return WindowIndex(si, wi + span - 1, tuple(np.ascontiguousarray(a) for a in arrays))


def render_windows(win: WindowIndex, spec: ChartSpec, size: int = OUT_SIZE,
                   chunk: int = 512, dtype=np.float32) -> np.ndarray:
    """Model-input tensors for every window in ``win``."""
    out = np.empty((len(win), size, size, 3), dtype=dtype)
    for s in range(0, len(win), chunk):
        sl = slice(s, s + chunk)
        labels = render_labels(*(a[sl] for a in win.ohlcv), spec)
        out[sl] = labels_to_input(labels, size, dtype)
    return out


# ---------------------------------------------------------------------------
# normalization

@dataclass(frozen=True)
class NormStats:
    mean: tuple[float, float, float]
    std: tuple[float, float, float]

    def to_json(self) -> str:
        return json.dumps({"mean": list(self.mean), "std": list(self.std)})

    @classmethod
    def from_json(cls, text: str) -> NormStats:
        d = json.loads(text)
        return cls(tuple(d["mean"]), tuple(d["std"]))

    def save(self, path: str | Path, **extra) -> None:
        d = json.loads(self.to_json())
        d.update(extra)
        Path(path).write_text(json.dumps(d, indent=2, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> NormStats:
        return cls.from_json(Path(path).read_text())


def fit_norm(images: np.ndarray | Iterable[np.ndarray]) -> NormStats:
    """Per-channel mean/std over training images, accumulated chunk by chunk.

    Accepts an ``(N, H, W, 3)`` array or any iterable of images / image
    batches. Chunks are merged with the pairwise (Chan) update so memory
    stays bounded.
    """
    if isinstance(images, np.ndarray):
        images = [images[i:i + 256] for i in range(0, images.shape[0], 256)] if images.ndim == 4 else [images]
    n = 0
    mean = np.zeros(3)
    m2 = np.zeros(3)
    for chunk in images:
        x = np.asarray(chunk, dtype=np.float64).reshape(-1, 3)
        if x.shape[0] == 0:
            continue
        cn = x.shape[0]
        cmean = x.mean(axis=0)
        cm2 = ((x - cmean) ** 2).sum(axis=0)
        tot = n + cn
        delta = cmean - mean
        mean = mean + delta * cn / tot
        m2 = m2 + cm2 + delta ** 2 * n * cn / tot
        n = tot
    if n == 0:
        raise ValueError("fit_norm needs at least one training image")
    std = np.maximum(np.sqrt(m2 / n), STD_FLOOR)
    return NormStats(tuple(float(a) for a in mean), tuple(float(s) for s in std))


def apply_norm(image, stats: NormStats) -> np.ndarray:
    x = image.tensor if isinstance(image, ChartImage) else np.asarray(image)
    mean = np.asarray(stats.mean, dtype=x.dtype if x.dtype.kind == "f" else np.float64)
    std = np.asarray(stats.std, dtype=mean.dtype)
    return (x - mean) / std


# ---------------------------------------------------------------------------
# export

def to_png(image: np.ndarray, path: str | Path, text: dict | None = None) -> None:
    from PIL import Image, PngImagePlugin

    arr = np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    info = PngImagePlugin.PngInfo()
    for k, val in (text or {}).items():
        info.add_text(k, str(val))
    Image.fromarray(arr).save(path, format="PNG", pnginfo=info)


def heat_overlay(chart: np.ndarray, heat: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Alpha-blend a min-max scaled heat map over a chart (display only)."""
    from matplotlib import colormaps

    h = np.asarray(heat, dtype=np.float64)
    lo, hi = h.min(), h.max()
    scaled = (h - lo) / (hi - lo) if hi > lo else np.zeros_like(h)
    rgb = colormaps["jet"](scaled)[..., :3]
    return (1.0 - alpha) * np.asarray(chart, dtype=np.float64) + alpha * rgb
