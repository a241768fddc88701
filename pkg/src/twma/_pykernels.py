"""Pure numpy implementations of the hot kernels.

Every function here has a twin with the same signature in ``_ckernels.pyx``.
The two must agree bit-for-bit on integer outputs (rasterization, rule
states) and to rounding on floating outputs.
"""
from __future__ import annotations

import numpy as np

# label codes used by the rasterizer
WHITE, BLACK, BLUE, GREEN, RED = 0, 1, 2, 3, 4
SLOT = 11


def col2im(dcols: np.ndarray, Hp: int, Wp: int, stride: int) -> np.ndarray:
    """Scatter-add patch gradients ``(N, Ho, Wo, k, k, C)`` back onto a padded grid."""
    N, Ho, Wo, k, _, C = dcols.shape
    out = np.zeros((N, Hp, Wp, C), dtype=dcols.dtype)
    for ki in range(k):
        for kj in range(k):
            out[:, ki:ki + stride * (Ho - 1) + 1:stride,
                kj:kj + stride * (Wo - 1) + 1:stride, :] += dcols[:, :, :, ki, kj, :]
    return out


def maxpool_forward(xp: np.ndarray, k: int, stride: int):
    """Max over ``k x k`` windows of an already padded ``(N, Hp, Wp, C)`` array.

    Returns the pooled values and the flat in-window argmax (first maximum in
    row-major window order).
    """
    N, Hp, Wp, C = xp.shape
    Ho = (Hp - k) // stride + 1
    Wo = (Wp - k) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    win = win[:, : stride * (Ho - 1) + 1 : stride, : stride * (Wo - 1) + 1 : stride]
    flat = win.reshape(N, Ho, Wo, C, k * k)
    arg = flat.argmax(axis=-1).astype(np.int32)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), arg


def maxpool_backward(dout: np.ndarray, arg: np.ndarray, Hp: int, Wp: int, k: int,
                     stride: int) -> np.ndarray:
    N, Ho, Wo, C = dout.shape
    dxp = np.zeros((N, Hp, Wp, C), dtype=dout.dtype)
    for idx in range(k * k):
        ki, kj = divmod(idx, k)
        contrib = np.where(arg == idx, dout, 0)
        dxp[:, ki:ki + stride * (Ho - 1) + 1:stride,
            kj:kj + stride * (Wo - 1) + 1:stride, :] += contrib
    return dxp


def lasso_cd(Xt: np.ndarray, y: np.ndarray, pen: np.ndarray, beta: np.ndarray,
             tol: float, max_sweeps: int):
    """Cyclic coordinate descent for ``(1/2N)||y - X b||^2 + sum_k pen_k |b_k|``.

    ``Xt`` is the transposed design ``(K, N)``; ``y`` and the columns are
    assumed centered (intercept handled by the caller). Returns
    ``(beta, sweeps, max_change, converged)``.
    """
    K, N = Xt.shape
    beta = np.array(beta, dtype=np.float64, copy=True)
    r = y - Xt.T @ beta
    col_sq = np.einsum("kn,kn->k", Xt, Xt) / N
    max_change = np.inf
    for sweep in range(max_sweeps):
        max_change = 0.0
        for k in range(K):
            if col_sq[k] == 0.0:
                if beta[k] != 0.0:
                    max_change = max(max_change, abs(beta[k]))
                    beta[k] = 0.0
                continue
            rho = float(Xt[k] @ r) / N + col_sq[k] * beta[k]
            if rho > pen[k]:
                new = (rho - pen[k]) / col_sq[k]
            elif rho < -pen[k]:
                new = (rho + pen[k]) / col_sq[k]
            else:
                new = 0.0
            d = new - beta[k]
            if d != 0.0:
                r -= d * Xt[k]
                beta[k] = new
                max_change = max(max_change, abs(d))
        if max_change < tol:
            return beta, sweep + 1, max_change, True
    return beta, max_sweeps, max_change, False


def filter_rule(close: np.ndarray, x: float) -> np.ndarray:
    """Alexander filter state machine, one row per stock.

    Goes long once price is ``x`` above the trough tracked since the last
    switch to short (or start), short once ``x`` below the tracked peak.
    Missing prices yield NaN and leave the state untouched.
    """
    S, T = close.shape
    out = np.full((S, T), np.nan)
    for s in range(S):
        state = 0
        peak = trough = np.nan
        for t in range(T):
            p = close[s, t]
            if p != p:
                continue
            if peak != peak:
                peak = trough = p
            if state != 1 and p >= trough * (1.0 + x):
                state = 1
                peak = p
            elif state != -1 and p <= peak * (1.0 - x):
                state = -1
                trough = p
            if p > peak:
                peak = p
            if p < trough:
                trough = p
            out[s, t] = state
    return out


def _round_div(a: int, n: int) -> int:
    # round-half-up of a / n for n > 0
    return (2 * a + n) // (2 * n)


def draw_line(img: np.ndarray, r0: int, c0: int, r1: int, c1: int, label: int) -> None:
    """Integer midpoint line (Bresenham-equivalent, ties rounded half-up)."""
    dr = r1 - r0
    dc = c1 - c0
    n = max(abs(dr), abs(dc))
    if n == 0:
        img[r0, c0] = label
        return
    for i in range(n + 1):
        r = r0 + (_round_div(i * abs(dr), n) if dr >= 0 else -_round_div(i * abs(dr), n))
        c = c0 + (_round_div(i * abs(dc), n) if dc >= 0 else -_round_div(i * abs(dc), n))
        img[r, c] = label


def rasterize(r_open, r_close, r_high, r_low, r_ma, vol_h, up,
              draw_ma: bool, draw_vol: bool, height: int) -> np.ndarray:
    """Paint label images ``(N, height, 11 D)`` from precomputed pixel rows.

    All row arguments are ``(N, D)`` int arrays in image coordinates;
    ``vol_h`` holds bar heights in pixels measured up from the bottom row.
    Draw order: volume bars, moving-average line, OHLC bars.
    """
    N, D = r_open.shape
    img = np.zeros((N, height, SLOT * D), dtype=np.uint8)
    bottom = height - 1
    for n in range(N):
        canvas = img[n]
        for d in range(D):
            c = SLOT * d
            if draw_vol and vol_h[n, d] > 0:
                canvas[bottom - vol_h[n, d] + 1:bottom + 1, c:c + SLOT] = GREEN if up[n, d] else RED
        if draw_ma:
            for d in range(D):
                if d == 0:
                    canvas[r_ma[n, 0], 5] = BLUE
                else:
                    draw_line(canvas, r_ma[n, d - 1], SLOT * (d - 1) + 5, r_ma[n, d], SLOT * d + 5, BLUE)
        for d in range(D):
            c = SLOT * d
            canvas[r_high[n, d]:r_low[n, d] + 1, c + 5] = BLACK
            canvas[r_open[n, d], c:c + 5] = BLACK
            canvas[r_close[n, d], c + 6:c + 11] = BLACK
    return img
