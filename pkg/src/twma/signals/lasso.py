"""Two-stage adaptive LASSO with an unpenalized intercept."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import kernels

RIDGE_JITTER = 1e-6
WEIGHT_EPS = 1e-8
CD_TOL = 1e-8
CD_MAX_SWEEPS = 10_000
GRID_SIZE = 20
GRID_SPAN = 1e-4


class LassoConvergenceError(RuntimeError):
    def __init__(self, sweeps: int, max_change: float, lam: float):
        super().__init__(f"coordinate descent did not converge: {sweeps} sweeps, "
                         f"last max change {max_change:.3e}, penalty {lam:.3e}")
        self.sweeps = sweeps
        self.max_change = max_change
        self.lam = lam


@dataclass
class LassoFit:
    coef: np.ndarray      # (K + 1,), intercept first
    lam: float
    bic: float
    sweeps: int
    path_lams: np.ndarray | None = None
    path_bic: np.ndarray | None = None

    @property
    def support(self) -> np.ndarray:
        return np.flatnonzero(self.coef[1:] != 0)


def _center(X, y):
    xm = X.mean(axis=0)
    ym = y.mean()
    return X - xm, y - ym, xm, ym


def ridge(X: np.ndarray, y: np.ndarray, jitter: float = RIDGE_JITTER) -> np.ndarray:
    """Intercept-first coefficients of a lightly ridged least-squares fit."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    Xc, yc, xm, ym = _center(X, y)
    K = X.shape[1]
    b = np.linalg.solve(Xc.T @ Xc + jitter * np.eye(K), Xc.T @ yc)
    return np.concatenate([[ym - xm @ b], b])


def ols(X: np.ndarray, y: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    A = np.column_stack([np.ones(len(X)), X])
    return np.linalg.lstsq(A, np.asarray(y, dtype=np.float64), rcond=None)[0]


def weighted_lasso(Xc: np.ndarray, yc: np.ndarray, pen: np.ndarray, init: np.ndarray,
                   tol: float = CD_TOL, max_sweeps: int = CD_MAX_SWEEPS, lam: float = float("nan")):
    """Minimize ``(1/2N)|yc - Xc b|^2 + sum pen_k |b_k|`` by cyclic coordinate descent."""
    beta, sweeps, change, ok = kernels.lasso_cd(np.ascontiguousarray(Xc.T), np.ascontiguousarray(yc),
                                                np.ascontiguousarray(pen, dtype=np.float64),
                                                np.asarray(init, dtype=np.float64), tol, max_sweeps)
    if not ok:
        raise LassoConvergenceError(sweeps, change, lam)
    return np.asarray(beta), sweeps


def _bic(Xc, yc, b):
    N = len(yc)
    rss = float(np.sum((yc - Xc @ b) ** 2))
    df = int(np.count_nonzero(b)) + 1
    return N * np.log(max(rss, 1e-300) / N) + df * np.log(N)


def adaptive_lasso(X: np.ndarray, y: np.ndarray, lam: float | None = None, gamma: float = 1.0,
                   grid_size: int = GRID_SIZE, tol: float = CD_TOL,
                   max_sweeps: int = CD_MAX_SWEEPS) -> LassoFit:
    """Adaptive LASSO: ridge pilot, weights ``1/(|b0|^gamma + 1e-8)``, weighted L1 fit.

    With ``lam=None`` the penalty is chosen by BIC over a log grid from the
    smallest value that zeroes every coefficient down by a factor 1e4.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or len(X) != len(y):
        raise ValueError("X must be N x K with N matching y")
    N, K = X.shape
    if N < 2:
        raise ValueError("need at least two observations")
    if not (np.isfinite(X).all() and np.isfinite(y).all()):
        raise ValueError("design and response must be finite")
    Xc, yc, xm, ym = _center(X, y)
    pilot = ridge(X, y)[1:]
    w = 1.0 / (np.abs(pilot) ** gamma + WEIGHT_EPS)

    def fit(l, init):
        return weighted_lasso(Xc, yc, l * w, init, tol, max_sweeps, l)

    def pack(b):
        return np.concatenate([[ym - xm @ b], b])

    if lam is not None:
        b, sweeps = fit(float(lam), pilot)
        return LassoFit(pack(b), float(lam), _bic(Xc, yc, b), sweeps)
    lam_max = float(np.max(np.abs(Xc.T @ yc) / (N * w))) if K else 0.0
    if lam_max <= 0:
        b = np.zeros(K)
        return LassoFit(pack(b), 0.0, _bic(Xc, yc, b), 0)
    lams = lam_max * np.logspace(0.0, np.log10(GRID_SPAN), grid_size)
    best = None
    bics = np.empty(grid_size)
    b = np.zeros(K)
    total = 0
    failure = None
    for i, l in enumerate(lams):
        try:
            b, sweeps = fit(l, b)   # warm start along the path
        except LassoConvergenceError as e:
            # an unconverged grid point is not a candidate; keep walking the path
            failure, bics[i] = e, np.nan
            total += e.sweeps
            continue
        total += sweeps
        bics[i] = _bic(Xc, yc, b)
        if best is None or bics[i] < best[0]:
            best = (bics[i], l, b.copy())
    if best is None:
        raise failure
    return LassoFit(pack(best[2]), float(best[1]), float(best[0]), total, lams, bics)
