"""Grad-CAM++ and its noise-smoothed variant for the two-class ResNet head.

Everything downstream of the final feature map is avgpool -> linear ->
softmax, so the first three derivatives of a class probability with respect
to any feature entry have a closed form and are constant within a channel.
All arithmetic here runs in float64 regardless of the model dtype.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import nn
from .chart import OUT_SIZE, bilinear_matrix

DEN_EPS = 1e-12
DEFAULT_B = 8
DEFAULT_SIGMA_SCALE = 0.15


@dataclass
class HeadDerivatives:
    g: np.ndarray
    g2: np.ndarray
    g3: np.ndarray
    cls: int


def head_probs(F: np.ndarray, A: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Recompute class probabilities from ``F`` (``(..., H, W, C)``) in float64."""
    F = np.asarray(F, dtype=np.float64)
    pooled = F.mean(axis=(-3, -2))
    return nn.softmax(pooled @ np.asarray(A, np.float64).T + np.asarray(b, np.float64))


def _channel_derivs(s: np.ndarray, A: np.ndarray, hw: int, j: int):
    # s: (...,) probability of class j; returns (..., C) per-channel g, g2, g3
    A = np.asarray(A, dtype=np.float64)
    u = (A[j] - A[1 - j]) / hw
    s = np.asarray(s, dtype=np.float64)[..., None]
    d1 = s * (1 - s)
    return d1 * u, d1 * (1 - 2 * s) * u ** 2, d1 * (1 - 6 * s + 6 * s * s) * u ** 3


def head_derivatives(F: np.ndarray, A: np.ndarray, b: np.ndarray, j: int) -> HeadDerivatives:
    """First three derivatives of ``P_j`` w.r.t. every entry of ``F``, shaped like ``F``."""
    F = np.asarray(F, dtype=np.float64)
    H, W = F.shape[-3], F.shape[-2]
    s = head_probs(F, A, b)[..., j]
    g, g2, g3 = _channel_derivs(s, A, H * W, j)

    def full(x):
        return np.broadcast_to(x[..., None, None, :], F.shape).copy()

    return HeadDerivatives(full(g), full(g2), full(g3), j)


def _alpha(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    safe = np.abs(den) >= DEN_EPS
    return np.where(safe, num / np.where(safe, den, 1.0), 0.0)


def gradcam_pp_channel_weights(F: np.ndarray, derivs: HeadDerivatives) -> np.ndarray:
    """Per-channel importance ``G_j(c)`` from spatially weighted positive gradients."""
    F = np.asarray(F, dtype=np.float64)
    den = 2 * derivs.g2 + (F * derivs.g3).sum(axis=(-3, -2), keepdims=True)
    alpha = _alpha(derivs.g2, den)
    return (alpha * np.maximum(derivs.g, 0)).sum(axis=(-3, -2))


def _smoothed_from_stats(mg, mg2, mfg3, hw):
    # inputs are copy-averaged channel quantities; g is spatially constant so
    # the spatial sum of alpha * relu(g) is hw times the channel value
    alpha = _alpha(mg2, 2 * mg2 + mfg3)
    return hw * alpha * np.maximum(mg, 0)


def noise_copies(image: np.ndarray, B: int, sigma, seed: int, key: Sequence[int] = ()) -> np.ndarray:
    """``B`` noised copies of one normalized image; copy ``b`` draws from its own stream."""
    image = np.asarray(image)
    sigma = np.asarray(sigma, dtype=np.float64)
    out = np.empty((B,) + image.shape, dtype=np.float64)
    for bi in range(B):
        rng = np.random.default_rng([int(seed), *map(int, key), bi])
        out[bi] = image + rng.standard_normal(image.shape) * sigma
    return out


def _copy_stats(model: nn.ResNetModel, copies: np.ndarray, j: int):
    tr = nn.forward(model, copies.astype(model.dtype))
    F = tr.features.astype(np.float64)
    A, b = model.params["fc.A"], model.params["fc.b"]
    hw = F.shape[1] * F.shape[2]
    s = head_probs(F, A, b)[:, j]
    g, g2, g3 = _channel_derivs(s, A, hw, j)
    S = F.sum(axis=(1, 2))
    return g.mean(axis=0), g2.mean(axis=0), (S * g3).mean(axis=0), hw


def smooth_channel_weights(model: nn.ResNetModel, image: np.ndarray, j: int, B: int = DEFAULT_B,
                           sigma=0.0, seed: int = 0, key: Sequence[int] = ()) -> np.ndarray:
    """Smoothed importances: derivatives averaged over ``B`` noised copies before the ratio."""
    if B < 1:
        raise ValueError("B must be >= 1")
    if np.any(np.asarray(sigma) < 0):
        raise ValueError("sigma must be >= 0")
    copies = noise_copies(image, B, sigma, seed, key)
    return _smoothed_from_stats(*_copy_stats(model, copies, j))


def localization_matrix(F: np.ndarray, G: np.ndarray) -> np.ndarray:
    """``ReLU(sum_c G(c) F(h, w, c))`` over the final feature map."""
    F = np.asarray(F, dtype=np.float64)
    return np.maximum(np.einsum("...hwc,...c->...hw", F, np.asarray(G, np.float64)), 0)


def resize_map(m: np.ndarray, size: int = OUT_SIZE) -> np.ndarray:
    my = bilinear_matrix(m.shape[-2], size)
    mx = bilinear_matrix(m.shape[-1], size)
    return np.einsum("oh,...hw,pw->...op", my, m, mx)


def localization(F: np.ndarray, G0: np.ndarray, G1: np.ndarray, size: int = OUT_SIZE):
    """Localization matrices and resized maps for both classes."""
    mats = [localization_matrix(F, G) for G in (G0, G1)]
    return mats, [resize_map(m, size) for m in mats]


@dataclass
class Explanation:
    """Per-image localization matrices for both classes, averaged over ensemble members."""
    matrices: np.ndarray         # (N, 2, H_L, W_L)
    probs: np.ndarray            # (N, 2) ensemble-mean probabilities
    member_matrices: np.ndarray  # (M, N, 2, H_L, W_L)


def explain_batch(models: Sequence[nn.ResNetModel], images: np.ndarray, B: int = DEFAULT_B,
                  sigma=0.0, seed: int = 0, keys: Sequence[int] | None = None,
                  chunk: int = 32) -> Explanation:
    """Smoothed localization matrices for every image under every ensemble member.

    Copy ``b`` of image ``n`` uses the stream ``(seed, keys[n], b)``; keys
    default to the batch position, so pass stable ids to make results
    independent of batching.
    """
    if not models:
        raise ValueError("need at least one model")
    if B < 1:
        raise ValueError("B must be >= 1")
    images = np.asarray(images)
    N = len(images)
    keys = np.arange(N) if keys is None else np.asarray(keys)
    M = len(models)
    members = None
    probs = np.zeros((M, N, 2))
    for s0 in range(0, N, chunk):
        s1 = min(s0 + chunk, N)
        n = s1 - s0
        copies = np.concatenate([noise_copies(images[i], B, sigma, seed, (int(keys[i]),))
                                 for i in range(s0, s1)])
        for mi, m in enumerate(models):
            batch = np.concatenate([copies, images[s0:s1].astype(np.float64)]).astype(m.dtype)
            F = nn.forward(m, batch).features.astype(np.float64)
            A, b = m.params["fc.A"], m.params["fc.b"]
            hw = F.shape[1] * F.shape[2]
            Fn = F[:n * B].reshape((n, B) + F.shape[1:])
            Fc = F[n * B:]
            if members is None:
                members = np.zeros((M, N, 2) + Fc.shape[1:3])
            P = head_probs(Fn, A, b)            # (n, B, 2)
            S = Fn.sum(axis=(2, 3))             # (n, B, C)
            for j in (0, 1):
                g, g2, g3 = _channel_derivs(P[..., j], A, hw, j)
                G = _smoothed_from_stats(g.mean(1), g2.mean(1), (S * g3).mean(1), hw)
                members[mi, s0:s1, j] = localization_matrix(Fc, G)
            probs[mi, s0:s1] = head_probs(Fc, A, b)
    if members is None:
        members = np.zeros((M, 0, 2, 0, 0))
    return Explanation(members.mean(axis=0), probs.mean(axis=0), members)


def finite_difference_derivs(F: np.ndarray, A: np.ndarray, b: np.ndarray, j: int, idx: tuple,
                             h: float = 1e-3) -> tuple[float, float, float]:
    """Central differences of ``P_j`` along one entry of ``F`` (test helper)."""
    F = np.asarray(F, dtype=np.float64)

    def p(delta):
        G = F.copy()
        G[idx] += delta
        return head_probs(G, A, b)[j]

    f = [p(k * h) for k in (-2, -1, 0, 1, 2)]
    d1 = (f[3] - f[1]) / (2 * h)
    d2 = (f[3] - 2 * f[2] + f[1]) / h ** 2
    d3 = (f[4] - 2 * f[3] + 2 * f[1] - f[0]) / (2 * h ** 3)
    return d1, d2, d3
