from __future__ import annotations

from decimal import Decimal, localcontext

import numpy as np
import pytest
from hypothesis import given, strategies as st

from twma import nn
from twma.chart import heat_overlay
from twma.nn import ResNetConfig, ResNetModel
from twma.saliency import (explain_batch, gradcam_pp_channel_weights, head_derivatives, head_probs,
                           localization, localization_matrix, noise_copies, resize_map,
                           smooth_channel_weights)
from tests.test_chart import bilinear_oracle

TINY = dict(input_size=16, widths=(2, 3), blocks=(1, 1), strides=(1, 2), stem_kernel=3)


def prob_loop(F, A, b, j, delta=None, idx=None):
    """P_j by explicit sums in 60-digit decimal arithmetic; ``delta`` perturbs ``F[idx]``."""
    H, W, C = F.shape
    z = []
    for k in (0, 1):
        acc = Decimal(repr(float(b[k])))
        for c in range(C):
            tot = Decimal(0)
            for h in range(H):
                for w in range(W):
                    v = Decimal(repr(float(F[h, w, c])))
                    if delta is not None and (h, w, c) == idx:
                        v += delta
                    tot += v
            acc += Decimal(repr(float(A[k, c]))) * tot / (H * W)
        z.append(acc)
    return 1 / (1 + (z[1 - j] - z[j]).exp())


def fd_derivs(F, A, b, j, idx, h=Decimal("1e-12")):
    with localcontext() as ctx:
        ctx.prec = 60
        f = {k: prob_loop(F, A, b, j, k * h, idx) for k in (-2, -1, 0, 1, 2)}
        d1 = (f[1] - f[-1]) / (2 * h)
        d2 = (f[1] - 2 * f[0] + f[-1]) / (h * h)
        d3 = (f[2] - 2 * f[1] + 2 * f[-1] - f[-2]) / (2 * h ** 3)
        return float(d1), float(d2), float(d3)


def gradcam_oracle(F, g, g2, g3):
    """Literal transcription: spatial weight per cell, then a weighted sum of positive gradients."""
    H, W, C = F.shape
    G = np.zeros(C)
    for c in range(C):
        s3 = 0.0
        for h in range(H):
            for w in range(W):
                s3 += F[h, w, c] * g3[h, w, c]
        for h in range(H):
            for w in range(W):
                den = 2 * g2[h, w, c] + s3
                alpha = g2[h, w, c] / den if abs(den) >= 1e-12 else 0.0
                G[c] += alpha * max(g[h, w, c], 0.0)
    return G


def loc_oracle(F, G):
    H, W, C = F.shape
    out = np.zeros((H, W))
    for h in range(H):
        for w in range(W):
            out[h, w] = max(sum(G[c] * F[h, w, c] for c in range(C)), 0.0)
    return out


def random_head(rng, C, scale=2.0):
    return rng.standard_normal((2, C)) * scale, rng.standard_normal(2)


# ---------------------------------------------------------------------------
# head derivatives

@pytest.mark.parametrize("trial", range(10))
def test_head_derivatives_match_finite_differences(trial):
    rng = np.random.default_rng(trial)
    F = rng.uniform(0, 2, (2, 2, 3))
    A, b = random_head(rng, 3)
    for j in (0, 1):
        d = head_derivatives(F, A, b, j)
        for idx in [(0, 0, 0), (1, 0, 2), (1, 1, 1)]:
            n1, n2, n3 = fd_derivs(F, A, b, j, idx)
            for a, n in ((d.g[idx], n1), (d.g2[idx], n2), (d.g3[idx], n3)):
                assert abs(a - n) <= 1e-5 * max(abs(a), abs(n), 1e-30)


def test_head_derivatives_micro_head_against_fd(rng):
    m = ResNetModel.init(ResNetConfig("micro"), seed=0, dtype=np.float64)
    F = nn.forward(m, rng.standard_normal((56, 56, 3))).features[0]
    A = m.params["fc.A"] * 30
    b = m.params["fc.b"]
    d = head_derivatives(F, A, b, 1)
    for idx in [(0, 0, 0), (3, 4, 17), (6, 6, 31)]:
        n1, n2, n3 = fd_derivs(F, A, b, 1, idx)
        assert abs(d.g[idx] - n1) <= 1e-5 * max(abs(n1), 1e-30)
        assert abs(d.g2[idx] - n2) <= 1e-5 * max(abs(n2), 1e-30)
        assert abs(d.g3[idx] - n3) <= 1e-5 * max(abs(n3), 1e-30)


def test_head_derivative_examples():
    rng = np.random.default_rng(1)
    F = rng.uniform(0, 1, (3, 3, 4))
    d = head_derivatives(F, np.zeros((2, 4)), np.zeros(2), 1)
    assert not d.g.any() and not d.g2.any() and not d.g3.any()
    # F = 0 and b = 0 tie the class scores, so s = 0.5
    F = np.zeros((2, 2, 2))
    A = np.array([[1.0, -2.0], [3.0, 0.5]])
    d = head_derivatives(F, A, np.zeros(2), 1)
    u = (A[1] - A[0]) / 4
    np.testing.assert_allclose(d.g[0, 0], 0.25 * u, atol=1e-15)
    assert not d.g2.any()


def test_class_gradients_antisymmetric_and_spatially_constant(rng):
    for _ in range(20):
        F = rng.uniform(0, 3, (4, 3, 5))
        A, b = random_head(rng, 5)
        d0, d1 = head_derivatives(F, A, b, 0), head_derivatives(F, A, b, 1)
        np.testing.assert_allclose(d0.g, -d1.g, atol=1e-12, rtol=0)
        # disjoint positive supports
        assert not np.any((np.maximum(d0.g, 0) > 0) & (np.maximum(d1.g, 0) > 0))
        for d in (d0, d1):
            for arr in (d.g, d.g2, d.g3):
                assert np.all(arr == arr[:1, :1, :])


def test_head_probs_match_forward(rng):
    m = ResNetModel.init(ResNetConfig("micro", **TINY), seed=2, dtype=np.float64)
    tr = nn.forward(m, rng.standard_normal((3, 16, 16, 3)))
    np.testing.assert_allclose(head_probs(tr.features, m.params["fc.A"], m.params["fc.b"]), tr.probs,
                               atol=1e-14)


# ---------------------------------------------------------------------------
# channel weights

def test_channel_weights_zero_when_gradients_nonpositive(rng):
    F = rng.uniform(0, 1, (3, 3, 2))
    A = np.array([[1.0, 2.0], [0.0, 0.5]])   # A1 - A0 < 0 in every channel
    d = head_derivatives(F, A, np.zeros(2), 1)
    assert np.all(d.g <= 0)
    assert not gradcam_pp_channel_weights(F, d).any()


def test_channel_weights_single_cell_collapse():
    F = np.array([[[0.7, 1.3]]])
    A = np.array([[0.0, 0.0], [1.0, 2.0]])
    d = head_derivatives(F, A, np.array([0.0, -0.4]), 1)
    assert np.all(d.g > 0)
    g, g2, g3 = d.g[0, 0], d.g2[0, 0], d.g3[0, 0]
    expected = g2 / (2 * g2 + F[0, 0] * g3) * g
    np.testing.assert_allclose(gradcam_pp_channel_weights(F, d), expected, rtol=1e-13)


@pytest.mark.parametrize("trial", range(10))
def test_channel_weights_match_transcription(trial):
    rng = np.random.default_rng(50 + trial)
    F = rng.uniform(0, 2, (4, 4, 3))
    A, b = random_head(rng, 3)
    for j in (0, 1):
        d = head_derivatives(F, A, b, j)
        np.testing.assert_allclose(gradcam_pp_channel_weights(F, d),
                                   gradcam_oracle(F, d.g, d.g2, d.g3), atol=1e-10, rtol=0)


def test_degenerate_denominator_gives_zero_alpha():
    # s = 0.5 kills g2; F = 0 kills the third-order term; the denominator is exactly 0
    F = np.zeros((2, 2, 2))
    A = np.array([[0.0, 0.0], [1.0, -1.0]])
    d = head_derivatives(F, A, np.zeros(2), 1)
    G = gradcam_pp_channel_weights(F, d)
    assert np.all(np.isfinite(G)) and not G.any()


# ---------------------------------------------------------------------------
# smoothing

@pytest.fixture(scope="module")
def tiny_model():
    m = ResNetModel.init(ResNetConfig("micro", **TINY), seed=5, dtype=np.float64)
    m.params["fc.A"] *= 10
    return m


def _clean_weights(model, x, j):
    tr = nn.forward(model, x)
    F = tr.features[0]
    d = head_derivatives(F, model.params["fc.A"], model.params["fc.b"], j)
    return gradcam_pp_channel_weights(F, d)


def test_zero_noise_equals_clean(tiny_model, rng):
    x = rng.standard_normal((16, 16, 3))
    for j in (0, 1):
        clean = _clean_weights(tiny_model, x, j)
        for B in (1, 3, 8):
            np.testing.assert_allclose(smooth_channel_weights(tiny_model, x, j, B=B, sigma=0.0), clean,
                                       atol=1e-12, rtol=0)


def test_smooth_matches_scripted_four_copy_oracle(tiny_model, rng):
    x = rng.standard_normal((16, 16, 3))
    B, sigma, seed = 4, 0.1, 3
    got = smooth_channel_weights(tiny_model, x, 1, B=B, sigma=sigma, seed=seed)
    assert got.tobytes() == smooth_channel_weights(tiny_model, x, 1, B=B, sigma=sigma, seed=seed).tobytes()
    # scripted: regenerate the copies, average each derivative, then form the ratio
    A, b = tiny_model.params["fc.A"], tiny_model.params["fc.b"]
    gs, g2s, fg3s = [], [], []
    for bi in range(B):
        noisy = x + np.random.default_rng([seed, bi]).standard_normal(x.shape) * sigma
        F = nn.forward(tiny_model, noisy).features[0]
        d = head_derivatives(F, A, b, 1)
        gs.append(d.g)
        g2s.append(d.g2)
        fg3s.append((F * d.g3).sum(axis=(0, 1)))
    mg, mg2, mfg3 = np.mean(gs, 0), np.mean(g2s, 0), np.mean(fg3s, 0)
    H, W, C = mg.shape
    ref = np.zeros(C)
    for c in range(C):
        for h in range(H):
            for w in range(W):
                den = 2 * mg2[h, w, c] + mfg3[c]
                alpha = mg2[h, w, c] / den if abs(den) >= 1e-12 else 0.0
                ref[c] += alpha * max(mg[h, w, c], 0.0)
    np.testing.assert_allclose(got, ref, atol=1e-10, rtol=0)


def test_smooth_argument_errors(tiny_model):
    x = np.zeros((16, 16, 3))
    with pytest.raises(ValueError):
        smooth_channel_weights(tiny_model, x, 0, B=0)
    with pytest.raises(ValueError):
        smooth_channel_weights(tiny_model, x, 0, B=2, sigma=-0.1)


def test_noise_copies_streams_independent_of_batch():
    x = np.zeros((4, 4, 3))
    a = noise_copies(x, 3, 0.5, seed=1, key=(7,))
    b = noise_copies(x, 5, 0.5, seed=1, key=(7,))
    np.testing.assert_array_equal(a, b[:3])
    assert not np.array_equal(a[0], a[1])
    sig = np.array([0.0, 1.0, 0.0])
    c = noise_copies(x, 2, sig, seed=0)
    assert not c[..., 0].any() and not c[..., 2].any() and c[..., 1].any()


# ---------------------------------------------------------------------------
# localization

def test_localization_examples(rng):
    F = rng.uniform(0, 1, (3, 3, 2))
    mats, maps = localization(F, np.zeros(2), np.zeros(2), size=12)
    assert all(not m.any() for m in mats + maps)
    W = localization_matrix(np.ones((2, 2, 2)), np.array([1.0, -2.0]))
    assert np.array_equal(W, np.zeros((2, 2)))


def test_localization_matches_transcription_and_bilinear_oracle(rng):
    for _ in range(10):
        F = rng.uniform(-1, 2, (5, 4, 3))
        G = rng.standard_normal(3)
        W = localization_matrix(F, G)
        np.testing.assert_allclose(W, loc_oracle(F, G), atol=1e-12, rtol=0)
        assert np.all(W >= 0)
        big = resize_map(W, 24)
        np.testing.assert_allclose(big, bilinear_oracle(W, 24, 24), atol=1e-12)


def test_resize_constant_and_output_size():
    for size in (224, 56):
        m = resize_map(np.full((7, 7), 0.3), size)
        assert m.shape == (size, size)
        np.testing.assert_allclose(m, 0.3, atol=1e-14)
    np.testing.assert_allclose(resize_map(np.full((1, 1), 2.0), 10), 2.0)


@given(st.integers(0, 2 ** 31))
def test_explain_batch_nonnegative_and_deterministic(seed):
    m = ResNetModel.init(ResNetConfig("micro", **TINY), seed=seed % 7, dtype=np.float64)
    x = np.random.default_rng(seed).standard_normal((3, 16, 16, 3))
    e1 = explain_batch([m], x, B=2, sigma=0.2, seed=seed, keys=[10, 11, 12])
    e2 = explain_batch([m], x[::-1].copy(), B=2, sigma=0.2, seed=seed, keys=[12, 11, 10], chunk=1)
    assert np.all(e1.matrices >= 0)
    assert e1.matrices.tobytes() == e2.matrices[::-1].tobytes()


def test_explain_batch_matches_per_image_path(rng):
    models = [ResNetModel.init(ResNetConfig("micro", **TINY), seed=s, dtype=np.float64) for s in (0, 1)]
    for mdl in models:
        mdl.params["fc.A"] *= 10
    x = rng.standard_normal((2, 16, 16, 3))
    B, sigma, seed = 3, 0.1, 4
    ex = explain_batch(models, x, B=B, sigma=sigma, seed=seed, keys=[5, 9])
    for n, key in enumerate((5, 9)):
        for mi, mdl in enumerate(models):
            F = nn.forward(mdl, x[n]).features[0]
            for j in (0, 1):
                G = smooth_channel_weights(mdl, x[n], j, B=B, sigma=sigma, seed=seed, key=(key,))
                np.testing.assert_allclose(ex.member_matrices[mi, n, j], localization_matrix(F, G),
                                           atol=1e-12)
    np.testing.assert_allclose(ex.matrices, ex.member_matrices.mean(0), atol=1e-15)
    pbar, _ = nn.ensemble_predict(models, x)
    np.testing.assert_allclose(ex.probs, pbar, atol=1e-12)
    with pytest.raises(ValueError):
        explain_batch([], x)


def test_heat_overlay_display_only(rng):
    chart = np.zeros((8, 8, 3))
    heat = rng.uniform(0, 5, (8, 8))
    out = heat_overlay(chart, heat, alpha=0.5)
    assert out.shape == (8, 8, 3)
    assert out.min() >= 0 and out.max() <= 1
    flat = heat_overlay(chart, np.ones((8, 8)))
    assert np.allclose(flat, flat[0, 0])
