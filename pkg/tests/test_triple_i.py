from __future__ import annotations

import numpy as np
import pytest
from hypothesis import assume, given, strategies as st
from hypothesis.extra.numpy import arrays

from twma.triple_i import (TripleIWeights, WeightPanel, compress_resize_normalize,
                           compress_resize_normalize_batch, ewma_weights, interp_profile, transfer_weights,
                           twma, uniform_weights, weighted_average)


def scripted_weights(mat, D):
    """Column means, explicit piecewise-linear interpolation, normalization, newest day first."""
    H, W = mat.shape
    cols = [sum(mat[h, w] for h in range(H)) / H for w in range(W)]
    res = []
    for d in range(D):
        x = d * (W - 1) / (D - 1) if D > 1 else 0.0
        lo = min(int(x), W - 2) if W > 1 else 0
        if W == 1:
            res.append(cols[0])
            continue
        f = x - lo
        res.append(cols[lo] * (1 - f) + cols[lo + 1] * f)
    total = sum(res)
    return np.array([r / total for r in res][::-1])


def twma_loop(x, omega, yhat):
    S, T = x.shape
    D = omega.shape[-1]
    out = np.full((S, T), np.nan)
    for s in range(S):
        for t in range(D - 1, T):
            if yhat[s, t] < 0:
                continue
            w = omega[s, t, yhat[s, t]]
            out[s, t] = sum(w[d] * x[s, t - d] for d in range(D))
    return out


mats = arrays(np.float64, st.tuples(st.integers(1, 8), st.integers(1, 8)),
              elements=st.floats(0, 1e3, allow_subnormal=False))


# ---------------------------------------------------------------------------
# compress / resize / normalize

def test_constant_matrix_gives_uniform():
    for D in (1, 5, 20, 60):
        w = compress_resize_normalize(np.full((7, 7), 0.8), D)
        np.testing.assert_allclose(w.omega, 1.0 / D, atol=1e-15)
        assert w.source == "direct"


def test_zero_matrix_falls_back_to_uniform():
    w = compress_resize_normalize(np.zeros((7, 7)), 5)
    np.testing.assert_array_equal(w.omega, np.full(5, 0.2))
    assert w.source == "uniform-fallback"


@pytest.mark.parametrize("seed", range(5))
def test_matches_scripted_oracle(seed):
    rng = np.random.default_rng(seed)
    m = rng.uniform(0, 1, (7, 7))
    for D in (20, 5, 7, 60):
        np.testing.assert_allclose(compress_resize_normalize(m, D).omega, scripted_weights(m, D),
                                   atol=1e-12, rtol=0)


def test_column_orientation_oldest_left():
    m = np.zeros((3, 4))
    m[:, -1] = 1.0   # only the newest column is important
    w = compress_resize_normalize(m, 4).omega
    np.testing.assert_allclose(w, [1, 0, 0, 0], atol=1e-15)


def test_interp_endpoints_and_identity(rng):
    p = rng.uniform(0, 1, 6)
    np.testing.assert_allclose(interp_profile(p, 6), p, atol=1e-15)
    out = interp_profile(p, 21)
    assert out[0] == p[0] and out[-1] == p[-1]
    np.testing.assert_allclose(out[::4], p, atol=1e-15)
    with pytest.raises(ValueError):
        interp_profile(p, 0)


def test_weight_laws_on_random_matrices(rng):
    n_fallback = 0
    for i in range(1000):
        H, W = rng.integers(1, 9, 2)
        m = rng.uniform(0, 1, (H, W)) * (rng.uniform() < 0.95)
        m[rng.uniform(size=m.shape) < 0.4] = 0
        D = int(rng.integers(1, 61))
        w = compress_resize_normalize(m, D)
        n_fallback += w.source == "uniform-fallback"
        assert np.all(w.omega >= 0)
        assert abs(w.omega.sum() - 1) <= 1e-10
    assert n_fallback > 0


@given(mats, st.floats(1e-3, 1e6), st.integers(1, 30))
def test_scale_invariance(m, k, D):
    assume(m.max() == 0 or m.max() > 1e-6)   # keep clear of the fallback threshold
    a = compress_resize_normalize(m, D)
    b = compress_resize_normalize(m * k, D)
    np.testing.assert_allclose(a.omega, b.omega, rtol=1e-12, atol=1e-15)
    assert a.source == b.source


def test_batch_matches_single(rng):
    mats_ = rng.uniform(0, 1, (3, 2, 7, 7))
    mats_[1, 0] = 0
    w, fb = compress_resize_normalize_batch(mats_, 5)
    assert w.shape == (3, 2, 5) and fb.shape == (3, 2)
    assert fb[1, 0] and fb.sum() == 1
    for i in range(3):
        for j in range(2):
            np.testing.assert_array_equal(w[i, j], compress_resize_normalize(mats_[i, j], 5).omega)


def test_weights_type_rejects_invalid():
    with pytest.raises(ValueError):
        TripleIWeights(np.array([0.5, 0.6]))
    with pytest.raises(ValueError):
        TripleIWeights(np.array([1.5, -0.5]))
    with pytest.raises(ValueError):
        TripleIWeights(np.array([]))
    assert uniform_weights(4).D == 4


# ---------------------------------------------------------------------------
# EWMA

def test_ewma_examples():
    np.testing.assert_allclose(ewma_weights(0.5, 2).omega, [2 / 3, 1 / 3], atol=1e-15)
    assert ewma_weights(0.999, 3).omega[0] > 0.999
    lam, D = 0.94, 5
    raw = [lam * (1 - lam) ** (d - 1) for d in range(1, D + 1)]
    ref = np.array(raw) / sum(raw)
    np.testing.assert_allclose(ewma_weights(lam, D).omega, ref, atol=1e-15, rtol=0)
    assert ewma_weights(lam, D).source == "ewma"


@pytest.mark.parametrize("lam", [0.0, 1.0, -0.1, 1.5])
def test_ewma_rejects_out_of_range(lam):
    with pytest.raises(ValueError):
        ewma_weights(lam, 5)


@given(st.floats(1e-6, 1 - 1e-6), st.integers(1, 60))
def test_ewma_laws(lam, D):
    w = ewma_weights(lam, D).omega
    assert np.all(w >= 0) and abs(w.sum() - 1) <= 1e-10
    assert np.all(np.diff(w) <= 0)


# ---------------------------------------------------------------------------
# transfer

def test_transfer_examples(rng):
    w = transfer_weights(np.full(5, 0.2), 4)
    np.testing.assert_allclose(w.omega, np.full(20, 0.05), atol=1e-17)
    v = ewma_weights(0.3, 5)
    np.testing.assert_array_equal(transfer_weights(v, 1).omega, v.omega)
    r = rng.uniform(0, 1, 5)
    r /= r.sum()
    t = transfer_weights(r, 4).omega
    scripted = np.array([r[i] / 4 for i in range(5) for _ in range(4)])
    np.testing.assert_array_equal(t, scripted)
    assert abs(t.sum() - 1) <= 1e-15
    with pytest.raises(ValueError):
        transfer_weights(r, 0)


@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(0, 10)), st.integers(1, 6))
def test_transfer_preserves_block_mass(w, period):
    if w.sum() <= 0:
        w = np.ones_like(w)
    w = w / w.sum()
    t = transfer_weights(w, period).omega
    blocks = t.reshape(len(w), period)
    assert np.all(blocks == blocks[:, :1])
    np.testing.assert_allclose(blocks.sum(axis=1), w, rtol=1e-15, atol=1e-18)


# ---------------------------------------------------------------------------
# TWMA

def test_uniform_weights_give_moving_average(rng):
    x = rng.standard_normal((3, 30))
    out = weighted_average(x, np.full(5, 0.2))
    assert np.isnan(out[:, :4]).all()
    for t in range(4, 30):
        np.testing.assert_allclose(out[:, t], x[:, t - 4:t + 1].mean(axis=1), atol=1e-14)


def test_point_mass_on_today_is_identity(rng):
    x = rng.standard_normal((2, 12))
    w = np.zeros(5)
    w[0] = 1
    np.testing.assert_array_equal(weighted_average(x, w)[:, 4:], x[:, 4:])


def test_twma_selects_class_weights_and_matches_loop(rng):
    S, T, D = 4, 25, 5
    x = rng.standard_normal((S, T))
    om = rng.uniform(0, 1, (S, T, 2, D))
    om /= om.sum(-1, keepdims=True)
    yhat = rng.integers(-1, 2, (S, T))
    out = twma(x, om, yhat)
    ref = twma_loop(x, om, yhat)
    assert np.array_equal(np.isnan(out), np.isnan(ref))
    np.testing.assert_allclose(out, ref, atol=1e-14)


@given(st.integers(0, 10 ** 6), st.floats(-100, 100), st.floats(-5, 5), st.floats(-5, 5))
def test_twma_constant_and_linearity(seed, c, a, b):
    rng = np.random.default_rng(seed)
    S, T, D = 3, 15, 4
    om = rng.uniform(0, 1, (S, T, 2, D))
    om /= om.sum(-1, keepdims=True)
    yhat = rng.integers(0, 2, (S, T))
    const = twma(np.full((S, T), c), om, yhat)
    np.testing.assert_allclose(const[:, D - 1:], c, atol=1e-12 * max(1, abs(c)))
    x, z = rng.standard_normal((S, T)), rng.standard_normal((S, T))
    lhs = twma(a * x + b * z, om, yhat)
    rhs = a * twma(x, om, yhat) + b * twma(z, om, yhat)
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_missing_history_or_weights_omitted(rng):
    x = rng.standard_normal((1, 10))
    x[0, 6] = np.nan
    out = weighted_average(x, np.full(3, 1 / 3))
    assert np.isnan(out[0, 6:9]).all() and np.isfinite(out[0, 9])
    assert np.isnan(weighted_average(x[:, :2], np.full(3, 1 / 3))).all()


# ---------------------------------------------------------------------------
# weight panels

def _panel(rng, S=3, T=8, D=5):
    om = rng.uniform(0, 1, (S, T, 2, D))
    om /= om.sum(-1, keepdims=True)
    yhat = rng.integers(0, 2, (S, T))
    yhat[:, :D - 1] = -1
    om[yhat < 0] = np.nan
    probs = rng.uniform(0, 1, (S, T, 2))
    fb = rng.uniform(size=(S, T, 2)) < 0.2
    dates = np.arange("2020-01-01", "2020-01-09", dtype="datetime64[D]")[:T]
    return WeightPanel(tuple(f"S{i}" for i in range(S)), dates, om, yhat, probs, fb, "direct", {"D": D})


def test_weight_panel_save_load(tmp_path, rng):
    wp = _panel(rng)
    wp.save(tmp_path / "w.tensor", config_hash="h1")
    back = WeightPanel.load(tmp_path / "w.tensor")
    assert back.stocks == wp.stocks and np.array_equal(back.dates, wp.dates)
    np.testing.assert_array_equal(back.yhat, wp.yhat)
    np.testing.assert_array_equal(back.fallback, wp.fallback)
    np.testing.assert_array_equal(back.probs, wp.probs)
    np.testing.assert_allclose(back.omega, wp.omega.astype(np.float32), rtol=0, atol=0, equal_nan=True)
    assert back.meta == {"D": 5}


def test_weight_panel_csv_and_selection(tmp_path, rng):
    wp = _panel(rng)
    wp.to_csv(tmp_path / "w.csv", header="config_hash=x")
    lines = (tmp_path / "w.csv").read_text().splitlines()
    assert lines[0] == "# config_hash=x" and lines[1] == "ticker,date,class,d,omega"
    assert len(lines) - 2 == int((wp.yhat >= 0).sum()) * 2 * wp.D
    sel = wp.selected()
    s, t = np.argwhere(wp.yhat >= 0)[0]
    np.testing.assert_array_equal(sel[s, t], wp.omega[s, t, wp.yhat[s, t]])
    assert np.isnan(sel[wp.yhat < 0]).all()
    tr = wp.transferred(4)
    assert tr.D == 20 and tr.source == "transferred"
    np.testing.assert_allclose(np.nansum(tr.omega, -1)[wp.yhat >= 0], 1, atol=1e-12)
