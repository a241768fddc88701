"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line.

Run on its own with ``pytest tests/test_acceptance.py -v`` (the verdict lines
bypass output capture). AC5, AC6 and AC10 train models and take minutes.
"""
from __future__ import annotations

import hashlib
import math
import time
from pathlib import Path

import numpy as np
import pytest
import yaml
from scipy import stats

from twma import data, nn, pipeline
from twma.backtest import compare_universes, form_deciles, run_backtest
from twma.chart import ChartSpec, Structure, render_native
from twma.nn import (ResNetConfig, ResNetModel, avgpool_global, batchnorm_backward, batchnorm_forward,
                     conv2d_backward, conv2d_forward, loss_and_grads, maxpool_backward, maxpool_forward, relu)
from twma.saliency import (gradcam_pp_channel_weights, head_derivatives, localization,
                           smooth_channel_weights)
from twma.signals import wstr
from twma.signals.lasso import adaptive_lasso
from twma.signals.rules import TradingRule, default_grid, eval_rule_arrays, grid_size, rule_universe
from twma.triple_i import compress_resize_normalize, transfer_weights
from tests.test_backtest import accounting_oracle, random_fixture
from tests.test_chart import FIXTURES, bilinear_oracle, reference_render
from tests.test_nn import numeric_grad, rel_err
from tests.test_saliency import fd_derivs, gradcam_oracle, loc_oracle, random_head
from tests.test_signals import _orthonormal_design

pytestmark = pytest.mark.acceptance

ROOT = Path(__file__).resolve().parent.parent


@pytest.fixture
def verdict(capsys):
    def emit(ac: str, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\n{ac} {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, f"{ac}: {detail}"
    return emit


# ---------------------------------------------------------------------------

def test_ac1_renderer_exactness(verdict):
    structures = list(Structure)
    specs = [ChartSpec(len(w), structures[k % 4]) for k, w in enumerate(FIXTURES)]
    t0 = time.perf_counter()
    images = [render_native(w, s) for w, s in zip(FIXTURES, specs)]
    elapsed = time.perf_counter() - t0
    exact = sum(np.array_equal(img, reference_render(w, s.structure))
                for img, w, s in zip(images, FIXTURES, specs))
    covered = {s.structure for s in specs} == set(structures)
    verdict("AC1", exact == 25 and covered and elapsed < 1.0,
            f"{exact}/25 windows bit-identical over {len(set(s.structure for s in specs))} structures "
            f"in {elapsed:.3f}s")


def _prim_errors(trial: int) -> dict[str, float]:
    rng = np.random.default_rng(7000 + trial)
    errs = {}
    # convolution
    k, stride = int(rng.integers(1, 4)), int(rng.integers(1, 3))
    pad = int(rng.integers(0, k))
    x = rng.standard_normal((2, 5, 6, 2))
    w = rng.standard_normal((k, k, 2, 3))
    b = rng.standard_normal(3)
    y, cache = conv2d_forward(x, w, b, stride, pad)
    c = rng.standard_normal(y.shape)
    dx, dw, db = conv2d_backward(c, cache)
    f = lambda: float(np.sum(conv2d_forward(x, w, b, stride, pad)[0] * c))  # noqa: E731
    errs["conv"] = max(rel_err(dx, numeric_grad(f, x)), rel_err(dw, numeric_grad(f, w)),
                       rel_err(db, numeric_grad(f, b)))
    # max pool
    x = rng.standard_normal((2, 7, 6, 2))
    y, cache = maxpool_forward(x, 3, 2, 1)
    c = rng.standard_normal(y.shape)
    f = lambda: float(np.sum(maxpool_forward(x, 3, 2, 1)[0] * c))  # noqa: E731
    errs["maxpool"] = rel_err(maxpool_backward(c, cache), numeric_grad(f, x))
    # relu + global average pool
    x = rng.standard_normal((2, 4, 3, 2))
    x[np.abs(x) < 1e-3] = 0.5
    c = rng.standard_normal((2, 2))
    f = lambda: float(np.sum(avgpool_global(relu(x)) * c))  # noqa: E731
    errs["relu+avgpool"] = rel_err((x > 0) * c[:, None, None, :] / 12.0, numeric_grad(f, x))
    # batch norm, training mode
    x = rng.standard_normal((3, 3, 2, 2))
    g, be = rng.standard_normal(2), rng.standard_normal(2)
    rm, rv = rng.standard_normal(2), rng.uniform(0.5, 2, 2)
    y, cache, _ = batchnorm_forward(x, g, be, rm, rv, True)
    c = rng.standard_normal(y.shape)
    dx, dg, dbe = batchnorm_backward(c, cache)
    f = lambda: float(np.sum(batchnorm_forward(x, g, be, rm, rv, True)[0] * c))  # noqa: E731
    errs["batchnorm"] = max(rel_err(dx, numeric_grad(f, x)), rel_err(dg, numeric_grad(f, g)),
                            rel_err(dbe, numeric_grad(f, be)))
    return errs


def _micro_error(trial: int) -> float:
    """Every parameter tensor of the micro ResNet, one random coordinate each."""
    rng = np.random.default_rng(8000 + trial)
    m = ResNetModel.init(ResNetConfig("micro"), seed=trial, dtype=np.float64)
    for name in m.params:
        if name.endswith(".b"):
            m.params[name] = rng.standard_normal(m.params[name].shape) * 0.05
    x = rng.standard_normal((2, 56, 56, 3))
    y = rng.integers(0, 2, 2)
    _, grads = loss_and_grads(m, x, y)
    a, n = [], []
    for name, p in m.params.items():
        flat = p.reshape(-1)
        j = int(rng.integers(p.size))
        old = flat[j]
        flat[j] = old + 1e-5
        fp = loss_and_grads(m, x, y)[0]
        flat[j] = old - 1e-5
        fm = loss_and_grads(m, x, y)[0]
        flat[j] = old
        a.append(grads[name].reshape(-1)[j])
        n.append((fp - fm) / 2e-5)
    return rel_err(np.array(a), np.array(n))


def test_ac2_gradient_correctness(verdict):
    t0 = time.perf_counter()
    worst: dict[str, float] = {}
    for trial in range(20):
        for k, v in _prim_errors(trial).items():
            worst[k] = max(worst.get(k, 0.0), v)
        # softmax cross-entropy head
        rng = np.random.default_rng(9000 + trial)
        m = ResNetModel.init(ResNetConfig("micro", input_size=16, widths=(2, 3), blocks=(1, 1),
                                          strides=(1, 2), stem_kernel=3), seed=trial, dtype=np.float64)
        m.params["fc.A"] = rng.standard_normal(m.params["fc.A"].shape) * 0.3
        x = rng.standard_normal((3, 16, 16, 3))
        y = rng.integers(0, 2, 3)
        _, grads = loss_and_grads(m, x, y)
        num = numeric_grad(lambda: loss_and_grads(m, x, y)[0], m.params["fc.A"])
        worst["head"] = max(worst.get("head", 0.0), rel_err(grads["fc.A"], num))
        worst["micro-resnet"] = max(worst.get("micro-resnet", 0.0), _micro_error(trial))
    elapsed = time.perf_counter() - t0
    ok = all(v <= 1e-6 for v in worst.values()) and elapsed < 60
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    verdict("AC2", ok, f"worst relative error over 20 instances: {detail}; {elapsed:.1f}s")


def test_ac3_saliency_correctness(verdict):
    worst_fd = 0.0
    for trial in range(10):
        rng = np.random.default_rng(trial)
        F = rng.uniform(0, 2, (2, 2, 3))
        A, b = random_head(rng, 3)
        for j in (0, 1):
            d = head_derivatives(F, A, b, j)
            for idx in [(0, 0, 0), (1, 0, 2), (1, 1, 1)]:
                for a, n in zip((d.g[idx], d.g2[idx], d.g3[idx]), fd_derivs(F, A, b, j, idx)):
                    worst_fd = max(worst_fd, abs(a - n) / max(abs(a), abs(n), 1e-30))
    worst_oracle = 0.0
    rng = np.random.default_rng(33)
    for _ in range(20):
        F = rng.uniform(0, 1, (4, 5, 6))
        A, b = random_head(rng, 6)
        Gs = []
        for j in (0, 1):
            d = head_derivatives(F, A, b, j)
            G = gradcam_pp_channel_weights(F, d)
            worst_oracle = max(worst_oracle, np.abs(G - gradcam_oracle(F, d.g, d.g2, d.g3)).max())
            Gs.append(G)
        mats, maps = localization(F, Gs[0], Gs[1], size=12)
        for j in (0, 1):
            worst_oracle = max(worst_oracle, np.abs(mats[j] - loc_oracle(F, Gs[j])).max(),
                               np.abs(maps[j] - bilinear_oracle(loc_oracle(F, Gs[j]), 12, 12)).max())
    tiny = ResNetModel.init(ResNetConfig("micro", input_size=16, widths=(2, 3), blocks=(1, 1),
                                         strides=(1, 2), stem_kernel=3), seed=5, dtype=np.float64)
    tiny.params["fc.A"] *= 10
    worst_sigma0 = 0.0
    for _ in range(3):
        x = rng.standard_normal((16, 16, 3))
        for j in (0, 1):
            F = nn.forward(tiny, x).features[0]
            clean = gradcam_pp_channel_weights(F, head_derivatives(F, tiny.params["fc.A"],
                                                                   tiny.params["fc.b"], j))
            for B in (1, 4):
                worst_sigma0 = max(worst_sigma0, np.abs(
                    smooth_channel_weights(tiny, x, j, B=B, sigma=0.0) - clean).max())
    ok = worst_fd <= 1e-5 and worst_oracle <= 1e-10 and worst_sigma0 <= 1e-12
    verdict("AC3", ok, f"derivatives vs FD {worst_fd:.1e} (tol 1e-5); weights/maps vs transcription "
                       f"{worst_oracle:.1e} (tol 1e-10); sigma=0 vs clean {worst_sigma0:.1e} (tol 1e-12)")


def test_ac4_triple_i_laws(verdict):
    rng = np.random.default_rng(44)
    bad = 0
    for _ in range(1000):
        H, W = rng.integers(1, 9, 2)
        m = rng.uniform(0, 1, (H, W))
        m[rng.uniform(size=m.shape) < 0.3] = 0
        D = int(rng.integers(1, 61))
        w = compress_resize_normalize(m, D).omega
        k = 10 ** rng.uniform(-3, 6)
        wk = compress_resize_normalize(m * k, D).omega
        u = compress_resize_normalize(np.full((H, W), rng.uniform(0.1, 5)), D).omega
        bad += not (np.all(w >= 0) and abs(w.sum() - 1) <= 1e-10
                    and np.allclose(wk, w, rtol=1e-12, atol=1e-15)
                    and np.allclose(u, 1.0 / D, rtol=0, atol=1e-15))
        period = int(rng.integers(1, 6))
        t = transfer_weights(w, period).omega.reshape(D, period)
        bad += not (np.all(t == t[:, :1]) and np.allclose(t.sum(1), w, rtol=1e-15, atol=0))
    verdict("AC4", bad == 0, f"{1000 - bad}/1000 matrices obey nonnegativity, unit sum, uniform-in/out, "
                             f"scale invariance and block-mass transfer")


def planted_images(n: int, seed: int, size: int = 56):
    """A horizontal bar in the top half means class 1, in the bottom half class 0."""
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, n)
    x = rng.normal(0, 0.5, (n, size, size, 3)).astype(np.float32)
    for i in range(n):
        r = rng.integers(2, size // 2 - 6) + (0 if y[i] else size // 2)
        c = rng.integers(0, size - 16)
        x[i, r:r + 4, c:c + 16] += 1.5
    return x, y


def test_ac5_learning_sanity(verdict):
    t0 = time.perf_counter()
    reached = []
    for seed in range(5):
        x, y = planted_images(400, 100 + seed)
        res = nn.train(ResNetConfig("micro"), x, y, lr=1e-3, batch_size=32, patience=3, max_epochs=30,
                       seed=seed)
        hit = [h["epoch"] for h in res.history if h["val_acc"] >= 0.95 and h["epoch"] <= 30]
        reached.append(hit[0] if hit else None)
    elapsed = time.perf_counter() - t0
    n_ok = sum(r is not None for r in reached)
    verdict("AC5", n_ok == 5 and elapsed <= 600,
            f"{n_ok}/5 seeds reach 95% validation accuracy (first epochs {reached}) in {elapsed:.0f}s")


def _ac6_run(seed: int) -> tuple[float, float]:
    S, T, train_end = 50, 400, 270
    panel = data.synth_panel(S, T, seed, "recency_reversal")
    spec = ChartSpec(5, Structure("OHLC+VB+MA"))
    ts = pipeline.build_training_set(panel, spec, 1, train_end, 56, max_images=3000, seed=seed)
    res = pipeline.train_ensemble(ResNetConfig("micro"), ts, [seed], lr=1e-3, patience=2, max_epochs=4,
                                  batch_size=128)
    mask = np.zeros(T, bool)
    mask[train_end:] = True
    wp = pipeline.weight_panel([r.model for r in res], panel, spec, ts.norm, 56, day_mask=mask, B=4,
                               seed=seed)
    x = wstr(panel)
    start = train_end + spec.window_D
    a = run_backtest(x, panel.close, 1, start=start, name="WSTR")
    b = run_backtest(pipeline.enhance(x, wp), panel.close, 1, start=start, name="TWMA-WSTR")
    return a.sr, b.sr


def test_ac6_twma_efficacy(verdict):
    t0 = time.perf_counter()
    pairs = [_ac6_run(seed) for seed in range(10)]
    wins = sum(b is not None and a is not None and b > a for a, b in pairs)
    txt = " ".join(f"{a:.2f}/{b:.2f}" for a, b in pairs)
    verdict("AC6", wins >= 8, f"TWMA-WSTR beats WSTR out of sample in {wins}/10 seeds "
                              f"(SR plain/TWMA: {txt}); {time.perf_counter() - t0:.0f}s")


def test_ac7_backtest_accounting(verdict):
    worst = 0.0
    invariant = True
    for seed in range(100):
        rng = np.random.default_rng(1000 + seed)
        S, T, R = int(rng.integers(3, 35)), int(rng.integers(25, 70)), int(rng.integers(1, 6))
        signal, close = random_fixture(rng, S, T, holes=0.05)
        rf = rng.uniform(0, 1e-4, T)
        ms = max(2, min(S, 10) - 3)
        rep = run_backtest(signal, close, R=R, rf=rf, min_stocks=ms)
        ret, sr, to, rets = accounting_oracle(signal.tolist(), close.tolist(), R, rf.tolist(), ms)
        worst = max(worst, np.abs(rep.period_returns - rets).max(), abs(rep.ret - ret) / max(1, abs(ret)),
                    abs(rep.sr - sr) / max(1, abs(sr)))
        if to is not None:
            worst = max(worst, abs(rep.to - to) / max(1, abs(to)))
        for t in range(T):
            d = form_deciles(signal[:, t], ms)
            if d is not None:
                invariant &= np.array_equal(form_deciles(2 * signal[:, t] + 3, ms), d)
                invariant &= np.array_equal(form_deciles(signal[:, t] ** 3, ms), d)
    verdict("AC7", worst <= 1e-12 and invariant,
            f"100 fixtures: worst deviation from accounting oracle {worst:.1e} (tol 1e-12); "
            f"rank-transform invariance {'holds' if invariant else 'broken'}")


def test_ac8_adaptive_lasso(verdict):
    rng = np.random.default_rng(88)
    worst = 0.0
    for lam in (0.001, 0.01, 0.05, 0.2):
        N, K = 120, 6
        X = _orthonormal_design(rng, N, K)
        y = X @ np.array([1.0, -0.5, 0.2, 0.0, 0.05, 0.0]) + 2.0 + rng.normal(0, 0.1, N)
        z = X.T @ (y - y.mean()) / N
        w = 1.0 / (np.abs(z * N / (N + 1e-6)) + 1e-8)
        ref = np.sign(z) * np.maximum(np.abs(z) - lam * w, 0.0)
        worst = max(worst, np.abs(adaptive_lasso(X, y, lam=lam).coef[1:] - ref).max())
    hits = 0
    for _ in range(100):
        X = rng.standard_normal((500, 20))
        beta = np.zeros(20)
        beta[rng.choice(20, 3, replace=False)] = rng.choice([-1, 1], 3) * rng.uniform(0.5, 1.5, 3)
        signal = X @ beta
        y = signal + rng.normal(0, np.std(signal) / np.sqrt(10), 500)
        hits += set(adaptive_lasso(X, y).support) == set(np.flatnonzero(beta))
    verdict("AC8", worst <= 1e-8 and hits >= 95,
            f"orthonormal closed form within {worst:.1e} (tol 1e-8); exact support in {hits}/100 trials")


def test_ac9_rule_universe(verdict):
    grid = default_grid()
    count = 1
    expected = 0
    for spec in grid.values():
        count = 1
        for vals in spec.values():
            count *= len(vals)
        expected += count
    n = len(rule_universe(grid))
    full = default_grid(full=True)
    n_full = len(rule_universe(full))
    card_ok = n == expected == grid_size(grid) and n_full == grid_size(full)
    c = np.array([[100, 102, 106, 104, 100, 98, 103, 104]], dtype=float)
    trace = eval_rule_arrays(TradingRule("filter", (("x", 0.05),)), c)[0]
    trace_ok = np.array_equal(trace, [0, 0, 1, 1, -1, -1, 1, 1])
    rng = np.random.default_rng(50)
    a = rng.normal(0.2, 1, 50)
    b = a - rng.normal(0.1, 0.5, 50)
    d = a - b
    m = sum(d) / 50
    sd = math.sqrt(sum((v - m) ** 2 for v in d) / 49)
    t_ref = m / (sd / math.sqrt(50))
    p_ref = 1 - stats.t.cdf(t_ref, 49)
    cmp = compare_universes(dict(enumerate(a)), dict(enumerate(b)))
    t_err = max(abs(cmp.t - t_ref), abs(cmp.p - p_ref))
    verdict("AC9", card_ok and trace_ok and t_err <= 1e-10,
            f"grid {n} rules (combinatorial {expected}), full grid {n_full}; filter trace "
            f"{'matches' if trace_ok else 'differs'}; paired t deviation {t_err:.1e} (tol 1e-10)")


def _tree_digest(root: Path) -> dict[str, str]:
    skip = {"timings.json", "config.yaml"}
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file() and p.name not in skip}


def test_ac10_end_to_end_determinism(verdict, tmp_path):
    from twma.cli import main
    cfg = yaml.safe_load((ROOT / "configs" / "demo.yaml").read_text())
    times, digests = [], []
    for run in ("a", "b"):
        d = tmp_path / run
        d.mkdir()
        cfg["output_dir"] = "out"
        (d / "demo.yaml").write_text(yaml.safe_dump(cfg))
        t0 = time.perf_counter()
        code = main(["recipe", "-c", str(d / "demo.yaml")])
        times.append(time.perf_counter() - t0)
        assert code == 0
        digests.append(_tree_digest(d / "out"))
    same = digests[0] == digests[1]
    diff = sorted(k for k in set(digests[0]) | set(digests[1]) if digests[0].get(k) != digests[1].get(k))
    verdict("AC10", same and times[0] <= 900,
            f"demo recipe (50 stocks x 600 days) in {times[0]:.0f}s, rerun in {times[1]:.0f}s; "
            f"{len(digests[0])} files " + ("byte-identical" if same else f"differ: {diff[:5]}"))
