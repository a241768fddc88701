"""Time the compiled kernels against their numpy twins.

    python benchmarks/bench_kernels.py [--repeat 5] [--json out.json]
"""
from __future__ import annotations

import argparse
import json
import timeit

import numpy as np

from twma import kernels
from twma.chart import window_geometry


def cases(rng):
    d = rng.standard_normal((16, 28, 28, 3, 3, 8)).astype(np.float32)
    xp = rng.standard_normal((16, 57, 57, 8)).astype(np.float32)
    _, arg = kernels.get_backend("python").maxpool_forward(xp, 3, 2)
    dout = rng.standard_normal(arg.shape).astype(np.float32)
    N, K = 500, 40
    X = rng.standard_normal((N, K))
    X -= X.mean(0)
    y = X[:, :5] @ rng.standard_normal(5) + rng.standard_normal(N)
    y -= y.mean()
    Xt, pen = np.ascontiguousarray(X.T), np.full(K, 0.01)
    close = 100 * np.exp(np.cumsum(rng.normal(0, 0.02, (50, 1000)), axis=1))
    c = 10 * np.exp(np.cumsum(rng.normal(0, 0.03, (64, 20)), axis=1))
    o = c * np.exp(rng.normal(0, 0.01, c.shape))
    g = window_geometry(o, np.maximum(o, c) * 1.01, np.minimum(o, c) * 0.99, c, rng.uniform(1, 2, c.shape))
    geo = [g[k] for k in ("open", "close", "high", "low", "ma", "vol_h", "up")]
    return {
        "col2im": lambda m: m.col2im(d, 30, 30, 1),
        "maxpool_forward": lambda m: m.maxpool_forward(xp, 3, 2),
        "maxpool_backward": lambda m: m.maxpool_backward(dout, arg, 57, 57, 3, 2),
        "lasso_cd": lambda m: m.lasso_cd(Xt, y, pen, np.zeros(K), 1e-10, 500),
        "filter_rule": lambda m: m.filter_rule(close, 0.05),
        "rasterize": lambda m: m.rasterize(*geo, True, True, 224),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", help="also write results here")
    a = ap.parse_args(argv)
    if not kernels.compiled_available():
        raise SystemExit("compiled kernels are not built; run `python setup.py build_ext --inplace`")
    py, cy = kernels.get_backend("python"), kernels.get_backend("cython")
    rows = []
    print(f"{'kernel':<18}{'python ms':>12}{'cython ms':>12}{'speedup':>10}")
    for name, fn in cases(np.random.default_rng(0)).items():
        t = {}
        for label, mod in (("python", py), ("cython", cy)):
            fn(mod)  # warm-up
            n = max(1, int(0.2 / max(timeit.timeit(lambda: fn(mod), number=1), 1e-6)))
            t[label] = min(timeit.repeat(lambda: fn(mod), number=n, repeat=a.repeat)) / n * 1e3
        rows.append({"kernel": name, "python_ms": t["python"], "cython_ms": t["cython"],
                     "speedup": t["python"] / t["cython"]})
        print(f"{name:<18}{t['python']:>12.3f}{t['cython']:>12.3f}{rows[-1]['speedup']:>9.1f}x")
    if a.json:
        with open(a.json, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
