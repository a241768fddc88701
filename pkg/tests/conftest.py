from __future__ import annotations

import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def write_csv(path, lines):
    path.write_text("\n".join(lines) + "\n")
    return path


def make_panel(close, open_=None, high=None, low=None, volume=None, start="2020-01-01"):
    """PricePanel from a ``(S, T)`` close array; missing fields default to the close (volume 1)."""
    from twma.data import PricePanel

    c = np.asarray(close, dtype=np.float64)
    S, T = c.shape
    o = c if open_ is None else open_
    h = np.fmax(c, o) if high is None else high
    lo = np.fmin(c, o) if low is None else low
    v = np.ones_like(c) if volume is None else volume
    dates = np.datetime64(start) + np.arange(T)
    return PricePanel([f"S{i:03d}" for i in range(S)], dates, o, h, lo, c, v)
