from __future__ import annotations

from .aggregate import AggregateResult, aggregate_signal, fit_cross_sections, smooth_coefficients
from .alpha import (AlphaExpr, AlphaSyntaxError, AlphaTypeError, default_alphas, eval_alpha,
                    load_alphas, parse_alpha, to_text)
from .classic import (LOOKBACKS, mom, rank_normalize, rank_normalize_panel, rolling_mean, str_,
                      trend_features, write_signals, wstr)
from .lasso import LassoConvergenceError, LassoFit, adaptive_lasso, ols, ridge
from .rules import (RuleConfigError, TradingRule, default_grid, eval_rule, eval_rule_arrays,
                    grid_size, load_grid, rule_universe)

__all__ = [
    "AggregateResult", "aggregate_signal", "fit_cross_sections", "smooth_coefficients",
    "AlphaExpr", "AlphaSyntaxError", "AlphaTypeError", "default_alphas", "eval_alpha",
    "load_alphas", "parse_alpha", "to_text",
    "LOOKBACKS", "mom", "rank_normalize", "rank_normalize_panel", "rolling_mean", "str_",
    "trend_features", "write_signals", "wstr",
    "LassoConvergenceError", "LassoFit", "adaptive_lasso", "ols", "ridge",
    "RuleConfigError", "TradingRule", "default_grid", "eval_rule", "eval_rule_arrays",
    "grid_size", "load_grid", "rule_universe",
]
