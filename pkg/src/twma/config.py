"""Run configuration: YAML schema, defaults, validation and per-command hashes."""
from __future__ import annotations

import copy
from pathlib import Path

import yaml

from .chart import Structure
from .io import config_hash
from .nn import PRESETS, ResNetConfig

SCHEMA_VERSION = 1

DEFAULTS: dict = {
    "schema_version": SCHEMA_VERSION,
    "name": "run",
    "output_dir": "runs/default",
    "data": {
        "source": "synth",
        "path": None,
        "size_filter": None,
        "synth": {"n_stocks": 50, "n_days": 600, "seed": 7, "regime": "recency_reversal"},
    },
    "chart": {"D": 5, "structure": "OHLC+VB+MA", "input_size": 56},
    "split": {"train_end": 350},
    "model": {"depth": "micro", "seeds": [0, 1], "lr": 1e-3, "batch_size": 128, "patience": 2,
              "max_epochs": 5, "max_train_images": 8000, "batch_norm": False},
    "saliency": {"B": 4, "sigma_scale": 0.15, "seed": 0, "history_days": 40},
    "signals": {"names": ["mom", "str", "wstr", "trend", "alpha"], "ewma_lambdas": [0.1, 0.5, 0.9],
                "alphas": None, "trend_lags": [5, 10, 20, 50], "smooth_window": 252, "min_fits": 20},
    "backtest": {"R": 1, "rf": 0.0, "rf_path": None, "min_stocks": 10},
    "rules": {"grid": "default", "max_rules": None, "bins": 30},
    "transfer": {"period": 4, "R": 20},
}

SIGNAL_NAMES = ("mom", "str", "wstr", "trend", "alpha")
MIN_TEST_REBALANCES = 20


class ConfigError(ValueError):
    pass


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        where = f"{path}.{k}" if path else k
        if k not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[k], dict) and k != "synth":
            if not isinstance(v, dict):
                raise ConfigError(f"{where} must be a mapping")
            out[k] = _merge(base[k], v, where)
        elif k == "synth" and isinstance(v, dict):
            out[k] = {**base[k], **v}
        else:
            out[k] = v
    return out


def model_tag(depth: str, D: int, R: int) -> str:
    """Experiment name in the ``RN<depth>-D<D>/R<R>`` convention (``CN`` for the plain CNN)."""
    prefix = "CN" if str(depth).startswith("cnn") else "RN"
    d = {"18": "18", "34": "34", "50": "50"}.get(str(depth), str(depth))
    if prefix == "CN":
        d = "" if depth == "cnn" else "micro"
    return f"{prefix}{d}-D{D}/R{R}"


class RunConfig:
    def __init__(self, data: dict, base_dir: Path | None = None):
        self.raw = data
        self.base_dir = base_dir or Path.cwd()

    @classmethod
    def from_dict(cls, d: dict | None = None, base_dir: Path | None = None) -> RunConfig:
        d = d or {}
        ver = d.get("schema_version", SCHEMA_VERSION)
        if ver != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {ver}; this tool reads version {SCHEMA_VERSION}")
        cfg = cls(_merge(DEFAULTS, d), base_dir)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path, overrides: dict | None = None) -> RunConfig:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        try:
            d = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"{path}: {e}") from None
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        if overrides:
            d = _merge_loose(d, overrides)
        return cls.from_dict(d, path.parent.resolve())

    def __getitem__(self, key):
        return self.raw[key]

    def resolve(self, p: str | None) -> Path | None:
        if p is None:
            return None
        p = Path(p)
        return p if p.is_absolute() else (self.base_dir / p)

    @property
    def output_dir(self) -> Path:
        return self.resolve(self.raw["output_dir"])

    @property
    def D(self) -> int:
        return int(self.raw["chart"]["D"])

    @property
    def R(self) -> int:
        return int(self.raw["backtest"]["R"])

    @property
    def tag(self) -> str:
        return model_tag(self.raw["model"]["depth"], self.D, self.R)

    # ---- validation -----------------------------------------------------
    def n_days(self) -> int | None:
        d = self.raw["data"]
        if d["source"] == "synth":
            return int(d["synth"]["n_days"])
        return None

    def validate(self) -> None:
        r = self.raw
        d = r["data"]
        if d["source"] not in ("synth", "csv"):
            raise ConfigError("data.source must be 'synth' or 'csv'")
        if d["source"] == "csv":
            if not d["path"]:
                raise ConfigError("data.path is required when data.source is 'csv'")
            if not self.resolve(d["path"]).exists():
                raise ConfigError(f"data.path {self.resolve(d['path'])} does not exist")
        else:
            s = d["synth"]
            for k in ("n_stocks", "n_days", "seed"):
                if not isinstance(s.get(k), int) or s[k] < (0 if k == "seed" else 1):
                    raise ConfigError(f"data.synth.{k} must be a positive integer")
        c = r["chart"]
        try:
            Structure(c["structure"])
        except ValueError:
            raise ConfigError(f"chart.structure must be one of {[x.value for x in Structure]}") from None
        if not isinstance(c["D"], int) or c["D"] < 1:
            raise ConfigError("chart.D must be a positive integer")
        if c["input_size"] not in (224, 112, 56, 32, 28, 16):
            raise ConfigError("chart.input_size must divide 224 (224, 112, 56, 32, 28 or 16)")
        m = r["model"]
        if str(m["depth"]) not in PRESETS:
            raise ConfigError(f"model.depth must be one of {sorted(PRESETS)}")
        m["depth"] = str(m["depth"])
        try:
            ResNetConfig(m["depth"], input_size=int(c["input_size"]), batch_norm=bool(m["batch_norm"]))
        except ValueError as e:
            raise ConfigError(f"model: {e}") from None
        if not m["seeds"] or len(set(m["seeds"])) != len(m["seeds"]):
            raise ConfigError("model.seeds must be a nonempty list of distinct integers")
        for k in ("batch_size", "max_epochs"):
            if not isinstance(m[k], int) or m[k] < 1:
                raise ConfigError(f"model.{k} must be a positive integer")
        if not isinstance(m["patience"], int) or m["patience"] < 0:
            raise ConfigError("model.patience must be a nonnegative integer")
        if not float(m["lr"]) > 0:
            raise ConfigError("model.lr must be positive")
        sal = r["saliency"]
        if not isinstance(sal["B"], int) or sal["B"] < 1 or float(sal["sigma_scale"]) < 0:
            raise ConfigError("saliency.B must be >= 1 and saliency.sigma_scale >= 0")
        sig = r["signals"]
        bad = [n for n in sig["names"] if n not in SIGNAL_NAMES]
        if bad:
            raise ConfigError(f"unknown signals {bad}; choose from {list(SIGNAL_NAMES)}")
        for lam in sig["ewma_lambdas"]:
            if not 0 < float(lam) < 1:
                raise ConfigError(f"signals.ewma_lambdas entries must lie in (0, 1), got {lam}")
        b = r["backtest"]
        if not isinstance(b["R"], int) or b["R"] < 1:
            raise ConfigError("backtest.R must be a positive integer")
        if b["rf_path"] and not self.resolve(b["rf_path"]).exists():
            raise ConfigError(f"backtest.rf_path {b['rf_path']} does not exist")
        t = r["transfer"]
        if not isinstance(t["period"], int) or t["period"] < 1 or not isinstance(t["R"], int) or t["R"] < 1:
            raise ConfigError("transfer.period and transfer.R must be positive integers")
        self.check_history()

    def signal_first_day(self, name: str) -> int:
        """Earliest day index on which signal ``name`` (original or weighted) can exist."""
        from .signals.alpha import default_alphas, load_alphas
        from .signals.classic import LOOKBACKS

        D = self.D
        sig = self.raw["signals"]
        if name == "trend":
            base = max(sig["trend_lags"]) - 1
        elif name == "alpha":
            alphas = load_alphas(self.resolve(sig["alphas"])) if sig["alphas"] else default_alphas()
            base = max(a.lookback for a in alphas.values())
        else:
            base = LOOKBACKS[name]
        if name in ("trend", "alpha"):
            base += int(sig["min_fits"]) + self.R - 1
        return base + D - 1

    def check_history(self, n_days: int | None = None) -> None:
        """Reject D/R choices whose signals cannot fill the test window, before computing."""
        T = n_days if n_days is not None else self.n_days()
        if T is None:
            return
        R = self.R
        train_end = int(self.raw["split"]["train_end"])
        if not 0 < train_end < T:
            raise ConfigError(f"split.train_end must lie inside the panel (1..{T - 1})")
        last = T - 1 - R
        for name in self.raw["signals"]["names"]:
            first = max(train_end, self.signal_first_day(name))
            n_reb = (last - first) // R + 1 if last >= first else 0
            if n_reb < MIN_TEST_REBALANCES:
                raise ConfigError(
                    f"{name} needs {self.signal_first_day(name)} days of history for "
                    f"{self.tag}; only {n_reb} test rebalances remain (need {MIN_TEST_REBALANCES})")

    # ---- hashing ----------------------------------------------------------
    def section_hash(self, command: str) -> str:
        r = self.raw
        keys = {
            "synth": ["data"],
            "render": ["data", "chart", "split", "model.max_train_images", "model.seeds"],
            "train": ["data", "chart", "split", "model"],
            "explain": ["data", "chart", "split", "model", "saliency"],
            "enhance": ["data", "chart", "split", "model", "saliency", "signals", "backtest.R"],
            "backtest": ["data", "chart", "split", "model", "saliency", "signals", "backtest"],
            "rules": ["data", "chart", "split", "model", "saliency", "backtest", "rules"],
            "transfer": ["data", "chart", "split", "model", "saliency", "signals", "backtest", "transfer"],
            "report": ["data", "chart", "split", "model", "saliency", "signals", "backtest", "rules", "transfer"],
        }[command]
        picked = {}
        for k in keys:
            if "." in k:
                a, b = k.split(".")
                picked[k] = r[a][b]
            else:
                picked[k] = r[k]
        return config_hash({"command": command, "schema_version": SCHEMA_VERSION, **picked})

    def full_hash(self) -> str:
        r = {k: v for k, v in self.raw.items() if k != "output_dir"}
        return config_hash(r)


def _merge_loose(d: dict, over: dict) -> dict:
    out = copy.deepcopy(d)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge_loose(out[k], v)
        else:
            out[k] = v
    return out


def sample_config() -> str:
    return yaml.safe_dump(DEFAULTS, sort_keys=False)
