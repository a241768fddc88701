"""Command-line pipeline: ``twma <command> --config run.yaml``.

Every command reads a YAML run configuration, writes its artifacts under the
run directory and records them in ``manifest.json``. A command whose recorded
hash matches the current configuration is skipped. Downstream commands refuse
to read artifacts that are missing or that were produced under a different
configuration.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, sample_config

log = logging.getLogger("twma")

COMMANDS = ("synth", "render", "train", "explain", "enhance", "backtest", "rules", "transfer", "report")
UPSTREAM = {
    "synth": (),
    "render": ("synth",),
    "train": ("synth", "render"),
    "explain": ("synth", "render", "train"),
    "enhance": ("synth", "explain"),
    "backtest": ("synth", "enhance"),
    "rules": ("synth", "explain"),
    "transfer": ("synth", "render", "train"),
    "report": ("backtest", "rules", "transfer"),
}
ARTIFACT_CLASS = {
    "synth": "panel", "render": "images", "train": "checkpoints", "explain": "weight-panels",
    "enhance": "signal-panels", "backtest": "backtest-reports", "rules": "rule-reports",
    "transfer": "transfer-reports", "report": "report",
}
MANIFEST = "manifest.json"
TIMINGS = "timings.json"
LOCK = ".lock"
N_SAMPLES = 4


class CliError(Exception):
    exit_code = 2


class ValidationError(CliError):
    exit_code = 1


class MissingUpstreamError(CliError):
    exit_code = 1


class StaleArtifactError(CliError):
    exit_code = 1


class LockError(CliError):
    exit_code = 2


# ---------------------------------------------------------------------------
# artifact headers

def header_line(h: str, command: str) -> str:
    return f"config_hash={h} command={command}"


def file_sha256(path: Path) -> str:
    d = hashlib.sha256()
    with path.open("rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            d.update(block)
    return d.hexdigest()


def read_header_hash(path: str | Path) -> str | None:
    """The configuration hash an artifact carries, whatever its file type."""
    path = Path(path)
    suf = path.suffix
    if suf in (".csv", ".md"):
        with path.open() as fh:
            first = fh.readline()
        for tok in first.replace("<!--", " ").replace("-->", " ").lstrip("# ").split():
            if tok.startswith("config_hash="):
                return tok.split("=", 1)[1]
        return None
    if suf == ".json":
        return json.loads(path.read_text()).get("config_hash")
    if suf in (".tensor", ".aux"):
        from .io import read_tensor_header
        return read_tensor_header(path).get("config_hash")
    if suf == ".bin":
        from .nn import read_manifest
        return read_manifest(path.with_suffix(".json")).get("config_hash")
    if suf == ".png":
        from PIL import Image
        with Image.open(path) as im:
            return im.text.get("config_hash")
    if suf == ".svg":
        text = path.read_text()
        key = "config_hash="
        i = text.find(key)
        return text[i + len(key):i + len(key) + 64] if i >= 0 else None
    return None


# ---------------------------------------------------------------------------
# run directory state

class Run:
    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.root = cfg.output_dir
        self._panel = None

    # manifest ---------------------------------------------------------------
    def manifest(self) -> dict:
        p = self.root / MANIFEST
        if p.exists():
            return json.loads(p.read_text())
        return {"commands": {}}

    def path(self, rel: str) -> Path:
        return self.root / rel

    def write_manifest(self, m: dict) -> None:
        arts = []
        for cmd in COMMANDS:
            entry = m["commands"].get(cmd)
            if not entry:
                continue
            for rel in entry["artifacts"]:
                arts.append({"path": rel, "class": ARTIFACT_CLASS[cmd], "command": cmd,
                             "config_hash": entry["hash"], "sha256": file_sha256(self.path(rel))})
        arts.sort(key=lambda a: a["path"])
        out = {
            "tool": "twma", "version": __version__, "schema_version": self.cfg["schema_version"],
            "name": self.cfg["name"], "config_hash": self.cfg.full_hash(), "tag": self.cfg.tag,
            "commands": {c: m["commands"][c] for c in COMMANDS if c in m["commands"]},
            "artifacts": arts,
            "timings": {"path": TIMINGS, "volatile": True},
            "config": "config.yaml",
        }
        tmp = self.root / (MANIFEST + ".tmp")
        tmp.write_text(json.dumps(out, indent=2, sort_keys=True) + "\n")
        os.replace(tmp, self.root / MANIFEST)

    def record(self, command: str, artifacts: list[str]) -> None:
        m = self.manifest()
        m["commands"][command] = {"hash": self.cfg.section_hash(command), "artifacts": sorted(artifacts)}
        self.write_manifest(m)

    def write_timing(self, command: str, seconds: float) -> None:
        p = self.root / TIMINGS
        t = json.loads(p.read_text()) if p.exists() else {}
        t[command] = round(seconds, 3)
        p.write_text(json.dumps(t, indent=2, sort_keys=True) + "\n")

    def cached(self, command: str) -> bool:
        entry = self.manifest()["commands"].get(command)
        if not entry or entry["hash"] != self.cfg.section_hash(command):
            return False
        return all(self.path(a).exists() for a in entry["artifacts"])

    def _present(self, command: str) -> bool:
        entry = self.manifest()["commands"].get(command)
        return bool(entry) and all(self.path(a).exists() for a in entry["artifacts"])

    def require(self, command: str) -> None:
        # name the earliest missing producer anywhere up the chain, so the hint is runnable as-is
        chain, todo = set(), list(UPSTREAM[command])
        while todo:
            up = todo.pop()
            if up not in chain:
                chain.add(up)
                todo.extend(UPSTREAM[up])
        for up in (c for c in COMMANDS if c in chain):
            if not self._present(up):
                raise MissingUpstreamError(
                    f"{command} needs the {ARTIFACT_CLASS[up]} artifacts in {self.root}: "
                    f"run cmd_{up} first (twma {up} --config <config>)")
        for up in UPSTREAM[command]:
            entry = self.manifest()["commands"][up]
            want = self.cfg.section_hash(up)
            if entry["hash"] != want:
                raise StaleArtifactError(
                    f"stale artifact: {ARTIFACT_CLASS[up]} in {self.root} were produced with config hash "
                    f"{entry['hash'][:12]}, the current configuration needs {want[:12]}; "
                    f"re-run cmd_{up} (twma {up} --config <config>)")

    def check_file(self, rel: str, command: str) -> Path:
        p = self.path(rel)
        if not p.exists():
            raise MissingUpstreamError(f"missing {rel}: run cmd_{command} first")
        got = read_header_hash(p)
        want = self.cfg.section_hash(command)
        if got != want:
            raise StaleArtifactError(f"stale artifact {rel}: header hash {str(got)[:12]} != {want[:12]}; "
                                     f"re-run cmd_{command}")
        return p

    # shared inputs ------------------------------------------------------------
    def header(self, command: str) -> str:
        return header_line(self.cfg.section_hash(command), command)

    def panel(self):
        if self._panel is None:
            from .data import load_panel
            p = self.check_file("data/panel.csv", "synth")
            self._panel, _ = load_panel(p, size_filter=self.cfg["data"]["size_filter"], report=False)
        return self._panel

    def spec(self):
        from .chart import ChartSpec, Structure
        c = self.cfg["chart"]
        return ChartSpec(int(c["D"]), Structure(c["structure"]))

    def norm(self):
        from .chart import NormStats
        return NormStats.load(self.check_file("render/norm.json", "render"))

    def models(self):
        from .nn import load_checkpoint
        out = []
        for s in self.cfg["model"]["seeds"]:
            self.check_file(f"train/model_seed{s}.json", "train")
            out.append(load_checkpoint(self.path(f"train/model_seed{s}.json")))
        return out

    def weights(self, rel: str, command: str):
        from .triple_i import WeightPanel
        return WeightPanel.load(self.check_file(rel, command))

    def explain_mask(self) -> np.ndarray:
        T = self.panel().n_days
        lo = max(0, int(self.cfg["split"]["train_end"]) - int(self.cfg["saliency"]["history_days"]))
        mask = np.zeros(T, bool)
        mask[lo:] = True
        return mask

    def rf(self):
        b = self.cfg["backtest"]
        if not b["rf_path"]:
            return float(b["rf"])
        return load_rf(self.cfg.resolve(b["rf_path"]), self.panel().dates)

    def eligible(self) -> np.ndarray:
        return self.panel().in_universe()


@contextlib.contextmanager
def run_lock(root: Path):
    root.mkdir(parents=True, exist_ok=True)
    lock = root / LOCK
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        pid = lock.read_text().strip() or "?"
        if pid.isdigit() and not _alive(int(pid)):
            lock.unlink()
            fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        else:
            raise LockError(f"{root} is locked by process {pid}; one command at a time per run directory") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        with contextlib.suppress(FileNotFoundError):
            lock.unlink()


def _alive(pid: int) -> bool:
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    return True


def load_rf(path: Path, dates: np.ndarray) -> np.ndarray:
    """Daily risk-free rates from a ``date,rf`` CSV aligned to the panel calendar."""
    table = {}
    with path.open(newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].startswith("#") or row[0].strip().lower() == "date":
                continue
            table[np.datetime64(row[0].strip(), "D")] = float(row[1])
    missing = [str(d) for d in dates if d not in table]
    if missing:
        raise ValidationError(f"{path}: no risk-free rate for {len(missing)} panel dates (first {missing[0]})")
    return np.array([table[d] for d in dates])


# ---------------------------------------------------------------------------
# commands

def cmd_synth(run: Run) -> list[str]:
    from .data import load_panel, save_panel, synth_panel
    cfg = run.cfg
    d = cfg["data"]
    if d["source"] == "synth":
        s = d["synth"]
        panel = synth_panel(s["n_stocks"], s["n_days"], s["seed"], s["regime"])
    else:
        panel, summary = load_panel(cfg.resolve(d["path"]), report=False)
        if summary.rows_rejected:
            log.warning("dropped %d invalid rows from %s", summary.rows_rejected, d["path"])
    try:
        cfg.check_history(panel.n_days)
    except ConfigError as e:
        raise ValidationError(str(e)) from None
    (run.root / "data").mkdir(parents=True, exist_ok=True)
    save_panel(panel, run.path("data/panel.csv"), header=run.header("synth"))
    info = {"config_hash": cfg.section_hash("synth"), "n_stocks": panel.n_stocks, "n_days": panel.n_days,
            "first_date": str(panel.dates[0]), "last_date": str(panel.dates[-1]),
            "source": d["source"]}
    _write_json(info, run.path("data/panel.json"))
    return ["data/panel.csv", "data/panel.json"]


def cmd_render(run: Run) -> list[str]:
    from .chart import render_windows, to_png
    from .io import write_tensor
    from .pipeline import build_training_set
    cfg = run.cfg
    m = cfg["model"]
    panel, spec = run.panel(), run.spec()
    size = int(cfg["chart"]["input_size"])
    ts = build_training_set(panel, spec, cfg.R, int(cfg["split"]["train_end"]), size,
                            max_images=m["max_train_images"], seed=int(m["seeds"][0]))
    h = cfg.section_hash("render")
    (run.root / "render" / "samples").mkdir(parents=True, exist_ok=True)
    idx = np.stack([ts.win.stock_idx, ts.win.day_idx, ts.y], axis=1).astype(np.int64)
    write_tensor(run.path("render/train_index.tensor"), idx, "i64", config_hash=h,
                 columns=["stock", "end_day", "label"])
    ts.norm.save(run.path("render/norm.json"), config_hash=h)
    out = ["render/train_index.tensor", "render/norm.json", "render/render.json"]
    raw = render_windows(ts.win.subset(slice(0, N_SAMPLES)), spec, size, dtype=np.float64)
    for k in range(len(raw)):
        rel = f"render/samples/sample_{k}.png"
        to_png(raw[k], run.path(rel), {"config_hash": h, "stock": panel.stocks[ts.win.stock_idx[k]],
                                       "end_date": str(panel.dates[ts.win.day_idx[k]])})
        out.append(rel)
    _write_json({"config_hash": h, "n_images": int(len(ts.y)), "frac_up": float(ts.y.mean()),
                 "input_size": size, "spec": spec.to_dict(), "R": cfg.R}, run.path("render/render.json"))
    return out


def _training_images(run: Run):
    from .chart import apply_norm, render_windows
    from .io import read_tensor
    from .pipeline import windows_at
    idx, _ = read_tensor(run.check_file("render/train_index.tensor", "render"))
    win = windows_at(run.panel(), run.cfg.D, idx[:, 0], idx[:, 1])
    size = int(run.cfg["chart"]["input_size"])
    x = apply_norm(render_windows(win, run.spec(), size), run.norm()).astype(np.float32)
    return x, idx[:, 2]


def cmd_train(run: Run) -> list[str]:
    from .nn import PRESETS, ResNetConfig, save_checkpoint, train, write_history
    cfg = run.cfg
    m = cfg["model"]
    x, y = _training_images(run)
    rcfg = ResNetConfig(m["depth"], input_size=int(cfg["chart"]["input_size"]), batch_norm=bool(m["batch_norm"]))
    assert m["depth"] in PRESETS
    h = cfg.section_hash("train")
    (run.root / "train").mkdir(parents=True, exist_ok=True)
    out, summary = [], []
    for s in m["seeds"]:
        log.info("training %s seed %s on %d images", cfg.tag, s, len(y))
        res = train(rcfg, x, y, lr=float(m["lr"]), batch_size=m["batch_size"], patience=m["patience"],
                    max_epochs=m["max_epochs"], seed=int(s),
                    on_epoch=lambda e: log.info("  epoch %d val_loss %.5f val_acc %.3f",
                                                e["epoch"], e["val_loss"], e["val_acc"]))
        save_checkpoint(res.model, run.path(f"train/model_seed{s}"), config_hash=h, tag=cfg.tag)
        write_history(res.history, run.path(f"train/history_seed{s}.csv"), header=run.header("train"))
        best = res.history[res.best_epoch]
        summary.append({"seed": s, "best_epoch": res.best_epoch, "val_loss": best["val_loss"],
                        "val_acc": best["val_acc"], "epochs": len(res.history) - 1})
        out += [f"train/model_seed{s}.json", f"train/model_seed{s}.bin", f"train/history_seed{s}.csv"]
    _write_json({"config_hash": h, "tag": cfg.tag, "n_params": _n_params(rcfg), "members": summary},
                run.path("train/train.json"))
    return out + ["train/train.json"]


def _n_params(rcfg) -> int:
    from .nn import ResNetModel
    return ResNetModel.init(rcfg, 0).n_params()


def _weights_cmd(run: Run, command: str, period: int) -> tuple:
    from .pipeline import weight_panel
    cfg = run.cfg
    sal = cfg["saliency"]
    return weight_panel(run.models(), run.panel(), run.spec(), run.norm(), int(cfg["chart"]["input_size"]),
                        day_mask=run.explain_mask(), period=period, B=int(sal["B"]),
                        sigma_scale=float(sal["sigma_scale"]), seed=int(sal["seed"]))


def cmd_explain(run: Run) -> list[str]:
    from .chart import heat_overlay, render_windows, to_png
    from .pipeline import localization_for
    cfg = run.cfg
    h = cfg.section_hash("explain")
    wp = _weights_cmd(run, "explain", 1)
    (run.root / "explain" / "overlays").mkdir(parents=True, exist_ok=True)
    wp.save(run.path("explain/weights.tensor"), config_hash=h)
    out = ["explain/weights.tensor", "explain/weights.aux", "explain/weights.json"]
    _write_json({"config_hash": h, "tag": cfg.tag, **wp.stats()}, run.path("explain/weights.json"))
    # heat overlays for the first few test windows
    panel, spec = run.panel(), run.spec()
    size = int(cfg["chart"]["input_size"])
    win, maps, yhat = localization_for(run.models(), panel, spec, run.norm(), size,
                                       int(cfg["split"]["train_end"]), N_SAMPLES,
                                       B=int(cfg["saliency"]["B"]), sigma_scale=float(cfg["saliency"]["sigma_scale"]),
                                       seed=int(cfg["saliency"]["seed"]))
    raw = render_windows(win, spec, size, dtype=np.float64)
    for k in range(len(win)):
        rel = f"explain/overlays/overlay_{k}.png"
        to_png(heat_overlay(raw[k], maps[k, yhat[k]]), run.path(rel),
               {"config_hash": h, "stock": panel.stocks[win.stock_idx[k]],
                "end_date": str(panel.dates[win.day_idx[k]]), "class": int(yhat[k])})
        out.append(rel)
    return out


def _signal_names(cfg: RunConfig) -> list[str]:
    return list(cfg["signals"]["names"])


def _alphas(cfg: RunConfig):
    from .signals.alpha import default_alphas, load_alphas
    a = cfg["signals"]["alphas"]
    return load_alphas(cfg.resolve(a)) if a else default_alphas()


def _variants(run: Run, weights: dict, R: int) -> dict[str, dict[str, np.ndarray]]:
    from .pipeline import signal_variants
    sig = run.cfg["signals"]
    out = {}
    for name in _signal_names(run.cfg):
        out[name] = signal_variants(run.panel(), name, weights, R=R, alphas=_alphas(run.cfg),
                                    trend_lags=sig["trend_lags"], smooth_window=int(sig["smooth_window"]),
                                    min_fits=int(sig["min_fits"]) if sig["min_fits"] is not None else None)
    return out


def _save_signals(run: Run, groups: dict, rel: str, h: str, **meta) -> None:
    from .io import write_tensor
    names, families, arrs = [], [], []
    for fam, vs in groups.items():
        for k, v in vs.items():
            names.append(k)
            families.append(fam)
            arrs.append(v)
    write_tensor(run.path(rel), np.stack(arrs), "f64", config_hash=h, names=names, families=families, **meta)


def _load_signals(run: Run, rel: str, command: str) -> dict[str, dict[str, np.ndarray]]:
    from .io import read_tensor
    a, meta = read_tensor(run.check_file(rel, command))
    out: dict = {}
    for k, (name, fam) in enumerate(zip(meta["names"], meta["families"])):
        out.setdefault(fam, {})[name] = a[k]
    return out


def cmd_enhance(run: Run) -> list[str]:
    from .pipeline import ewma_bank
    from .signals.classic import write_signals
    cfg = run.cfg
    h = cfg.section_hash("enhance")
    wp = run.weights("explain/weights.tensor", "explain")
    groups = _variants(run, {"TWMA": wp, **ewma_bank(cfg["signals"]["ewma_lambdas"], cfg.D)}, cfg.R)
    (run.root / "enhance").mkdir(parents=True, exist_ok=True)
    _save_signals(run, groups, "enhance/signals.tensor", h, R=cfg.R)
    panel = run.panel()
    te = int(cfg["split"]["train_end"])
    flat = {}
    for vs in groups.values():
        for k, v in vs.items():
            v = v.copy()
            v[:, :te] = np.nan
            flat[k] = v
    write_signals(run.path("enhance/signals.csv"), panel.stocks, panel.dates, flat, header=run.header("enhance"))
    return ["enhance/signals.tensor", "enhance/signals.csv"]


def _family_start(variants: dict[str, np.ndarray], lo: int, min_stocks: int) -> int:
    """First day from ``lo`` on which every variant has a full cross-section to sort."""
    need = max(2, min_stocks)
    ok = np.all([np.isfinite(v).sum(axis=0) >= need for v in variants.values()], axis=0)
    ok[:lo] = False
    hits = np.flatnonzero(ok)
    return int(hits[0]) if len(hits) else len(ok)


def _backtest_groups(run: Run, groups: dict, R: int) -> list:
    from .backtest import run_backtest
    cfg = run.cfg
    panel = run.panel()
    ms = int(cfg["backtest"]["min_stocks"])
    rf, elig = run.rf(), run.eligible()
    te = int(cfg["split"]["train_end"])
    reports = []
    for vs in groups.values():
        start = _family_start(vs, te, ms)
        for name, sig in vs.items():
            reports.append(run_backtest(sig, panel.close, R, rf, start=start, name=name, eligible=elig,
                                        min_stocks=ms))
    return reports


def cmd_backtest(run: Run) -> list[str]:
    from .backtest import write_deciles_csv, write_metrics_csv
    cfg = run.cfg
    h = cfg.section_hash("backtest")
    groups = _load_signals(run, "enhance/signals.tensor", "enhance")
    reports = _backtest_groups(run, groups, cfg.R)
    (run.root / "backtest").mkdir(parents=True, exist_ok=True)
    hdr = run.header("backtest")
    write_metrics_csv(reports, run.path("backtest/metrics.csv"), hdr)
    write_deciles_csv(reports, run.path("backtest/deciles.csv"), hdr)
    _write_json({"config_hash": h, "tag": cfg.tag, "reports": [r.to_dict() for r in reports]},
                run.path("backtest/backtest.json"))
    return ["backtest/metrics.csv", "backtest/deciles.csv", "backtest/backtest.json"]


def _rule_list(cfg: RunConfig):
    from .signals.rules import default_grid, load_grid, rule_universe
    g = cfg["rules"]["grid"]
    grid = default_grid(g == "full") if g in ("default", "full") else load_grid(cfg.resolve(g))
    rules = rule_universe(grid)
    if cfg["rules"]["max_rules"]:
        rules = rules[:int(cfg["rules"]["max_rules"])]
    return rules


def cmd_rules(run: Run) -> list[str]:
    from .backtest import compare_universes, run_backtest, write_histogram_csv, write_histogram_svg
    from .signals.rules import eval_rule_arrays
    from .triple_i import twma
    cfg = run.cfg
    h = cfg.section_hash("rules")
    panel = run.panel()
    wp = run.weights("explain/weights.tensor", "explain")
    R, ms = cfg.R, int(cfg["backtest"]["min_stocks"])
    rf, elig = run.rf(), run.eligible()
    te = int(cfg["split"]["train_end"])
    rows, sr_o, sr_t = [], {}, {}
    for rule in _rule_list(cfg):
        pos = eval_rule_arrays(rule, panel.close, panel.volume)
        weighted = twma(pos, wp.omega, wp.yhat)
        start = _family_start({"o": pos, "t": weighted}, te, ms)
        a = run_backtest(pos, panel.close, R, rf, start=start, name=rule.id, eligible=elig, min_stocks=ms)
        b = run_backtest(weighted, panel.close, R, rf, start=start, name="TWMA-" + rule.id, eligible=elig,
                         min_stocks=ms)
        sr_o[rule.id], sr_t[rule.id] = a.sr, b.sr
        rows.append((rule.id, a, b))
    (run.root / "rules").mkdir(parents=True, exist_ok=True)
    from .io import fmt
    with run.path("rules/rules_sr.csv").open("w", newline="") as fh:
        fh.write(f"# {run.header('rules')}\n")
        w = csv.writer(fh)
        w.writerow(["rule_id", "sr_original", "sr_twma", "ret_original", "ret_twma", "n_periods"])
        for rid, a, b in rows:
            w.writerow([rid, _sr_text(a.sr), _sr_text(b.sr), fmt(a.ret), fmt(b.ret), a.n_periods])
    cmp = compare_universes(sr_t, sr_o)
    _write_json({"config_hash": h, "tag": cfg.tag, "n_rules": len(rows), "comparison": "TWMA - original",
                 **cmp.to_dict()}, run.path("rules/comparison.json"))
    vals = [v for v in list(sr_o.values()) + list(sr_t.values()) if v is not None and np.isfinite(v)]
    rng = (float(np.floor(min(vals))), float(np.ceil(max(vals)))) if vals else None
    bins = int(cfg["rules"]["bins"])
    out = ["rules/rules_sr.csv", "rules/comparison.json"]
    for label, d in (("original", sr_o), ("twma", sr_t)):
        write_histogram_csv(list(d.values()), run.path(f"rules/hist_{label}.csv"), bins, rng, run.header("rules"))
        title = f"{'TWMA' if label == 'twma' else 'original'} rule signals, {cfg.tag}"
        write_histogram_svg(list(d.values()), run.path(f"rules/hist_{label}.svg"), title, bins, rng,
                            description=run.header("rules"))
        out += [f"rules/hist_{label}.csv", f"rules/hist_{label}.svg"]
    return out


def _sr_text(sr) -> str:
    from .io import fmt
    return "undefined" if sr is None else fmt(sr)


def cmd_transfer(run: Run) -> list[str]:
    from .backtest import write_metrics_csv
    cfg = run.cfg
    h = cfg.section_hash("transfer")
    t = cfg["transfer"]
    period, Rt = int(t["period"]), int(t["R"])
    wp = _weights_cmd(run, "transfer", period).transferred(period)
    (run.root / "transfer").mkdir(parents=True, exist_ok=True)
    wp.save(run.path("transfer/weights.tensor"), config_hash=h)
    groups = _variants(run, {"TWMA-T": wp}, Rt)
    reports = _backtest_groups(run, groups, Rt)
    write_metrics_csv(reports, run.path("transfer/metrics.csv"), run.header("transfer"))
    _write_json({"config_hash": h, "source_model": cfg.tag, "period": period, "R": Rt,
                 "images": f"{cfg.D}-period images of {period}-day bars", "weights_D": wp.D,
                 "reports": [r.metrics() for r in reports]}, run.path("transfer/transfer.json"))
    return ["transfer/weights.tensor", "transfer/weights.aux", "transfer/metrics.csv", "transfer/transfer.json"]


def _read_metrics(path: Path) -> list[dict]:
    with path.open() as fh:
        rows = [line for line in fh if not line.startswith("#")]
    return list(csv.DictReader(rows))


def cmd_report(run: Run) -> list[str]:
    from .backtest import write_json
    cfg = run.cfg
    h = cfg.section_hash("report")
    bt = _read_metrics(run.check_file("backtest/metrics.csv", "backtest"))
    tr = _read_metrics(run.check_file("transfer/metrics.csv", "transfer"))
    rules = json.loads(run.check_file("rules/comparison.json", "rules").read_text())
    (run.root / "report").mkdir(parents=True, exist_ok=True)

    def table(rows, title):
        lines = [f"## {title}", "", "| Strategy | Ret | SR | TO |", "|---|---:|---:|---:|"]
        for r in rows:
            lines.append(f"| {r['strategy']} | {_num(r['ret'])} | {_num(r['sr'])} | {_pct(r['to'])} |")
        return lines + [""]

    md = [f"<!-- {run.header('report')} -->", f"# {cfg['name']}: {cfg.tag}", ""]
    md += table(bt, f"Long-short decile portfolios, holding period {cfg.R} day(s)")
    md += table(tr, f"Transferred weights, holding period {cfg['transfer']['R']} days")
    md += ["## Trading rules", "",
           f"{rules['n_rules']} rules; mean SR original {_num(rules['mean_b'])}, "
           f"TWMA {_num(rules['mean_a'])}; paired t = {_num(rules['t'])}, one-sided p = {_num(rules['p'], 4)}"
           f" ({rules['flag']}).", ""]
    run.path("report/report.md").write_text("\n".join(md))
    with run.path("report/tables.csv").open("w", newline="") as fh:
        fh.write(f"# {run.header('report')}\n")
        w = csv.writer(fh)
        w.writerow(["table", "strategy", "ret", "sr", "to"])
        for name, rows in (("main", bt), ("transfer", tr)):
            for r in rows:
                w.writerow([name, r["strategy"], r["ret"], r["sr"], r["to"]])
    write_json({"config_hash": h, "tag": cfg.tag, "main": bt, "transfer": tr, "rules": rules},
               run.path("report/report.json"))
    return ["report/report.md", "report/tables.csv", "report/report.json"]


def _num(x, digits: int = 2) -> str:
    try:
        v = float(x)
    except (TypeError, ValueError):
        return "n/a" if x in ("", None) else str(x)
    return "n/a" if not np.isfinite(v) else f"{v:.{digits}f}"


def _pct(x) -> str:
    try:
        return f"{float(x) * 100:.0f}%"
    except (TypeError, ValueError):
        return "n/a"


def _write_json(obj, path: Path) -> None:
    from .backtest import write_json
    write_json(obj, path)


HANDLERS = {
    "synth": cmd_synth, "render": cmd_render, "train": cmd_train, "explain": cmd_explain,
    "enhance": cmd_enhance, "backtest": cmd_backtest, "rules": cmd_rules, "transfer": cmd_transfer,
    "report": cmd_report,
}


def execute(cfg: RunConfig, command: str, force: bool = False) -> str:
    """Run one command under the directory lock; returns "ran" or "cached"."""
    run = Run(cfg)
    with run_lock(run.root):
        _write_config(run)
        if not force and run.cached(command):
            log.info("%s: cached (config hash %s)", command, cfg.section_hash(command)[:12])
            return "cached"
        run.require(command)
        t0 = time.perf_counter()
        arts = HANDLERS[command](run)
        run.record(command, arts)
        run.write_timing(command, time.perf_counter() - t0)
        log.info("%s: wrote %d artifacts in %.1fs", command, len(arts), time.perf_counter() - t0)
        return "ran"


def recipe(cfg: RunConfig, force: bool = False) -> dict[str, str]:
    return {c: execute(cfg, c, force) for c in COMMANDS}


def _write_config(run: Run) -> None:
    import yaml
    text = yaml.safe_dump(run.cfg.raw, sort_keys=True)
    p = run.root / "config.yaml"
    if not p.exists() or p.read_text() != text:
        p.write_text(text)


# ---------------------------------------------------------------------------
# argument parsing

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="twma", description=(
        "Image-induced importance weights for price-trend signals: render charts, train "
        "ResNets, explain them, and backtest weighted-moving-average signals."))
    ap.add_argument("--version", action="version", version=f"twma {__version__}")
    sub = ap.add_subparsers(dest="command", metavar="COMMAND")
    helps = {
        "synth": "create (or import) the price panel",
        "render": "choose training windows, fit normalization, write sample charts",
        "train": "train the ResNet ensemble on chart images",
        "explain": "compute importance weights for every window",
        "enhance": "build original, TWMA and EWMA signal panels",
        "backtest": "long-short decile backtests of every signal",
        "rules": "trading-rule universe: original vs TWMA Sharpe distributions",
        "transfer": "time-scale transfer: weights from collapsed multi-day bars",
        "report": "consolidated tables",
        "recipe": "run every command in order",
    }
    for name, h in helps.items():
        p = sub.add_parser(name, help=h, description=h)
        p.add_argument("--config", "-c", required=True, help="run configuration (YAML)")
        p.add_argument("--output-dir", "-o", help="override output_dir from the config")
        p.add_argument("--force", action="store_true", help="recompute even when cached")
        p.add_argument("--verbose", "-v", action="store_true")
    p = sub.add_parser("init", help="write a sample configuration", description="write a sample configuration")
    p.add_argument("path", help="where to write the YAML file")
    return ap


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    if args.command is None:
        ap.print_help()
        return 1
    if args.command == "init":
        p = Path(args.path)
        if p.exists():
            print(f"twma: {p} already exists", file=sys.stderr)
            return 1
        p.write_text(sample_config())
        return 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        over = {"output_dir": str(Path(args.output_dir).resolve())} if args.output_dir else None
        cfg = RunConfig.load(args.config, over)
        if args.command == "recipe":
            done = recipe(cfg, args.force)
            for c, state in done.items():
                print(f"{c}: {state}")
        else:
            print(f"{args.command}: {execute(cfg, args.command, args.force)}")
        print(f"manifest: {cfg.output_dir / MANIFEST}")
        return 0
    except ConfigError as e:
        print(f"twma: invalid configuration: {e}", file=sys.stderr)
        return 1
    except CliError as e:
        print(f"twma: {e}", file=sys.stderr)
        return e.exit_code
    except Exception as e:  # noqa: BLE001
        log.info("failure", exc_info=True)
        print(f"twma: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
