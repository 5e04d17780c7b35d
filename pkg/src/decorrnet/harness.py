"""Experiment configuration, metrics files and the preset experiments.

Config files are INI-style (``key = value`` under ``[section]`` headers). See
``configs/`` in the repository for complete examples; the accepted keys are
listed in :data:`SCHEMA`.
"""

import configparser
import csv
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import data as data_mod
from .data import SyntheticSpec, generate_correlated, load_cifar10, subset
from .decorrelation import DecorrConfig, DecorrelationState, update_decorrelation
from .training import SMALL_CONVNET, AdamConfig, MetricsRecord, RunConfig, grid_search, train

log = logging.getLogger(__name__)

PRESETS = ("fig1-demo", "cifar10-kappa-sweep")
SWEEP_KAPPAS = (0.0, 0.5, 1.0)
BASE_COLUMNS = ["epoch", "wall_clock_s", "train_loss", "train_acc", "test_loss", "test_acc"]


def _bool(s):
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _floats(s):
    return [float(v) for v in s.split(",") if v.strip()]


def _optint(s):
    return None if s.strip().lower() in ("", "none", "all") else int(s)


SCHEMA = {
    "run": {
        "name": str, "preset": str, "algorithm": str, "epochs": int,
        "batch_size": int, "seed": int, "seeds": lambda s: [int(v) for v in s.split(",")],
    },
    "data": {"dataset": str, "dir": str, "train_per_class": _optint, "test_per_class": _optint, "subset_seed": int},
    "model": {"layers": str},
    "adam": {"eta": float, "beta1": float, "beta2": float, "denom_epsilon": float},
    "decorrelation": {"kappa": float, "epsilon": float, "sample_fraction": float, "normalize_by_dim": _bool},
    "grid": {"eta": _floats, "epsilon": _floats, "budget_epochs": int},
    "fig1": {
        "n": int, "correlation": float, "epsilon": float, "iterations": int,
        "kappas": _floats, "seed": int,
    },
}


class ConfigError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid config: " + "; ".join(self.problems))


@dataclass
class Fig1Settings:
    n: int = 1000
    correlation: float = 0.8
    epsilon: float = 1e-3
    iterations: int = 6000
    kappas: list = field(default_factory=lambda: [0.0, 0.5])
    seed: int = 0


@dataclass
class Experiment:
    run: RunConfig
    preset: str | None = None
    seeds: list | None = None
    data_dir: str | None = None
    subset_seed: int = 0
    grid: dict | None = None
    fig1: Fig1Settings = field(default_factory=Fig1Settings)


def parse_config(text: str) -> Experiment:
    """Parse and validate a config; every offending key is reported at once."""
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError([f"unparseable config: {exc}"]) from exc
    problems, values = [], {}
    for section in cp.sections():
        if section not in SCHEMA:
            problems.append(f"unknown section [{section}]")
            continue
        for key, raw in cp.items(section):
            conv = SCHEMA[section].get(key)
            if conv is None:
                problems.append(f"unknown key {section}.{key}")
                continue
            try:
                values[(section, key)] = conv(raw)
            except ValueError as exc:
                problems.append(f"bad value for {section}.{key}: {exc}")

    g = lambda s, k, d=None: values.get((s, k), d)  # noqa: E731
    preset = g("run", "preset")
    if preset is not None and preset not in PRESETS:
        problems.append(f"run.preset must be one of {PRESETS}, got {preset!r}")
    algorithm = g("run", "algorithm", "dbp")
    if algorithm not in ("bp", "dbp"):
        problems.append(f"run.algorithm must be 'bp' or 'dbp', got {algorithm!r}")
    if g("data", "dataset", "cifar10") != "cifar10":
        problems.append("data.dataset must be 'cifar10'")

    def build(key, factory, **kw):
        try:
            return factory(**kw)
        except ValueError as exc:
            problems.append(f"[{key}] {exc}")

    adam = build("adam", AdamConfig, **{k: v for (s, k), v in values.items() if s == "adam"})
    decorr = build("decorrelation", DecorrConfig, **{k: v for (s, k), v in values.items() if s == "decorrelation"})
    # stand-ins keep the remaining checks running when a section failed
    run = build(
        "run",
        RunConfig,
        name=g("run", "name", "run"),
        layers=g("model", "layers", SMALL_CONVNET),
        adam=adam or AdamConfig(),
        decorr=(decorr or DecorrConfig()) if algorithm == "dbp" else None,
        batch_size=g("run", "batch_size", 256),
        epochs=g("run", "epochs", 20),
        seed=g("run", "seed", 0),
        train_per_class=g("data", "train_per_class", 500),
        test_per_class=g("data", "test_per_class", 100),
    )
    grid = None
    if any(s == "grid" for s, _ in values):
        grid = {
            "eta": g("grid", "eta", [adam.eta if adam else 1.6e-4]),
            "epsilon": g("grid", "epsilon", [0.0]),
            "budget_epochs": g("grid", "budget_epochs", 5),
        }
        if not grid["eta"] or not grid["epsilon"]:
            problems.append("grid.eta and grid.epsilon must be non-empty")
        if any(e <= 0 for e in grid["eta"]) or any(e < 0 for e in grid["epsilon"]):
            problems.append("grid.eta values must be positive and grid.epsilon values non-negative")
    fig1 = Fig1Settings(**{k: v for (s, k), v in values.items() if s == "fig1"})
    if fig1.n < 2 or fig1.iterations < 1 or not -1 < fig1.correlation < 1:
        problems.append("fig1 needs n >= 2, iterations >= 1 and |correlation| < 1")
    if problems:
        raise ConfigError(problems)
    return Experiment(run, preset, g("run", "seeds"), g("data", "dir"), g("data", "subset_seed", 0), grid, fig1)


def load_config(path) -> Experiment:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError([f"cannot read config {path}: {exc}"]) from exc
    return parse_config(text)


# metrics files


def csv_columns(n_layers: int) -> list:
    cols = list(BASE_COLUMNS)
    for i in range(n_layers):
        cols += [f"corr_metric_layer_{i}", f"decorr_loss_layer_{i}"]
    return cols


def record_row(r: MetricsRecord) -> list:
    row = [r.epoch, r.wall_clock_s, r.train_loss, r.train_acc, r.test_loss, r.test_acc]
    for c, d in zip(r.corr_metrics, r.decorr_losses):
        row += [c, d]
    return row


def write_metrics_csv(path, records) -> None:
    n_layers = len(records[0].corr_metrics) if records else 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(csv_columns(n_layers))
        for r in records:
            w.writerow([repr(float(v)) if isinstance(v, float) else v for v in record_row(r)])


def read_metrics_csv(path) -> list:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][: len(BASE_COLUMNS)] != BASE_COLUMNS:
        raise ValueError(f"{path}: not a metrics file (header {rows[0] if rows else None})")
    header = rows[0]
    n_layers = (len(header) - len(BASE_COLUMNS)) // 2
    if header != csv_columns(n_layers):
        raise ValueError(f"{path}: unexpected columns {header}")
    out = []
    for line in rows[1:]:
        if len(line) != len(header):
            raise ValueError(f"{path}: row has {len(line)} fields, header has {len(header)}")
        v = [float(x) for x in line]
        layer = v[len(BASE_COLUMNS):]
        out.append(MetricsRecord(int(v[0]), *v[1:6], corr_metrics=layer[0::2], decorr_losses=layer[1::2]))
    return out


def summarize(records) -> dict:
    """Peak values with the epoch and wall-clock time at which they occurred."""
    out = {"epochs": len(records)}
    for split in ("train", "test"):
        accs = [getattr(r, f"{split}_acc") for r in records]
        losses = [getattr(r, f"{split}_loss") for r in records]
        if all(math.isnan(a) for a in accs):
            continue
        i = int(np.nanargmax(accs))
        out[f"peak_{split}_acc"] = accs[i]
        out[f"peak_{split}_epoch"] = records[i].epoch
        out[f"peak_{split}_time_s"] = records[i].wall_clock_s
        out[f"min_{split}_loss"] = float(np.nanmin(losses))
    return out


def write_run_outputs(out_dir: Path, name: str, records, extra=None) -> dict:
    out_dir.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(out_dir / f"{name}.csv", records)
    summary = {"name": name, **summarize(records), **(extra or {})}
    (out_dir / f"{name}.json").write_text(json.dumps(summary, indent=2), encoding="utf-8")
    return summary


# experiments


def load_data(exp: Experiment, data_dir=None):
    directory = data_dir or exp.data_dir or data_mod.default_data_dir()
    if directory is None:
        raise FileNotFoundError(f"no CIFAR-10 directory: pass --data-dir or set {data_mod.DATA_DIR_ENV}")
    train_set, test_set = load_cifar10(directory)
    if exp.run.train_per_class is not None:
        train_set = subset(train_set, exp.run.train_per_class, exp.subset_seed)
    if exp.run.test_per_class is not None:
        test_set = subset(test_set, exp.run.test_per_class, exp.subset_seed)
    return train_set, test_set


def sweep_configs(run: RunConfig) -> list:
    """BP baseline plus one DBP run per kappa, all with the same seed."""
    decorr = run.decorr or DecorrConfig()
    cfgs = [replace(run, name=f"{run.name}-bp", decorr=None)]
    for k in SWEEP_KAPPAS:
        cfgs.append(replace(run, name=f"{run.name}-dbp-k{k:g}", decorr=replace(decorr, kappa=k)))
    return cfgs


def run_experiment(exp: Experiment, out_dir, data_dir=None, datasets=None) -> dict:
    """Run the configured experiment and write ``<name>.csv`` / ``<name>.json`` per run."""
    out_dir = Path(out_dir)
    if exp.preset == "fig1-demo":
        return run_fig1(exp.fig1, out_dir)
    train_set, test_set = datasets if datasets is not None else load_data(exp, data_dir)
    cfgs = sweep_configs(exp.run) if exp.preset == "cifar10-kappa-sweep" else [exp.run]
    seeds = exp.seeds or [exp.run.seed]
    summaries = {}
    for cfg in cfgs:
        for seed in seeds:
            c = replace(cfg, seed=seed, name=cfg.name if len(seeds) == 1 else f"{cfg.name}-s{seed}")
            records = train(c, train_set, test_set)
            summaries[c.name] = write_run_outputs(out_dir, c.name, records, {"config": describe(c)})
    return summaries


def describe(cfg: RunConfig) -> dict:
    return {
        "algorithm": "bp" if cfg.decorr is None else "dbp",
        "layers": cfg.layers,
        "eta": cfg.adam.eta,
        "kappa": None if cfg.decorr is None else cfg.decorr.kappa,
        "epsilon": None if cfg.decorr is None else cfg.decorr.epsilon,
        "sample_fraction": None if cfg.decorr is None else cfg.decorr.sample_fraction,
        "batch_size": cfg.batch_size,
        "epochs": cfg.epochs,
        "seed": cfg.seed,
    }


def run_grid(exp: Experiment, out_dir, data_dir=None, datasets=None):
    if exp.grid is None:
        raise ConfigError(["grid command needs a [grid] section"])
    train_set, _ = datasets if datasets is not None else load_data(exp, data_dir)
    result = grid_search(exp.run, exp.grid["eta"], exp.grid["epsilon"], exp.grid["budget_epochs"], train_set)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / f"{exp.run.name}-grid.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["eta\\epsilon"] + [repr(e) for e in result.epsilons])
        for i, eta in enumerate(result.etas):
            w.writerow([repr(eta)] + [
                "diverged" if result.diverged[i, j] else repr(float(result.train_acc[i, j]))
                for j in range(len(result.epsilons))
            ])
    return result


def read_grid_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    epsilons = [float(v) for v in rows[0][1:]]
    etas = [float(r[0]) for r in rows[1:]]
    acc = np.array([[np.nan if v == "diverged" else float(v) for v in r[1:]] for r in rows[1:]])
    return etas, epsilons, acc


# two-covariate demonstration


def fig1_trajectory(z: np.ndarray, kappa: float, epsilon: float, iterations: int):
    """Iterate the full-batch rule on fixed data, tracking second-moment summaries.

    Returns ``(mean_variance, mean_abs_covariance, final_r)``; entry ``t`` of
    each array is measured after ``t`` updates, so index 0 is the raw data.
    """
    d = z.shape[0]
    state = DecorrelationState.identity(d, DecorrConfig(kappa=kappa, epsilon=epsilon, sample_fraction=1.0), np.float64)
    off = ~np.eye(d, dtype=bool)
    var = np.empty(iterations + 1)
    cov = np.empty(iterations + 1)
    for t in range(iterations + 1):
        x = state.r @ z
        m = x @ x.T / x.shape[1]
        var[t] = np.mean(np.diag(m))
        cov[t] = np.mean(np.abs(m[off]))
        if t < iterations:
            state = update_decorrelation(state, z)
    return var, cov, state.r


def fig1_data(settings: Fig1Settings) -> np.ndarray:
    rho = settings.correlation
    return generate_correlated(SyntheticSpec(settings.n, np.array([[1.0, rho], [rho, 1.0]]), settings.seed))


def run_fig1(settings: Fig1Settings, out_dir) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    z = fig1_data(settings)
    summary = {"n": settings.n, "correlation": settings.correlation, "epsilon": settings.epsilon, "runs": {}}
    with open(out_dir / "fig1.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["kappa", "iteration", "mean_variance", "mean_covariance"])
        for kappa in settings.kappas:
            var, cov, _ = fig1_trajectory(z, kappa, settings.epsilon, settings.iterations)
            for t in range(var.size):
                w.writerow([kappa, t, repr(float(var[t])), repr(float(cov[t]))])
            below = np.flatnonzero(cov <= 0.01 * cov[0])
            summary["runs"][f"{kappa:g}"] = {
                "initial_covariance": float(cov[0]),
                "final_covariance": float(cov[-1]),
                "final_variance": float(var[-1]),
                "iterations_to_1pct_covariance": int(below[0]) if below.size else None,
            }
    (out_dir / "fig1.json").write_text(json.dumps(summary, indent=2), encoding="utf-8")
    return summary


# run comparison


def epochs_to_threshold(records, threshold: float, key="test_acc"):
    """First (epoch, wall-clock) at which ``key`` reaches ``threshold``, else ``None``."""
    for r in records:
        if getattr(r, key) >= threshold:
            return r.epoch, r.wall_clock_s
    return None


def compare_runs(paths, thresholds, key="test_acc") -> dict:
    """Epochs/time to each accuracy threshold, relative to the first run."""
    if len(paths) < 2:
        raise ValueError("compare needs at least two metrics files")
    runs = {}
    for p in paths:
        name = Path(p).stem
        if name in runs:
            name = f"{name}#{len(runs)}"
        runs[name] = read_metrics_csv(p)
    widths = {len(r[0].corr_metrics) for r in runs.values() if r}
    if len(widths) > 1:
        raise ValueError(f"metrics files have different layer counts: {sorted(widths)}")
    names = list(runs)
    base = names[0]
    table = []
    for thr in thresholds:
        ref = epochs_to_threshold(runs[base], thr, key)
        for name in names:
            hit = epochs_to_threshold(runs[name], thr, key)
            row = {"threshold": thr, "run": name, "reached": hit is not None}
            if hit is not None:
                row["epochs"], row["time_s"] = hit
                if ref is not None:
                    row["epoch_ratio"] = hit[0] / ref[0]
                    row["time_ratio"] = hit[1] / ref[1] if ref[1] > 0 else float("nan")
            table.append(row)
    pairs = [
        {"run": name, "epoch": r.epoch, "train_loss": r.train_loss, "test_loss": r.test_loss}
        for name in names
        for r in runs[name]
    ]
    return {"baseline": base, "key": key, "thresholds": table, "train_test_loss": pairs}
