"""End-to-end pipeline: generate, identify, design, detect, isolate, report."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .fdfilter import ResidualFilter, compute_residuals, design_filter
from .isolation import evaluate, isolate_knn_batch, solve_simplex_ls, train_templates, _argmax_lowest
from .model import LABELS
from .simulate import GenerationConfig, LabeledDataset, Signal, config_digest, generate_dataset, write_signals_csv
from .sysid import SysidConfig, identify

log = logging.getLogger(__name__)

HEALTHY = LABELS[0]
FRACTIONS = (1.0, 0.5, 0.1)
# 2025 faulty training signals split as evenly as possible over the six classes
TRAIN_FAULT_COUNTS = {"EC": 338, "FBN": 338, "PBN": 338, "SDN": 337, "IDN": 337, "DDN": 337}


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class FilterConfig:
    d_N: int = 5
    n_o: float = 8
    mu: float = 1.0
    convention: str = "2pi"
    hold_order: int = 5
    statistic: str = "energy"

    def validate(self):
        if self.d_N < 3:
            raise ConfigError("d_N must be at least 3")
        if self.n_o <= 0 or self.mu <= 0:
            raise ConfigError("n_o and mu must be positive")
        if self.convention not in ("2pi", "literal"):
            raise ConfigError("convention must be '2pi' or 'literal'")
        if self.statistic not in ("energy", "max"):
            raise ConfigError("statistic must be 'energy' or 'max'")


@dataclass
class IsolationConfig:
    methods: list = field(default_factory=lambda: ["LR", "KNN"])
    streams: list = field(default_factory=lambda: ["r", "y"])
    fractions: list = field(default_factory=lambda: list(FRACTIONS))
    k: int = 1
    subsample_seed: int = 0

    def validate(self):
        if not set(self.methods) <= {"LR", "KNN"}:
            raise ConfigError("methods must be drawn from LR, KNN")
        if not set(self.streams) <= {"r", "y"}:
            raise ConfigError("streams must be drawn from r, y")
        for frac in self.fractions:
            if not 0 < frac <= 1:
                raise ConfigError(f"training-size fraction {frac} outside (0, 1]")
        if self.k < 1:
            raise ConfigError("k must be at least 1")


@dataclass
class ExperimentConfig:
    generation: GenerationConfig = field(default_factory=GenerationConfig)
    test_seed: int = 1
    train_fault_counts: dict | None = field(default_factory=lambda: dict(TRAIN_FAULT_COUNTS))
    sysid: SysidConfig = field(default_factory=SysidConfig)
    sysid_signals: int = 10
    filter: FilterConfig = field(default_factory=FilterConfig)
    isolation: IsolationConfig = field(default_factory=IsolationConfig)
    out_dir: str | None = None

    def __post_init__(self):
        if self.test_seed == self.generation.seed:
            raise ConfigError("training and test seeds must differ")
        if self.sysid_signals < 1:
            raise ConfigError("sysid_signals must be at least 1")
        for label, count in (self.train_fault_counts or {}).items():
            if label not in LABELS or label == HEALTHY:
                raise ConfigError(f"train_fault_counts: {label!r} is not a fault class")
            if int(count) != count or count < 0:
                raise ConfigError(f"train_fault_counts: count for {label} must be a non-negative integer")
        self.filter.validate()
        self.isolation.validate()

    def to_json(self) -> dict:
        return {
            "generation": self.generation.to_json(),
            "test_seed": self.test_seed,
            "train_fault_counts": self.train_fault_counts,
            "sysid": self.sysid.to_json(),
            "sysid_signals": self.sysid_signals,
            "filter": dict(self.filter.__dict__),
            "isolation": dict(self.isolation.__dict__),
            "out_dir": self.out_dir,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ExperimentConfig":
        known = {"generation", "test_seed", "train_fault_counts", "sysid", "sysid_signals", "filter", "isolation", "out_dir"}
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(
                generation=GenerationConfig.from_json(obj.get("generation", {})),
                test_seed=int(obj.get("test_seed", 1)),
                train_fault_counts=obj.get("train_fault_counts", dict(TRAIN_FAULT_COUNTS)),
                sysid=SysidConfig.from_json(obj.get("sysid", {})),
                sysid_signals=int(obj.get("sysid_signals", 10)),
                filter=FilterConfig(**obj.get("filter", {})),
                isolation=IsolationConfig(**obj.get("isolation", {})),
                out_dir=obj.get("out_dir"),
            )
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def digest(self) -> str:
        obj = self.to_json()
        obj.pop("out_dir")
        return config_digest(obj)


def _training_subset(labels: np.ndarray, frac: float, seed: int) -> np.ndarray:
    """Indices of a seeded random fraction of the faulty training signals."""
    faulty = np.flatnonzero(labels != HEALTHY)
    if frac >= 1:
        return faulty
    k = math.ceil(frac * faulty.size)
    rng = np.random.default_rng([seed, round(frac * 1e6)])
    return np.sort(rng.permutation(faulty)[:k])


def isolation_cell(X_train, y_train, X_query, method: str, k: int = 1) -> list:
    """Predicted fault labels for the query rows."""
    if method == "LR":
        T = train_templates({lab: [Signal(x) for x in X_train[y_train == lab]]
                             for lab in LABELS if lab != HEALTHY and np.any(y_train == lab)})
        return [T.class_order[_argmax_lowest(solve_simplex_ls(T.R, x))] for x in X_query]
    train = [(Signal(x), lab) for x, lab in zip(X_train, y_train)]
    return [res.winner for res in isolate_knn_batch(train, [Signal(x) for x in X_query], k)]


def run_experiment(cfg: ExperimentConfig) -> dict:
    """Run every stage; artifacts go to ``cfg.out_dir`` when set."""
    out = Path(cfg.out_dir) if cfg.out_dir else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    def stage(name, fn):
        try:
            return fn()
        except Exception as exc:  # surfaced with the stage name
            raise StageError(name, exc) from exc

    gen_test = GenerationConfig.from_json({**cfg.generation.to_json(), "seed": cfg.test_seed})
    gen_train = cfg.generation
    if cfg.train_fault_counts is not None:
        counts = {HEALTHY: gen_train.counts.get(HEALTHY, 0), **cfg.train_fault_counts}
        gen_train = stage("generate", lambda: GenerationConfig.from_json({**gen_train.to_json(), "counts": counts}))
    train = stage("generate", lambda: generate_dataset(gen_train))
    test = stage("generate", lambda: generate_dataset(gen_test))
    if out is not None:
        train.to_csv(out / "train.csv")
        test.to_csv(out / "test.csv")

    ltr = np.array(train.labels)
    lte = np.array(test.labels)
    healthy_train = [s for s, lab in train.entries if lab == HEALTHY]
    if not healthy_train:
        raise StageError("identify", ValueError("training set has no healthy signals"))

    model = stage("identify", lambda: identify(healthy_train[:cfg.sysid_signals], cfg.sysid))
    if out is not None:
        model.save(out / "model.json")

    fc = cfg.filter
    window = gen_train.n * gen_train.dt
    filt: ResidualFilter = stage("design", lambda: design_filter(
        model, dt=gen_train.dt, window=window, d_N=fc.d_N, n_o=fc.n_o,
        convention=fc.convention, hold_order=fc.hold_order))
    filter_json = filt.to_json()
    if out is not None:
        (out / "filter.json").write_text(json.dumps(filter_json, indent=2, sort_keys=True))

    def residuals(ds: LabeledDataset) -> np.ndarray:
        return compute_residuals(filt, ds.signals) if len(ds) else np.zeros((0, gen_train.n))

    Rtr = stage("detect", lambda: residuals(train))
    Rte = stage("detect", lambda: residuals(test))
    if out is not None:
        write_signals_csv(out / "residuals_test.csv",
                          [(Signal(r, gen_train.t_a, gen_train.dt), lab) for r, lab in zip(Rte, lte)])

    def statistic(R):
        if fc.statistic == "energy":
            return np.sum(R ** 2, axis=1) * gen_train.dt
        return np.max(np.abs(R), axis=1)

    s_tr, s_te = statistic(Rtr), statistic(Rte)
    threshold = fc.mu * float(np.max(s_tr[ltr == HEALTHY]))
    flagged = s_te > threshold
    det = evaluate([(t, "Faulty" if f else HEALTHY) for t, f in zip(lte, flagged)], "detection")
    det["threshold"] = threshold
    det["per_class_flagged"] = {lab: float(np.mean(flagged[lte == lab])) for lab in LABELS if np.any(lte == lab)}

    report = {
        "provenance": {
            "version": __version__,
            "config_digest": cfg.digest(),
            "filter_digest": config_digest(filter_json),
            "train_seed": int(gen_train.seed),
            "test_seed": int(cfg.test_seed),
        },
        "identification": {
            "coefficients": dict(zip(("a31", "a33", "a41", "a44"), map(float, model.coefficients))),
            "x_a_hat": model.x_a_hat.tolist(),
            "fit_residual": model.fit_residual,
            "signals": min(cfg.sysid_signals, len(healthy_train)),
        },
        "filter": {"d_N": fc.d_N, "n_o": fc.n_o, "omega_r": filt.polys.omega_r,
                   "null_dim": filt.polys.null_dim, "mu": fc.mu, "statistic": fc.statistic},
        "detection": det,
    }

    query = np.flatnonzero(flagged & (lte != HEALTHY))
    if not np.any(ltr != HEALTHY) or query.size == 0:
        report["isolation"] = {"skipped": True, "reason": "no faulty signals to isolate"}
    else:
        streams = {"r": (Rtr, Rte), "y": (train.matrix(), test.matrix())}
        if out is not None:
            faulty = ltr != HEALTHY
            train_templates({lab: [Signal(r, gen_train.t_a, gen_train.dt) for r in Rtr[ltr == lab]]
                             for lab in set(ltr[faulty])}).to_csv(out / "templates.csv")
        cells = []
        ic = cfg.isolation
        for frac in ic.fractions:
            sub = _training_subset(ltr, frac, ic.subsample_seed)
            for stream in ic.streams:
                Xtr, Xte = streams[stream]
                for method in ic.methods:
                    preds = stage("isolate", lambda: isolation_cell(Xtr[sub], ltr[sub], Xte[query], method, ic.k))
                    metrics = evaluate(list(zip(lte[query], preds)), "isolation")
                    cells.append({"fraction": frac, "training_size": int(sub.size), "stream": stream,
                                  "method": method, **metrics})
        report["isolation"] = {
            "skipped": False,
            "isolated": int(query.size),
            "false_alarms": int(np.sum(flagged & (lte == HEALTHY))),
            "cells": cells,
        }

    if out is not None:
        write_report(report, out / "report.json")
    return report


def report_bytes(report: dict) -> bytes:
    return (json.dumps(report, indent=2, sort_keys=True) + "\n").encode()


def write_report(report: dict, path) -> None:
    Path(path).write_bytes(report_bytes(report))


# --------------------------------------------------------------------------
# Plot data
# --------------------------------------------------------------------------

PLOT_KINDS = ("signals", "residuals", "spectra")


def class_spectra(entries) -> dict:
    """Mean one-sided magnitude spectrum per class: label -> (freq [Hz], magnitude)."""
    out = {}
    groups: dict = {}
    for s, lab in entries:
        groups.setdefault(lab, []).append(s)
    for lab in sorted(groups, key=_class_key):
        sig = groups[lab]
        Y = np.vstack([s.samples for s in sig])
        mag = np.abs(np.fft.rfft(Y - Y.mean(axis=1, keepdims=True), axis=1)).mean(axis=0)
        out[lab] = (np.fft.rfftfreq(Y.shape[1], sig[0].dt), mag)
    return out


def _class_key(label):
    return LABELS.index(label) if label in LABELS else len(LABELS)


def emit_plot_data(kind: str, entries, out_path, svg: bool = False) -> Path:
    """Write per-class mean series (or spectra) as long-format CSV.

    ``entries`` is a list of (Signal, label) pairs; for ``residuals`` pass
    residual signals.  With ``svg`` one SVG per class is written next to the
    CSV (requires matplotlib).
    """
    if kind not in PLOT_KINDS:
        raise ValueError(f"unknown plot kind {kind!r}; expected one of {PLOT_KINDS}")
    entries = list(entries)
    out_path = Path(out_path)
    xname, yname = ("f", "magnitude") if kind == "spectra" else ("t", "value")
    series = {}
    if entries:
        if kind == "spectra":
            series = class_spectra(entries)
        else:
            groups: dict = {}
            for s, lab in entries:
                groups.setdefault(lab, []).append(s)
            for lab in sorted(groups, key=_class_key):
                sig = groups[lab]
                series[lab] = (sig[0].times, np.mean([s.samples for s in sig], axis=0))
    with open(out_path, "w") as fh:
        fh.write(f"class,{xname},{yname}\n")
        for lab, (x, y) in series.items():
            for a, b in zip(x, y):
                fh.write(f"{lab},{float(a)!r},{float(b)!r}\n")
    if svg and series:
        _write_svgs(series, out_path, xname, yname)
    return out_path


def _write_svgs(series, out_path: Path, xname, yname):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    for lab, (x, y) in series.items():
        fig, ax = plt.subplots(figsize=(6, 3))
        ax.plot(x, y, lw=1)
        ax.set_title(lab)
        ax.set_xlabel(xname)
        ax.set_ylabel(yname)
        fig.tight_layout()
        fig.savefig(out_path.with_name(f"{out_path.stem}_{lab}.svg"), format="svg",
                    metadata={"Date": None})
        plt.close(fig)
