"""Command-line entry point: ``inkwell <command> ...``.

Exit codes: 0 success, 2 configuration error, 3 stage failure.  On failure a
single JSON line ``{"stage": ..., "error": ...}`` goes to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .experiment import (PLOT_KINDS, ConfigError, ExperimentConfig, StageError, emit_plot_data,
                         run_experiment, write_report)
from .fdfilter import ResidualFilter, compute_residuals, design_filter
from .isolation import TemplateMatrix, evaluate, isolate_knn_batch, isolate_lr, train_templates
from .model import LABELS
from .simulate import GenerationConfig, Signal, generate_dataset, read_signals_csv, write_signals_csv
from .sysid import IdentifiedModel, SysidConfig, identify

HEALTHY = LABELS[0]


class _Failure(Exception):
    def __init__(self, stage, message, code):
        super().__init__(message)
        self.stage, self.code = stage, code


def _load_json(path):
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise _Failure("config", f"cannot read {path}: {exc}", 2)


def _read_entries(path, stage):
    try:
        return read_signals_csv(path)
    except (OSError, ValueError) as exc:
        raise _Failure(stage, f"cannot read {path}: {exc}", 2)


def _dump(obj, path):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_gen(args):
    obj = _load_json(args.config) if args.config else {}
    for key in ("seed", "noise_rel", "xa_jitter", "delta_jitter"):
        value = getattr(args, key)
        if value is not None:
            obj[key] = value
    try:
        cfg = GenerationConfig.from_json(obj)
    except (TypeError, ValueError) as exc:
        raise _Failure("config", str(exc), 2)
    ds = generate_dataset(cfg)
    ds.to_csv(args.out)
    print(f"wrote {len(ds)} signals to {args.out}")


def cmd_identify(args):
    entries = _read_entries(args.data, "identify")
    healthy = [s for s, lab in entries if lab == HEALTHY][:args.signals]
    if not healthy:
        raise _Failure("identify", "no healthy signals in the data set", 3)
    obj = _load_json(args.config) if args.config else {}
    if args.loss:
        obj["loss"] = args.loss
    try:
        cfg = SysidConfig.from_json(obj)
    except (TypeError, ValueError) as exc:
        raise _Failure("config", str(exc), 2)
    model = identify(healthy, cfg)
    model.save(args.out)
    print(f"identified from {len(healthy)} signals, fit {model.fit_residual:.6g} -> {args.out}")


def cmd_fd_design(args):
    model = IdentifiedModel.from_json(_load_json(args.model))
    grid = model.grid
    dt = args.dt or grid.get("dt")
    n = args.n or grid.get("n")
    if not dt or not n:
        raise _Failure("config", "sample period and length unknown; pass --dt and --n", 2)
    f = design_filter(model, dt=dt, window=n * dt, d_N=args.dn, n_o=args.osc,
                      convention=args.convention, hold_order=args.hold_order)
    _dump(f.to_json(), args.out)
    print(f"filter order {f.order}, omega_r {f.polys.omega_r:.6g} rad/s -> {args.out}")


def _statistic(R, dt, kind):
    return np.sum(R ** 2, axis=1) * dt if kind == "energy" else np.max(np.abs(R), axis=1)


def cmd_fd_run(args):
    f = ResidualFilter.from_json(_load_json(args.filter))
    entries = _read_entries(args.data, "detect")
    if not entries:
        raise _Failure("detect", "empty data set", 3)
    R = compute_residuals(f, [s for s, _ in entries])
    labels = [lab for _, lab in entries]
    ref = entries[0][0]
    write_signals_csv(args.out, [(Signal(r, ref.t_a, ref.dt), lab) for r, lab in zip(R, labels)])

    if args.threshold is not None:
        threshold = args.threshold
    else:
        calib = _read_entries(args.calibration, "detect") if args.calibration else entries
        healthy = [s for s, lab in calib if lab == HEALTHY]
        if not healthy:
            raise _Failure("detect", "no healthy signals to calibrate the threshold", 3)
        threshold = args.mu * float(np.max(_statistic(compute_residuals(f, healthy), f.dt, args.statistic)))
    stats = _statistic(R, f.dt, args.statistic)
    flagged = stats > threshold
    det = evaluate([(t, "Faulty" if fl else HEALTHY) for t, fl in zip(labels, flagged)], "detection")
    det.update(threshold=threshold, flagged=[int(i) for i in np.flatnonzero(flagged)])
    if args.report:
        _dump(det, args.report)
    print(f"TDR {det['TDR']:.4f}  FAR {det['FAR']:.4f}  threshold {threshold:.6g}")


def cmd_fi_train(args):
    entries = _read_entries(args.residuals, "train")
    by_class = {}
    for s, lab in entries:
        if lab != HEALTHY:
            by_class.setdefault(lab, []).append(s)
    T = train_templates(by_class)
    T.to_csv(args.out)
    print(f"templates for {', '.join(T.class_order)} -> {args.out}")


def cmd_fi_run(args):
    entries = _read_entries(args.data, "isolate")
    det = _load_json(args.detection) if args.detection else None
    if det is not None and "flagged" in det:
        chosen = [entries[i] for i in det["flagged"]]
    else:
        chosen = entries
    queries = [(s, lab) for s, lab in chosen if lab != HEALTHY]
    if not queries:
        raise _Failure("isolate", "no faulty signals to isolate", 3)
    if args.method == "lr":
        if not args.templates:
            raise _Failure("config", "--templates is required for the lr method", 2)
        T = TemplateMatrix.from_csv(args.templates)
        preds = [isolate_lr(T, s).winner for s, _ in queries]
    else:
        if not args.train:
            raise _Failure("config", "--train is required for the knn method", 2)
        train = [(s, lab) for s, lab in _read_entries(args.train, "isolate") if lab != HEALTHY]
        preds = [res.winner for res in isolate_knn_batch(train, [s for s, _ in queries], args.k)]
    report = evaluate([(lab, p) for (_, lab), p in zip(queries, preds)], "isolation")
    report["method"] = args.method.upper()
    if det is not None:
        report.update({key: det[key] for key in ("TDR", "FAR") if key in det})
    if args.report:
        _dump(report, args.report)
    print(f"HMA {report['HMA']:.4f} over {len(queries)} signals")


def cmd_experiment(args):
    obj = _load_json(args.config) if args.config else {}
    gen = obj.setdefault("generation", {})
    if args.seed is not None:
        gen["seed"] = args.seed
    if args.test_seed is not None:
        obj["test_seed"] = args.test_seed
    filt = obj.setdefault("filter", {})
    for key, flag in (("mu", args.mu), ("d_N", args.dn), ("n_o", args.osc)):
        if flag is not None:
            filt[key] = flag
    if args.k is not None:
        obj.setdefault("isolation", {})["k"] = args.k
    if args.out_dir is not None:
        obj["out_dir"] = args.out_dir
    cfg = ExperimentConfig.from_json(obj)
    report = run_experiment(cfg)
    if args.report:
        write_report(report, args.report)
    det = report["detection"]
    print(f"TDR {det['TDR']:.4f}  FAR {det['FAR']:.4f}")
    iso = report["isolation"]
    for cell in iso.get("cells", []):
        print(f"size {cell['training_size']:5d}  {cell['stream']}  {cell['method']:3s}  HMA {cell['HMA']:.4f}")


def cmd_plot(args):
    entries = _read_entries(args.data, "plot") if Path(args.data).stat().st_size else []
    path = emit_plot_data(args.kind, entries, args.out, svg=args.svg)
    print(f"wrote {path}")


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="inkwell", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a labeled data set")
    g.add_argument("--config", help="generation config JSON")
    g.add_argument("--seed", type=int)
    g.add_argument("--noise-rel", dest="noise_rel", type=float)
    g.add_argument("--xa-jitter", dest="xa_jitter", type=float)
    g.add_argument("--delta-jitter", dest="delta_jitter", type=float)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen, stage="generate")

    i = sub.add_parser("identify", help="identify the healthy model")
    i.add_argument("--data", required=True)
    i.add_argument("--signals", type=int, default=10, help="number of healthy signals to use")
    i.add_argument("--loss", choices=["l1", "l2"])
    i.add_argument("--config", help="sysid config JSON")
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_identify, stage="identify")

    fd = sub.add_parser("fd", help="fault detection filter")
    fds = fd.add_subparsers(dest="fd_command", required=True)
    d = fds.add_parser("design")
    d.add_argument("--model", required=True)
    d.add_argument("--dn", type=int, default=5)
    d.add_argument("--osc", type=float, default=8)
    d.add_argument("--convention", choices=["2pi", "literal"], default="2pi")
    d.add_argument("--hold-order", dest="hold_order", type=int, default=5)
    d.add_argument("--dt", type=float)
    d.add_argument("--n", type=int)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_fd_design, stage="design")
    r = fds.add_parser("run")
    r.add_argument("--filter", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--mu", type=float, default=1.0)
    r.add_argument("--calibration", help="data set whose healthy entries set the threshold")
    r.add_argument("--threshold", type=float, help="use this threshold instead of calibrating")
    r.add_argument("--statistic", choices=["energy", "max"], default="energy")
    r.add_argument("--out", required=True)
    r.add_argument("--report")
    r.set_defaults(func=cmd_fd_run, stage="detect")

    fi = sub.add_parser("fi", help="fault isolation")
    fis = fi.add_subparsers(dest="fi_command", required=True)
    t = fis.add_parser("train")
    t.add_argument("--residuals", required=True)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_fi_train, stage="train")
    u = fis.add_parser("run")
    u.add_argument("--templates")
    u.add_argument("--train", help="labeled training residuals for knn")
    u.add_argument("--method", choices=["lr", "knn"], default="lr")
    u.add_argument("--k", type=int, default=1)
    u.add_argument("--data", required=True)
    u.add_argument("--detection", help="fd run report; only its flagged signals are isolated")
    u.add_argument("--report")
    u.set_defaults(func=cmd_fi_run, stage="isolate")

    e = sub.add_parser("experiment", help="run the full pipeline")
    e.add_argument("--config")
    e.add_argument("--seed", type=int)
    e.add_argument("--test-seed", dest="test_seed", type=int)
    e.add_argument("--mu", type=float)
    e.add_argument("--dn", type=int)
    e.add_argument("--osc", type=float)
    e.add_argument("--k", type=int)
    e.add_argument("--out-dir", dest="out_dir")
    e.add_argument("--report")
    e.set_defaults(func=cmd_experiment, stage="experiment")

    pl = sub.add_parser("plot", help="emit plot data")
    pl.add_argument("--kind", choices=PLOT_KINDS, required=True)
    pl.add_argument("--data", required=True)
    pl.add_argument("--out", required=True)
    pl.add_argument("--svg", action="store_true")
    pl.set_defaults(func=cmd_plot, stage="plot")
    return p


def _fail(stage, message, code):
    sys.stderr.write(json.dumps({"stage": stage, "error": message}) + "\n")
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        args.func(args)
    except _Failure as exc:
        return _fail(exc.stage, str(exc), exc.code)
    except ConfigError as exc:
        return _fail("config", str(exc), 2)
    except StageError as exc:
        return _fail(exc.stage, str(exc.cause), 3)
    except Exception as exc:
        return _fail(args.stage, f"{type(exc).__name__}: {exc}", 3)
    return 0


if __name__ == "__main__":
    sys.exit(main())
