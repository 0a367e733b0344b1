"""
Fault isolation from residual (or raw output) signals.

Two classifiers share one result type:

* LR: fit the signal as a convex combination of per-class mean templates,
  min ||R phi - r||_2  s.t.  sum(phi) = 1, phi >= 0,
  and report the class with the largest weight.
* KNN: majority vote among the k nearest training signals (Euclidean).
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist

from .model import LABELS
from .simulate import Signal

log = logging.getLogger(__name__)

TIE_RTOL = 1e-12


class TrainingError(ValueError):
    pass


class SolverError(RuntimeError):
    def __init__(self, message, phi=None):
        super().__init__(message)
        self.phi = phi


def _label_order(labels) -> list:
    labels = set(labels)
    known = [lab for lab in LABELS if lab in labels]
    return known + sorted(labels - set(LABELS))


# --------------------------------------------------------------------------
# Templates
# --------------------------------------------------------------------------

@dataclass
class TemplateMatrix:
    R: np.ndarray          # n_samples x n_f, column i = mean signal of class_order[i]
    class_order: list
    grid: tuple            # (t_a, dt, n)

    def __post_init__(self):
        if len(set(self.class_order)) != len(self.class_order):
            raise TrainingError("duplicate class in template order")
        if self.R.shape[1] != len(self.class_order):
            raise TrainingError("template columns do not match class order")
        if not np.all(np.isfinite(self.R)):
            raise TrainingError("non-finite template entries")

    def to_csv(self, path) -> None:
        path = Path(path)
        with open(path, "w") as fh:
            fh.write(",".join(self.class_order) + "\n")
            for row in self.R:
                fh.write(",".join(repr(float(v)) for v in row) + "\n")
        meta = {"class_order": self.class_order, "t_a": self.grid[0], "dt": self.grid[1], "n": self.grid[2]}
        path.with_suffix(".json").write_text(json.dumps(meta, indent=2))

    @classmethod
    def from_csv(cls, path) -> "TemplateMatrix":
        path = Path(path)
        with open(path) as fh:
            header = fh.readline().strip().split(",")
            R = np.array([[float(v) for v in line.split(",")] for line in fh if line.strip()])
        meta_path = path.with_suffix(".json")
        if meta_path.exists():
            meta = json.loads(meta_path.read_text())
            grid = (meta["t_a"], meta["dt"], meta["n"])
        else:
            grid = (0.0, 1.0, R.shape[0])
        return cls(R.reshape(-1, len(header)), header, grid)


def train_templates(residuals_by_class: dict) -> TemplateMatrix:
    """Average each class's signals sample by sample."""
    if not residuals_by_class:
        raise TrainingError("no classes to train on")
    order = _label_order(residuals_by_class)
    ref = None
    columns = []
    for label in order:
        signals = residuals_by_class[label]
        if not signals:
            raise TrainingError(f"class {label} has no training signals")
        for s in signals:
            if ref is None:
                ref = s
            elif not s.same_grid(ref):
                raise TrainingError(f"class {label}: signal grid differs from the first training signal")
        columns.append(np.mean([s.samples for s in signals], axis=0))
    return TemplateMatrix(np.column_stack(columns), order, (ref.t_a, ref.dt, len(ref)))


# --------------------------------------------------------------------------
# Simplex-constrained least squares
# --------------------------------------------------------------------------

def _sum_zero_basis(m: int) -> np.ndarray:
    """Orthonormal basis (m x m-1) of {p : sum(p) = 0}."""
    Q, _ = np.linalg.qr(np.column_stack([np.ones(m), np.eye(m)[:, :m - 1]]))
    return Q[:, 1:]


def kkt_residual(R: np.ndarray, r: np.ndarray, phi: np.ndarray) -> float:
    """Stationarity violation of phi for 0.5||R phi - r||^2 on the simplex.

    With g the gradient and nu the equality multiplier, free coordinates need
    g_i + nu = 0 and bound coordinates need g_i + nu >= 0.
    """
    g = R.T @ (R @ phi - r)
    free = phi > 0
    nu = -np.mean(g[free])
    lam = g + nu
    viol = np.abs(lam[free])
    if np.any(~free):
        viol = np.concatenate([viol, np.maximum(-lam[~free], 0.0)])
    return float(np.max(viol))


def kkt_scale(R: np.ndarray, r: np.ndarray) -> float:
    return max(float(np.linalg.norm(R.T @ r)), float(np.linalg.norm(R, 2) ** 2), np.finfo(float).tiny)


def solve_simplex_ls(R, r, max_iter: int | None = None, rtol: float = 1e-10) -> np.ndarray:
    """Primal active-set method for min ||R phi - r|| over the probability simplex.

    Starts at the best vertex; each iteration either moves to the minimizer
    on the current face (clipped by the ratio test) or frees the bound
    coordinate with the most negative multiplier.  Degenerate faces are
    handled with the minimum-norm step.
    """
    R = np.asarray(R, dtype=float)
    r = np.asarray(r, dtype=float).ravel()
    n, m = R.shape
    if r.size != n:
        raise ValueError("signal length does not match template rows")
    if m == 1:
        return np.ones(1)
    if max_iter is None:
        max_iter = 50 * m + 100
    tol = rtol * kkt_scale(R, r)

    phi = np.zeros(m)
    phi[int(np.argmin(np.linalg.norm(R - r[:, None], axis=0)))] = 1.0
    free = phi > 0
    for _ in range(max_iter):
        F = np.flatnonzero(free)
        if F.size > 1:
            Z = _sum_zero_basis(F.size)
            p = Z @ np.linalg.lstsq(R[:, F] @ Z, r - R @ phi, rcond=None)[0]
            alpha, block = 1.0, None
            for i, pi in zip(F, p):
                if pi < 0 and -phi[i] / pi < alpha:
                    alpha, block = -phi[i] / pi, i
            phi[F] += alpha * p
            phi[phi < 0] = 0.0
            if block is not None:
                phi[block] = 0.0
                free[block] = False
                continue
        # at the minimizer of the current face: check the bound multipliers
        g = R.T @ (R @ phi - r)
        lam = g - np.mean(g[F])
        lam[F] = np.inf
        j = int(np.argmin(lam))
        if lam[j] >= -tol:
            return _finalize(phi)
        free[j] = True
    raise SolverError("simplex least squares did not converge", _finalize(phi))


def _finalize(phi: np.ndarray) -> np.ndarray:
    phi = np.maximum(phi, 0.0)
    return phi / phi.sum()


def simplex_objective(R, r, phi) -> float:
    return float(np.sum((np.asarray(R) @ phi - np.asarray(r)) ** 2))


# --------------------------------------------------------------------------
# Classifiers
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class IsolationResult:
    phi: np.ndarray
    winner: str
    method: str
    class_order: tuple = ()


def _argmax_lowest(values: np.ndarray) -> int:
    top = np.max(values)
    return int(np.flatnonzero(values >= top - TIE_RTOL * max(abs(top), 1.0))[0])


def isolate_lr(T: TemplateMatrix, r: Signal) -> IsolationResult:
    if len(r) != T.R.shape[0]:
        raise ValueError("signal is not on the template grid")
    phi = solve_simplex_ls(T.R, r.samples)
    return IsolationResult(phi, T.class_order[_argmax_lowest(phi)], "LR", tuple(T.class_order))


def _knn_vote(dist: np.ndarray, labels: np.ndarray, order: list, k: int) -> tuple[np.ndarray, str]:
    nearest = np.lexsort((np.arange(dist.size), dist))[:k]
    votes = np.zeros(len(order))
    total = np.zeros(len(order))
    index = {lab: i for i, lab in enumerate(order)}
    for j in nearest:
        c = index[labels[j]]
        votes[c] += 1
        total[c] += dist[j]
    best = np.flatnonzero(votes == votes.max())
    # fewer votes tie-break: smaller summed distance, then lowest class index
    winner = best[np.lexsort((best, total[best]))[0]]
    return votes / k, order[winner]


def isolate_knn(train, r: Signal, k: int = 1) -> IsolationResult:
    """``train`` is a list of (Signal, label) pairs."""
    return isolate_knn_batch(train, [r], k)[0]


def isolate_knn_batch(train, queries, k: int = 1) -> list:
    if not train:
        raise TrainingError("empty KNN training set")
    if not 1 <= k <= len(train):
        raise ValueError(f"k must lie in [1, {len(train)}]")
    X = np.vstack([s.samples for s, _ in train])
    labels = np.array([lab for _, lab in train])
    order = _label_order(labels)
    Q = np.vstack([s.samples for s in queries])
    D = cdist(Q, X)
    out = []
    for row in D:
        phi, winner = _knn_vote(row, labels, order, k)
        out.append(IsolationResult(phi, winner, "KNN", tuple(order)))
    return out


# --------------------------------------------------------------------------
# Metrics
# --------------------------------------------------------------------------

HEALTHY = "Healthy"


def evaluate(predictions, mode: str = "isolation") -> dict:
    """Detection (TDR/FAR) or isolation (confusion, per-class P/R/F1, HMA) metrics.

    ``predictions`` is a sequence of (truth, predicted) label pairs.  In
    detection mode any label other than "Healthy" counts as faulty.  HMA is
    the macro-averaged F1 over classes present in the ground truth.
    """
    predictions = list(predictions)
    if not predictions:
        raise ValueError("no predictions to evaluate")
    if mode == "detection":
        return _detection_metrics(predictions)
    if mode == "isolation":
        return _isolation_metrics(predictions)
    raise ValueError(f"unknown mode {mode!r}")


def _detection_metrics(predictions) -> dict:
    hh = hf = fh = ff = 0
    for truth, pred in predictions:
        t_faulty = str(truth) != HEALTHY
        p_faulty = str(pred) != HEALTHY
        if t_faulty:
            ff += p_faulty
            fh += not p_faulty
        else:
            hf += p_faulty
            hh += not p_faulty
    total = hh + hf + fh + ff
    n_healthy = hh + hf
    return {
        "confusion": [[hh, hf], [fh, ff]],
        "TDR": (hh + ff) / total,
        "FAR": hf / n_healthy if n_healthy else 0.0,
        "n_healthy": n_healthy,
        "n_faulty": fh + ff,
    }


def _isolation_metrics(predictions) -> dict:
    truths = [str(t) for t, _ in predictions]
    preds = [str(p) for _, p in predictions]
    order = _label_order(set(truths) | set(preds))
    index = {lab: i for i, lab in enumerate(order)}
    conf = np.zeros((len(order), len(order)), dtype=int)
    for t, p in zip(truths, preds):
        conf[index[t], index[p]] += 1
    per_class = {}
    f1s = []
    for lab in order:
        i = index[lab]
        tp = conf[i, i]
        support = conf[i].sum()
        predicted = conf[:, i].sum()
        precision = tp / predicted if predicted else 0.0
        recall = tp / support if support else 0.0
        f1 = 2 * tp / (support + predicted) if support + predicted else 0.0
        per_class[lab] = {"precision": float(precision), "recall": float(recall),
                          "f1": float(f1), "support": int(support)}
        if support:
            f1s.append(f1)
        else:
            warnings.warn(f"class {lab} absent from ground truth; excluded from HMA", RuntimeWarning)
    return {
        "class_order": order,
        "confusion": conf.tolist(),
        "per_class": per_class,
        "HMA": float(np.mean(f1s)) if f1s else 0.0,
        "accuracy": float(np.trace(conf) / conf.sum()),
    }
