"""Grey-box identification of the healthy channel model from sensing signals."""

from __future__ import annotations

import itertools
import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm
from scipy.optimize import least_squares, minimize

from .model import NOMINAL_C, SystemMatrices, check_structure, structured_A
from .simulate import Signal

log = logging.getLogger(__name__)


class IdentificationError(RuntimeError):
    def __init__(self, message, model=None):
        super().__init__(message)
        self.model = model


@dataclass
class IdentifiedModel:
    A: np.ndarray
    C: np.ndarray
    x_a_hat: np.ndarray
    fit_residual: float
    grid: dict = field(default_factory=dict)
    loss: str = "l1"

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=float).reshape(4, 4)
        self.C = np.asarray(self.C, dtype=float).reshape(1, 4)
        self.x_a_hat = np.asarray(self.x_a_hat, dtype=float).ravel()
        if not check_structure(self.A, self.C):
            raise ValueError("identified A/C violate the channel structure")

    @property
    def coefficients(self) -> tuple:
        return self.A[2, 0], self.A[2, 2], self.A[3, 0], self.A[3, 3]

    @property
    def system(self) -> SystemMatrices:
        return SystemMatrices(self.A, np.zeros((4, 1)), self.C)

    def to_json(self) -> dict:
        a31, a33, a41, a44 = self.coefficients
        return {
            "coefficients": {"a31": a31, "a33": a33, "a41": a41, "a44": a44},
            "A": self.A.tolist(),
            "C": self.C.tolist(),
            "x_a_hat": self.x_a_hat.tolist(),
            "fit_residual": self.fit_residual,
            "loss": self.loss,
            "grid": self.grid,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "IdentifiedModel":
        return cls(np.array(obj["A"]), np.array(obj["C"]), np.array(obj["x_a_hat"]),
                   float(obj["fit_residual"]), obj.get("grid", {}), obj.get("loss", "l1"))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path) -> "IdentifiedModel":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


@dataclass
class SysidConfig:
    loss: str = "l1"                   # "l1" (absolute error) or "l2"
    stiffness_decades: tuple = (10.0, 13.0)   # |a31|, |a41|
    damping_decades: tuple = (4.0, 6.0)       # |a33|, |a44|
    stiffness_points: int = 4
    damping_points: int = 3
    n_refine: int = 4
    max_iter: int = 20000
    tol: float = 1e-12

    def __post_init__(self):
        if self.loss not in ("l1", "l2"):
            raise ValueError(f"loss must be 'l1' or 'l2', got {self.loss!r}")
        if self.n_refine < 1 or self.stiffness_points < 1 or self.damping_points < 1:
            raise ValueError("multi-start sizes must be positive")

    def to_json(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}

    @classmethod
    def from_json(cls, obj: dict) -> "SysidConfig":
        obj = dict(obj)
        for key in ("stiffness_decades", "damping_decades"):
            if key in obj:
                obj[key] = tuple(obj[key])
        return cls(**obj)


def _A_from_log(theta: np.ndarray) -> np.ndarray:
    a31, a33, a41, a44 = -np.exp(theta)
    return structured_A(a31, a33, a41, a44)


def observability_rows(A: np.ndarray, C: np.ndarray, dt: float, n: int) -> np.ndarray:
    """Rows C expm(A k dt), k = 0..n-1."""
    O = np.empty((n, 4))
    O[0] = np.asarray(C, dtype=float).ravel()
    step = expm(A * dt)
    filled = 1
    while filled < n:
        # rows [filled, 2 filled) are rows [0, filled) advanced by filled samples
        take = min(filled, n - filled)
        O[filled:filled + take] = O[:take] @ step
        filled += take
        step = step @ step
    return O


def _stack(signals) -> tuple[np.ndarray, float, float]:
    if not signals:
        raise ValueError("identification needs at least one signal")
    ref = signals[0]
    for s in signals[1:]:
        if not s.same_grid(ref):
            raise ValueError("identification signals must share one grid")
    return np.vstack([s.samples for s in signals]), ref.dt, ref.t_a


class _Problem:
    def __init__(self, Y: np.ndarray, dt: float):
        self.Y = Y
        self.ybar = Y.mean(axis=0)
        self.dt = dt
        self.n = Y.shape[1]
        self.C = NOMINAL_C

    def rows(self, theta):
        return observability_rows(_A_from_log(theta), self.C, self.dt, self.n)

    def projected_state(self, O):
        # the (1, -1, 0, 0) direction is unobservable; split the volumes evenly
        x = np.linalg.lstsq(O, self.ybar, rcond=None)[0]
        x[:2] = 0.5 * (x[0] + x[1])
        return x

    def vp_residual(self, theta):
        O = self.rows(theta)
        return (self.Y - O @ self.projected_state(O)).ravel()

    def l1(self, params):
        O = self.rows(params[:4])
        S, q_r, q_n = params[4:]
        x = np.array([S / 2, S / 2, q_r, q_n])
        return float(np.sum(np.abs(self.Y - O @ x)) * self.dt)

    def l2(self, theta):
        return float(np.sum(self.vp_residual(theta) ** 2) * self.dt)


def _starts(cfg: SysidConfig) -> list:
    stiff = np.log(np.logspace(*cfg.stiffness_decades, cfg.stiffness_points))
    damp = np.log(np.logspace(*cfg.damping_decades, cfg.damping_points))
    return [np.array(t) for t in itertools.product(stiff, damp, stiff, damp)]


def identify(signals, cfg: SysidConfig | None = None) -> IdentifiedModel:
    """Fit (a31, a33, a41, a44, x_a_hat) to healthy signals with c fixed to 1.

    A shared acquisition state is estimated for all signals.  The state is
    eliminated by linear least squares while the coefficients are searched
    (multi-start, then trust-region refinement); the absolute-error loss is
    then polished with Nelder-Mead over coefficients and state jointly.
    """
    cfg = cfg or SysidConfig()
    Y, dt, t_a = _stack(list(signals))
    grid = {"t_a": t_a, "dt": dt, "n": int(Y.shape[1])}
    if not np.any(Y):
        k, r = np.mean(cfg.stiffness_decades), np.mean(cfg.damping_decades)
        centre = np.log(10.0) * np.array([k, r, k, r])
        return IdentifiedModel(_A_from_log(centre), NOMINAL_C, np.zeros(4), 0.0, grid, cfg.loss)

    prob = _Problem(Y, dt)
    starts = _starts(cfg)
    costs = [prob.l2(th) for th in starts]
    order = np.argsort(costs, kind="stable")[:cfg.n_refine]

    # generous box in log space keeps the search away from overflow
    lo = np.log([1e6, 1e1, 1e6, 1e1])
    hi = np.log([1e16, 1e9, 1e16, 1e9])
    exact = 1e-20 * float(np.sum(Y ** 2)) * dt
    best = None
    for i in order:
        x0 = np.clip(starts[i], lo, hi)
        res = least_squares(prob.vp_residual, x0, method="trf", bounds=(lo, hi),
                            xtol=cfg.tol, ftol=cfg.tol, gtol=cfg.tol, max_nfev=cfg.max_iter)
        cost = prob.l2(res.x)
        log.debug("start %d: status %d cost %.3e", i, res.status, cost)
        if best is None or cost < best[1]:
            best = (res, cost)
        if cost <= exact:
            break
    res, _ = best
    theta = res.x
    x_hat = prob.projected_state(prob.rows(theta))

    def build(theta, x_hat, fit):
        return IdentifiedModel(_A_from_log(theta), NOMINAL_C, x_hat, fit, grid, cfg.loss)

    if res.status <= 0:
        raise IdentificationError("coefficient refinement did not converge",
                                  build(theta, x_hat, prob.l2(theta)))
    if cfg.loss == "l2":
        return build(theta, x_hat, prob.l2(theta))

    p0 = np.concatenate([theta, [x_hat[0] + x_hat[1], x_hat[2], x_hat[3]]])
    f0 = prob.l1(p0)
    floor = cfg.tol * float(np.sum(np.abs(Y))) * dt   # round-off level of the objective
    nm = minimize(prob.l1, p0, method="Nelder-Mead",
                  options={"xatol": 1e-10, "fatol": max(cfg.tol * f0, floor),
                           "maxiter": cfg.max_iter, "maxfev": 2 * cfg.max_iter, "adaptive": True})
    params = nm.x if nm.fun <= f0 else p0
    S, q_r, q_n = params[4:]
    model = build(params[:4], np.array([S / 2, S / 2, q_r, q_n]), min(nm.fun, f0))
    if not nm.success and nm.fun > floor and nm.fun < f0 * (1 - 1e-6):
        # still improving when the budget ran out
        raise IdentificationError(f"absolute-error polish did not converge: {nm.message}", model)
    return model


def output_fit(model, signals, loss: str = "l1") -> float:
    """Objective value of ``model`` on ``signals`` (rectangle rule)."""
    Y, dt, _ = _stack(list(signals))
    O = observability_rows(model.A, model.C, dt, Y.shape[1])
    E = Y - O @ np.asarray(model.x_a_hat)
    return float((np.sum(np.abs(E)) if loss == "l1" else np.sum(E ** 2)) * dt)


def output_equivalent(a31, a33, a41, a44, damping_r: float):
    """Another coefficient set with the same observable characteristic polynomial.

    The output sees (a31, a33, a41, a44) only through
    s^3 + (b + d) s^2 + (b d + a + c) s + (a d + c b)
    with a = |a31|, b = |a33|, c = |a41|, d = |a44|.  Choosing a new b fixes d,
    and a, c follow from a 2x2 linear system.  Returns the negated magnitudes.
    """
    a, b, c, d = (abs(v) for v in (a31, a33, a41, a44))
    p2, p1, p0 = b + d, b * d + a + c, a * d + c * b
    b2 = damping_r
    d2 = p2 - b2
    if b2 == d2:
        raise ValueError("equal damping makes the stiffness split singular")
    M = np.array([[1.0, 1.0], [d2, b2]])
    a2, c2 = np.linalg.solve(M, [p1 - b2 * d2, p0])
    return -a2, -b2, -c2, -d2
