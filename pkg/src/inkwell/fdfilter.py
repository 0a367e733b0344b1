"""
Null-space residual generator for the autonomous sensing phase.

Pipeline: assemble_dae -> stack_Hbar -> left null space -> design_denominator
-> realize_filter -> compute_residual -> residual_energy -> detect.

The residual in the Laplace domain is

    R(s) = -N_y(s)/alpha(s) Y(s) + N_x(s) x_hat / alpha(s)

where N(s) = [N_x(s), N_y(s)] is a row polynomial with N(s) H(s) = 0 for
H(s) = [A - sI; C].  The second term is an impulse response (the acquisition
state enters the Laplace-domain model as a constant), so it is realized by
loading the filter state at t_a rather than by an input.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass

import numpy as np
from numpy.polynomial import polynomial as P
from scipy.linalg import expm

from .model import FAULTS, Variant, fault_pattern
from .simulate import Signal

log = logging.getLogger(__name__)

N_STATE = 4
N_OUT = 1
BLOCK = N_STATE + N_OUT


class SynthesisError(RuntimeError):
    pass


class GridMismatchError(ValueError):
    pass


# --------------------------------------------------------------------------
# DAE form and stacked matrices
# --------------------------------------------------------------------------

@dataclass
class DaeMatrices:
    H0: np.ndarray
    H1: np.ndarray
    L: np.ndarray
    F_list: list
    labels: list


def assemble_dae(model, faults=FAULTS) -> DaeMatrices:
    """Stack [A; C], [-I; 0], [0; -1] and the unit fault patterns [P_i; 0].

    ``model`` is anything exposing ``A`` (4x4) and ``C`` (1x4).
    """
    A = np.asarray(model.A, dtype=float)
    C = np.asarray(model.C, dtype=float).reshape(1, N_STATE)
    H0 = np.vstack([A, C])
    H1 = np.vstack([-np.eye(N_STATE), np.zeros((N_OUT, N_STATE))])
    L = np.vstack([np.zeros((N_STATE, 1)), -np.ones((1, 1))])
    variants = [Variant(getattr(f, "variant", f)) for f in faults]
    F_list = [np.vstack([fault_pattern(v), np.zeros((N_OUT, N_STATE))]) for v in variants]
    return DaeMatrices(H0, H1, L, F_list, [v.value for v in variants])


def stack_Hbar(dae: DaeMatrices, d_N: int) -> np.ndarray:
    if d_N < 1:
        raise ValueError("d_N must be >= 1")
    r, c = dae.H0.shape
    Hbar = np.zeros((d_N * r, c * (d_N + 1)))
    for i in range(d_N):
        Hbar[i * r:(i + 1) * r, i * c:(i + 1) * c] = dae.H0
        Hbar[i * r:(i + 1) * r, (i + 1) * c:(i + 2) * c] = dae.H1
    return Hbar


def stack_Fbar(F: np.ndarray, d_N: int) -> np.ndarray:
    return np.kron(np.eye(d_N), F)


def _sign_normalize(v: np.ndarray) -> np.ndarray:
    big = np.flatnonzero(np.abs(v) > 1e-12 * np.max(np.abs(v)))
    if big.size and v[big[0]] < 0:
        v = -v
    return v


def left_null_basis(M: np.ndarray, rtol: float | None = None) -> np.ndarray:
    """Orthonormal rows spanning {v : v M = 0}, smallest singular value last."""
    M = np.asarray(M, dtype=float)
    U, s, _ = np.linalg.svd(M)
    if rtol is None:
        rtol = max(M.shape) * np.finfo(float).eps
    rank = int(np.sum(s > rtol * s[0])) if s.size and s[0] > 0 else 0
    return U[:, rank:].T


def left_null_space(M: np.ndarray, rtol: float | None = None) -> tuple[np.ndarray, int]:
    """Unit-norm left null vector (smallest singular value) and the null dimension."""
    basis = left_null_basis(M, rtol)
    dim = basis.shape[0]
    if dim == 0:
        raise SynthesisError("H-bar has no left null space; increase d_N")
    if dim > 1:
        log.info("left null space has dimension %d", dim)
    v = basis[-1]
    return _sign_normalize(v / np.linalg.norm(v)), dim


def minimal_degree_vector(basis: np.ndarray, block: int = BLOCK) -> np.ndarray:
    """Combine null-space rows so the trailing (dim - 1) blocks vanish.

    A d-dimensional null space of the stacked matrix is spanned by s^j N_min(s),
    j < d, so the minimal-degree polynomial row is the unique (up to scale)
    combination whose top d - 1 coefficient blocks are zero.
    """
    dim = basis.shape[0]
    if dim == 1:
        v = basis[0]
    else:
        tail = basis[:, -(dim - 1) * block:]
        _, _, Vt = np.linalg.svd(tail.T)
        v = Vt[-1] @ basis
    return _sign_normalize(v / np.linalg.norm(v))


def check_sensitivity(N_bar: np.ndarray, dae: DaeMatrices, d_N: int, rtol: float = 1e-6) -> list:
    """Per fault, whether N-bar F-bar_i is nonzero relative to N-bar."""
    N_bar = np.asarray(N_bar, dtype=float).ravel()
    scale = np.max(np.abs(N_bar))
    flags = []
    for label, F in zip(dae.labels, dae.F_list):
        seen = bool(np.max(np.abs(N_bar @ stack_Fbar(F, d_N)), initial=0.0) > rtol * scale)
        if not seen:
            warnings.warn(f"residual filter is blind to fault {label}", RuntimeWarning)
        flags.append(seen)
    return flags


# --------------------------------------------------------------------------
# Synthesis in balanced coordinates
# --------------------------------------------------------------------------

def _balancing(A: np.ndarray) -> tuple[float, np.ndarray]:
    """Time scale w0 and state scaling T so that T^-1 A T / w0 has O(1) entries."""
    w0 = math.sqrt(abs(A[2, 0]) + abs(A[3, 0]))
    if not np.isfinite(w0) or w0 == 0:
        w0 = 1.0
    return w0, np.diag([1.0, 1.0, w0, w0])


@dataclass
class BalancedModel:
    """Dimensionless model: time in units of 1/w0, flows divided by w0."""

    A: np.ndarray
    C: np.ndarray
    w0: float
    T: np.ndarray

    @classmethod
    def from_model(cls, model) -> "BalancedModel":
        A = np.asarray(model.A, dtype=float)
        C = np.asarray(model.C, dtype=float).reshape(1, N_STATE)
        w0, T = _balancing(A)
        return cls(np.linalg.solve(T, A @ T) / w0, C @ T / w0, w0, T)

    def to_physical(self, blocks_s: np.ndarray) -> np.ndarray:
        """Map dimensionless N~ blocks to physical ones: N(s) = N~(s / w0) D^-1, D = blockdiag(w0 T, w0)."""
        d_inv = 1.0 / np.concatenate([self.w0 * np.diag(self.T), [self.w0]])
        return np.array([blocks_s[i] * d_inv / self.w0**i for i in range(len(blocks_s))])


@dataclass
class NullDesign:
    blocks: np.ndarray           # physical units, ascending powers of s
    blocks_balanced: np.ndarray  # dimensionless, unit norm
    dim: int                     # null dimension of the stacked matrix
    balanced: BalancedModel


def null_polynomial(model, d_N: int) -> NullDesign:
    """Minimal-degree row N(s) with N(s)[A - sI; C] = 0, as (d_N x 5) ascending blocks.

    The null space is computed on the dimensionless model; raw physical
    entries span tens of decades and hide the rank.
    """
    bal = BalancedModel.from_model(model)
    basis = left_null_basis(stack_Hbar(assemble_dae(bal, []), d_N))
    dim = basis.shape[0]
    if dim == 0:
        raise SynthesisError(f"no residual generator of order d_N={d_N}; increase d_N")
    blocks_s = minimal_degree_vector(basis).reshape(d_N, BLOCK)
    blocks_s[d_N - (dim - 1):] = 0.0
    blocks = bal.to_physical(blocks_s)
    return NullDesign(blocks / np.linalg.norm(blocks), blocks_s, dim, bal)


def _poly_degree(coeffs_asc: np.ndarray) -> int:
    c = np.asarray(coeffs_asc, dtype=float)
    nz = np.flatnonzero(np.abs(c) > 0)
    return int(nz[-1]) if nz.size else -1


# --------------------------------------------------------------------------
# Denominator
# --------------------------------------------------------------------------

def resonance_frequency(n_o: float, T: float, convention: str = "2pi") -> float:
    """Residual frequency giving n_o oscillations in a window of length T."""
    if convention == "2pi":
        return 2 * math.pi * n_o / T
    if convention == "literal":
        return n_o / T
    raise ValueError(f"unknown omega convention {convention!r}")


def design_denominator(d_N: int, n_o: float, T: float, convention: str = "2pi") -> np.ndarray:
    """alpha(s) = (s^2 + w_r^2)(s + w_r)^(d_N - 3), coefficients highest power first."""
    if d_N < 3:
        raise SynthesisError("d_N must be >= 3 to host the marginal pole pair")
    if n_o < 1 or not T > 0:
        raise ValueError("need n_o >= 1 and T > 0")
    w = resonance_frequency(n_o, T, convention)
    alpha = np.array([1.0, 0.0, w * w])
    for _ in range(d_N - 3):
        alpha = np.polymul(alpha, [1.0, w])
    return alpha


# --------------------------------------------------------------------------
# Realization
# --------------------------------------------------------------------------

@dataclass
class FilterPolynomials:
    N_blocks: np.ndarray   # d_N x 5, ascending powers of s
    alpha: np.ndarray      # highest power first
    omega_r: float
    d_N: int
    null_dim: int = 1

    @property
    def N_y(self) -> np.ndarray:
        """Ascending coefficients of the output entry of N(s)."""
        return self.N_blocks[:, N_STATE]

    def N_x(self, x_hat) -> np.ndarray:
        return self.N_blocks[:, :N_STATE] @ np.asarray(x_hat, dtype=float)

    def Hbar_residual(self, dae: DaeMatrices) -> float:
        return float(np.max(np.abs(self.N_blocks.ravel() @ stack_Hbar(dae, self.d_N))))


@dataclass
class ResidualFilter:
    """Discretized residual generator.

    State update over [t_k, t_{k+1}] is exact for an input that is the
    degree-``hold_order`` polynomial through the stencil samples
    (hold_order = 0 is the zero-order hold).  ``B_taps[o]`` maps the stencil
    y[k-o .. k-o+q-1] to the state increment; ``x0`` is the state loaded at
    t_a that carries the acquisition-state term.
    """

    polys: FilterPolynomials
    A_d: np.ndarray
    B_taps: np.ndarray     # (q, n, q): one tap matrix per stencil offset
    C_d: np.ndarray
    D_d: np.ndarray
    x0: np.ndarray
    x_a_hat: np.ndarray
    dt: float
    hold_order: int
    center: int
    # continuous realization, kept for frequency-response checks
    A_c: np.ndarray
    B_c: np.ndarray

    @property
    def order(self) -> int:
        return self.A_d.shape[0]

    def to_json(self) -> dict:
        p = self.polys
        return {
            "N_blocks": p.N_blocks.tolist(),
            "alpha": p.alpha.tolist(),
            "omega_r": p.omega_r,
            "d_N": p.d_N,
            "null_dim": p.null_dim,
            "x_a_hat": self.x_a_hat.tolist(),
            "dt": self.dt,
            "hold_order": self.hold_order,
            "center": self.center,
            "A_d": self.A_d.tolist(),
            "B_taps": self.B_taps.tolist(),
            "C_d": self.C_d.tolist(),
            "D_d": self.D_d.tolist(),
            "x0": self.x0.tolist(),
            "A_c": self.A_c.tolist(),
            "B_c": self.B_c.tolist(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ResidualFilter":
        polys = FilterPolynomials(np.array(obj["N_blocks"]), np.array(obj["alpha"]),
                                  float(obj["omega_r"]), int(obj["d_N"]), int(obj.get("null_dim", 1)))
        return cls(polys, np.array(obj["A_d"]), np.array(obj["B_taps"]), np.array(obj["C_d"]),
                   np.array(obj["D_d"]), np.array(obj["x0"]), np.array(obj["x_a_hat"]),
                   float(obj["dt"]), int(obj["hold_order"]), int(obj["center"]),
                   np.array(obj["A_c"]), np.array(obj["B_c"]))


def _modal_form(m: int) -> tuple[np.ndarray, np.ndarray]:
    """Unit-frequency oscillator block plus a Jordan chain at -1 (scaled units)."""
    n = 2 + m
    A = np.zeros((n, n))
    A[0, 1], A[1, 0] = 1.0, -1.0
    for j in range(m):
        A[2 + j, 2 + j] = -1.0
        if j + 1 < m:
            A[2 + j, 3 + j] = 1.0
    C = np.zeros(n)
    C[0] = 1.0
    if m:
        C[2] = 1.0
    return A, C


def _modal_input(num_asc: np.ndarray, m: int) -> np.ndarray:
    """B such that C (vI - A)^-1 B = num(v) / ((v^2 + 1)(v + 1)^m) for the modal form.

    Matches numerator coefficients of the partial-fraction expansion
    (b1 v + b2)/(v^2+1) + sum_j c_j/(v+1)^j.
    """
    n = 2 + m
    cols = []
    one_m = P.polypow([1.0, 1.0], m)
    cols.append(P.polymul([0.0, 1.0], one_m))        # b1: v (v+1)^m
    cols.append(one_m)                               # b2: (v+1)^m
    for j in range(1, m + 1):
        cols.append(P.polymul([1.0, 0.0, 1.0], P.polypow([1.0, 1.0], m - j)))
    M = np.zeros((n, n))
    for k, c in enumerate(cols):
        M[:len(c), k] = c
    rhs = np.zeros(n)
    num = np.trim_zeros(np.asarray(num_asc, dtype=float), "b")
    if num.size > n:
        raise SynthesisError("numerator degree reaches the denominator degree; filter not strictly proper")
    rhs[:num.size] = num
    return np.linalg.solve(M, rhs)


def _scaled_numerator(num_asc: np.ndarray, w: float, deg_alpha: int) -> np.ndarray:
    num = np.asarray(num_asc, dtype=float)
    return num * w ** np.arange(num.size) / w**deg_alpha


def _hold_taps(A_s: np.ndarray, b_s: np.ndarray, theta: float, p: int) -> tuple[np.ndarray, np.ndarray]:
    """Exact one-step map for a degree-p polynomial input in normalized time.

    Returns (A_d, G) with x(1) = A_d x(0) + G @ [u(0), u'(0), ..., u^(p)(0)].
    """
    n = A_s.shape[0]
    M = np.zeros((n + p + 1, n + p + 1))
    M[:n, :n] = theta * A_s
    M[:n, n] = theta * b_s
    for j in range(p):
        M[n + j, n + j + 1] = 1.0
    E = expm(M)
    return E[:n, :n], E[:n, n:]


def _discretize(A_s: np.ndarray, b_s: np.ndarray, theta: float, p: int) -> tuple[np.ndarray, np.ndarray]:
    """State matrix and per-offset stencil taps for the degree-p sample hold."""
    if p < 0:
        raise ValueError("hold order must be non-negative")
    q = p + 1
    A_d, G = _hold_taps(A_s, b_s, theta, p)
    G = G * np.array([math.factorial(j) for j in range(q)])
    taps = np.empty((q, A_s.shape[0], q))
    for o in range(q):
        # interpolating polynomial through samples at nodes -o .. q-1-o
        V = np.vander((np.arange(q) - o).astype(float), q, increasing=True)
        taps[o] = G @ np.linalg.inv(V)
    return A_d, taps


@dataclass
class DiscreteTransfer:
    """Sampled realization of a strictly proper SISO transfer function."""

    A_d: np.ndarray
    B_taps: np.ndarray
    C_d: np.ndarray
    dt: float
    hold_order: int
    center: int

    @property
    def poles(self) -> np.ndarray:
        return np.linalg.eigvals(self.A_d)

    def response(self, u) -> np.ndarray:
        """Output samples for input samples ``u`` from a zero initial state."""
        U = np.asarray(u, dtype=float).reshape(-1, 1)
        X = _run_states(self.A_d, self.B_taps, self.center, np.zeros(self.A_d.shape[0]), U)
        return X[:, :, 0] @ self.C_d.ravel()


def realize_transfer(num_asc, den_desc, dt: float, hold_order: int = 0) -> DiscreteTransfer:
    """Controllable canonical realization of num(s)/den(s), discretized at ``dt``.

    ``num_asc`` lists ascending powers, ``den_desc`` descending powers (numpy
    polynomial conventions of the two helpers used elsewhere in this module).
    """
    den = np.trim_zeros(np.asarray(den_desc, dtype=float), "f")
    num = np.trim_zeros(np.asarray(num_asc, dtype=float), "b")
    n = den.size - 1
    if n < 1 or num.size > n:
        raise SynthesisError("transfer function must be strictly proper")
    den = den / den[0]
    A = np.zeros((n, n))
    A[:-1, 1:] = np.eye(n - 1)
    A[-1] = -den[::-1][:-1]
    b = np.zeros(n)
    b[-1] = 1.0
    c = np.zeros(n)
    c[:num.size] = num
    A_d, taps = _discretize(A, b, dt, hold_order)
    return DiscreteTransfer(A_d, taps, c.reshape(1, -1), float(dt), int(hold_order), int(hold_order) // 2)


def realize_filter(polys: FilterPolynomials, x_a_hat, dt: float, hold_order: int = 5) -> ResidualFilter:
    deg_alpha = len(polys.alpha) - 1
    m = deg_alpha - 2
    if m < 0:
        raise SynthesisError("alpha must contain the marginal pole pair")
    w = polys.omega_r
    num_y = -polys.N_y
    num_x = polys.N_x(x_a_hat)
    if max(_poly_degree(num_y), _poly_degree(num_x)) >= deg_alpha:
        raise SynthesisError("deg N(s) >= deg alpha(s); residual generator would not be strictly proper")

    A_s, C_s = _modal_form(m)
    b_y = _modal_input(_scaled_numerator(num_y, w, deg_alpha), m)
    b_x = _modal_input(_scaled_numerator(num_x, w, deg_alpha), m)

    p = int(hold_order)
    theta = w * dt
    A_d, taps = _discretize(A_s, b_y, theta, p)
    # rotation block in closed form so the marginal pair sits exactly on the unit circle
    A_d[:2, :2] = [[math.cos(theta), math.sin(theta)], [-math.sin(theta), math.cos(theta)]]
    return ResidualFilter(
        polys=polys, A_d=A_d, B_taps=taps, C_d=C_s.reshape(1, -1), D_d=np.zeros((1, 1)),
        x0=w * b_x, x_a_hat=np.asarray(x_a_hat, dtype=float).copy(), dt=float(dt),
        hold_order=p, center=p // 2, A_c=w * A_s, B_c=w * b_y,
    )


def normalize_gain(blocks: np.ndarray, alpha: np.ndarray, w: float) -> np.ndarray:
    """Scale N(s) so the output channel rolls off as (w/s)^k above resonance.

    This fixes the otherwise arbitrary null-vector scale so residual
    amplitudes are comparable to the measured signal.
    """
    n_y = blocks[:, N_STATE]
    deg = _poly_degree(n_y)
    if deg < 0:
        raise SynthesisError("null vector has no output component")
    gain = w ** (len(alpha) - 1 - deg) / n_y[deg]
    return blocks * gain


def design_filter(model, x_a_hat=None, *, dt: float, window: float, d_N: int = 5, n_o: float = 8,
                  convention: str = "2pi", hold_order: int = 5, faults=FAULTS) -> ResidualFilter:
    """Synthesize and discretize the residual generator for a healthy model."""
    if x_a_hat is None:
        x_a_hat = model.x_a_hat
    design = null_polynomial(model, d_N)
    dae = assemble_dae(design.balanced, faults)
    flags = check_sensitivity(design.blocks_balanced.ravel(), dae, d_N)
    log.info("null dimension %d at d_N=%d, sensitivity %s", design.dim, d_N, dict(zip(dae.labels, flags)))
    alpha = design_denominator(d_N, n_o, window, convention)
    w = resonance_frequency(n_o, window, convention)
    polys = FilterPolynomials(normalize_gain(design.blocks, alpha, w), alpha, w, d_N, design.dim)
    return realize_filter(polys, x_a_hat, dt, hold_order)


# --------------------------------------------------------------------------
# Running the filter
# --------------------------------------------------------------------------

def _stencil_offsets(n: int, q: int, center: int) -> np.ndarray:
    k = np.arange(n - 1)
    return np.maximum(np.minimum(center, k), k + q - n)


def filter_states(f: ResidualFilter, Y: np.ndarray) -> np.ndarray:
    """Filter states for a batch; Y is (n_samples, n_signals). Returns (n_samples, order, n_signals)."""
    return _run_states(f.A_d, f.B_taps, f.center, f.x0, Y)


def _run_states(A_d, taps, center, x0, Y) -> np.ndarray:
    n, n_sig = Y.shape
    q = taps.shape[0]
    if n < q:
        raise ValueError(f"signals need at least {q} samples for hold order {q - 1}")
    X = np.empty((n, A_d.shape[0], n_sig))
    x = np.repeat(np.asarray(x0, dtype=float).reshape(-1, 1), n_sig, axis=1)
    offsets = _stencil_offsets(n, q, center)
    X[0] = x
    for k in range(n - 1):
        o = offsets[k]
        x = A_d @ x + taps[o] @ Y[k - o:k - o + q]
        X[k + 1] = x
    return X


def compute_residuals(f: ResidualFilter, signals) -> np.ndarray:
    """Residuals for several signals on the filter grid, as an (n_signals, n) array."""
    if not signals:
        return np.zeros((0, 0))
    ref = signals[0]
    for s in signals:
        if not math.isclose(s.dt, f.dt, rel_tol=1e-12):
            raise GridMismatchError(f"signal dt {s.dt} differs from filter dt {f.dt}")
        if not s.same_grid(ref):
            raise GridMismatchError("signals do not share a grid")
    Y = np.column_stack([s.samples for s in signals])
    X = filter_states(f, Y)
    return np.einsum("j,kjs->sk", f.C_d[0], X)


def compute_residual(f: ResidualFilter, s: Signal) -> Signal:
    r = compute_residuals(f, [s])[0]
    return Signal(r, s.t_a, s.dt)


def residual_energy(r: Signal) -> float:
    """Rectangle-rule integral of r^2 over the window."""
    return float(np.sum(r.samples ** 2) * r.dt)


def residual_statistic(r: Signal, kind: str = "energy") -> float:
    if kind == "energy":
        return residual_energy(r)
    if kind == "max":
        return float(np.max(np.abs(r.samples)))
    raise ValueError(f"unknown residual statistic {kind!r}")


def calibrate_threshold(healthy_residuals, mu: float, kind: str = "energy") -> float:
    """mu times the largest statistic over a healthy calibration set."""
    if not healthy_residuals:
        raise ValueError("threshold calibration needs at least one healthy residual")
    if not mu > 0:
        raise ValueError("mu must be positive")
    return mu * max(residual_statistic(r, kind) for r in healthy_residuals)


@dataclass(frozen=True)
class DetectionResult:
    energy: float
    threshold: float
    is_faulty: bool


def detect(energy: float, threshold: float) -> DetectionResult:
    if energy < 0 or threshold < 0:
        raise ValueError("energy and threshold must be non-negative")
    return DetectionResult(float(energy), float(threshold), bool(energy > threshold))


# --------------------------------------------------------------------------
# Frequency responses
# --------------------------------------------------------------------------

def continuous_response(polys: FilterPolynomials, omega) -> np.ndarray:
    """G_y(i w) = -N_y(i w) / alpha(i w)."""
    s = 1j * np.asarray(omega, dtype=float)
    return -P.polyval(s, polys.N_y) / np.polyval(polys.alpha, s)


def discrete_response(f: ResidualFilter, omega) -> np.ndarray:
    """Steady-state gain from the sampled y stream to r at frequency w (interior stencil)."""
    out = []
    q = f.hold_order + 1
    taps = f.B_taps[f.center]
    I = np.eye(f.order)
    for w in np.atleast_1d(omega):
        z = np.exp(1j * w * f.dt)
        b = taps @ (z ** (np.arange(q) - f.center))
        out.append(f.C_d[0] @ np.linalg.solve(z * I - f.A_d, b))
    return np.array(out)
