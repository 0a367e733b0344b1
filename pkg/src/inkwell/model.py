"""
Lumped ink-channel model and structured fault perturbations.

State vector (4 states):
    x = [V_r, V_n, dV_r/dt, dV_n/dt]

    - V_r, V_n:  ink volume displaced through restrictor / nozzle [m^3]
    - dV_r/dt, dV_n/dt:  the corresponding flow rates [m^3/s]

The healthy dynamics are a pair of coupled Helmholtz-type resonators sharing
one compliance.  Faults act multiplicatively on the inertances and the nozzle
resistance, which shifts rows 3-4 of A.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np


class Variant(str, enum.Enum):
    """Class labels, healthy first; fault order matches the isolation templates."""

    HEALTHY = "Healthy"
    EC = "EC"    # empty channel
    FBN = "FBN"  # fully blocked nozzle
    PBN = "PBN"  # partially blocked nozzle
    SDN = "SDN"  # slightly dried nozzle
    IDN = "IDN"  # intermediately dried nozzle
    DDN = "DDN"  # deeply dried nozzle

    def __str__(self) -> str:
        return self.value


LABELS = tuple(v.value for v in Variant)
FAULTS = tuple(v for v in Variant if v is not Variant.HEALTHY)

# parameters each variant perturbs, and the required direction of the factor
_TOUCHED = {
    Variant.EC: ("I_r", "I_n"),
    Variant.FBN: ("I_n", "R_n"),
    Variant.PBN: ("I_n", "R_n"),
    Variant.SDN: ("R_n",),
    Variant.IDN: ("R_n",),
    Variant.DDN: ("R_n",),
}
_DECREASING = {Variant.EC}

DEFAULT_FACTORS = {
    Variant.EC: {"I_r": 0.25, "I_n": 0.25},
    Variant.FBN: {"I_n": 4.0, "R_n": 8.0},
    Variant.PBN: {"I_n": 1.5, "R_n": 2.0},
    Variant.SDN: {"R_n": 1.5},
    Variant.IDN: {"R_n": 3.0},
    Variant.DDN: {"R_n": 8.0},
}

# identified healthy model of a production channel (c fixed to 1)
NOMINAL_A = np.array([
    [0.0, 0.0, 1.0, 0.0],
    [0.0, 0.0, 0.0, 1.0],
    [-4.33e11, -4.33e11, -1.59e5, 0.0],
    [-6.17e11, -6.17e11, 0.0, -1.75e5],
])
NOMINAL_C = np.array([[0.0, 0.0, 1.0, 1.0]])
NOMINAL_XA = np.array([0.21, 0.21, 0.16, 0.22])


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ChannelParams:
    """Physical parameters of one ink channel (SI units)."""

    I_r: float     # restrictor inertance [Pa s^2/m^3]
    I_n: float     # nozzle inertance [Pa s^2/m^3]
    R_r: float     # restrictor resistance [Pa s/m^3]
    R_n: float     # nozzle resistance [Pa s/m^3]
    beta_t: float  # total compliance [m^3/Pa]
    b: float = 1.0  # actuator constant [m^3/V]
    c: float = 1.0  # acquisition constant [V s/m^3]

    def __post_init__(self):
        for name in ("I_r", "I_n", "R_r", "R_n", "beta_t", "b", "c"):
            value = getattr(self, name)
            if not np.isfinite(value) or value <= 0:
                raise ModelError(f"{name} must be positive and finite, got {value!r}")

    @classmethod
    def from_coefficients(cls, a31: float, a33: float, a41: float, a44: float,
                          c: float = 1.0, beta_t: float = 1e-19, b: float = 1.0):
        """Back out physical parameters from the magnitudes of the lumped A entries.

        Only ratios are identifiable, so ``beta_t`` is a free choice.
        """
        a31, a33, a41, a44 = (abs(v) for v in (a31, a33, a41, a44))
        I_r = 1.0 / (a31 * beta_t)
        I_n = 1.0 / (a41 * beta_t)
        return cls(I_r=I_r, I_n=I_n, R_r=a33 * I_r, R_n=a44 * I_n,
                   beta_t=beta_t, b=b, c=c)


@dataclass(frozen=True)
class SystemMatrices:
    A: np.ndarray
    B_u: np.ndarray
    C: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "A", np.asarray(self.A, dtype=float).reshape(4, 4))
        object.__setattr__(self, "B_u", np.asarray(self.B_u, dtype=float).reshape(4, 1))
        object.__setattr__(self, "C", np.asarray(self.C, dtype=float).reshape(1, 4))

    @property
    def coefficients(self) -> tuple[float, float, float, float]:
        """The four free entries (a31, a33, a41, a44)."""
        A = self.A
        return A[2, 0], A[2, 2], A[3, 0], A[3, 3]


def structured_A(a31: float, a33: float, a41: float, a44: float) -> np.ndarray:
    """Assemble A with the fixed zero/one pattern and paired volume columns."""
    return np.array([
        [0.0, 0.0, 1.0, 0.0],
        [0.0, 0.0, 0.0, 1.0],
        [a31, a31, a33, 0.0],
        [a41, a41, 0.0, a44],
    ])


def check_structure(A: np.ndarray, C: np.ndarray | None = None, atol: float = 0.0) -> bool:
    A = np.asarray(A)
    ok = (np.allclose(A[0], [0, 0, 1, 0], rtol=0, atol=atol)
          and np.allclose(A[1], [0, 0, 0, 1], rtol=0, atol=atol)
          and A[2, 0] == A[2, 1] and A[3, 0] == A[3, 1]
          and A[2, 3] == 0 and A[3, 2] == 0)
    if C is not None:
        C = np.asarray(C).ravel()
        ok = ok and C[0] == 0 and C[1] == 0 and C[2] == C[3]
    return bool(ok)


def build_system_matrices(p: ChannelParams) -> SystemMatrices:
    k_r = 1.0 / (p.I_r * p.beta_t)
    k_n = 1.0 / (p.I_n * p.beta_t)
    A = structured_A(-k_r, -p.R_r / p.I_r, -k_n, -p.R_n / p.I_n)
    B_u = np.array([[0.0], [0.0], [p.b * k_r], [p.b * k_n]])
    C = np.array([[0.0, 0.0, p.c, p.c]])
    return SystemMatrices(A, B_u, C)


def nominal_system() -> SystemMatrices:
    return SystemMatrices(NOMINAL_A.copy(), np.zeros((4, 1)), NOMINAL_C.copy())


@dataclass(frozen=True)
class FaultSpec:
    """A fault variant and its multiplicative factors on I_r, I_n, R_n.

    Factors are applied to the healthy parameter, e.g. ``{"R_n": 1.5}`` is a
    50% increase in nozzle resistance.  The healthy variant carries none.
    """

    variant: Variant
    deltas: dict = field(default_factory=dict)

    def __post_init__(self):
        variant = Variant(self.variant)
        object.__setattr__(self, "variant", variant)
        deltas = {str(k): float(v) for k, v in dict(self.deltas).items()}
        object.__setattr__(self, "deltas", deltas)
        if variant is Variant.HEALTHY:
            if deltas:
                raise ModelError("Healthy fault spec must not carry deltas")
            return
        expected = set(_TOUCHED[variant])
        if set(deltas) != expected:
            raise ModelError(f"{variant} perturbs exactly {sorted(expected)}, got {sorted(deltas)}")
        for name, factor in deltas.items():
            if not np.isfinite(factor) or factor <= 0:
                raise ModelError(f"{variant} factor for {name} must be positive, got {factor}")
            if variant in _DECREASING and not factor < 1:
                raise ModelError(f"{variant} must decrease {name} (factor < 1), got {factor}")
            if variant not in _DECREASING and not factor > 1:
                raise ModelError(f"{variant} must increase {name} (factor > 1), got {factor}")

    @classmethod
    def default(cls, variant) -> "FaultSpec":
        variant = Variant(variant)
        if variant is Variant.HEALTHY:
            return cls(variant)
        return cls(variant, dict(DEFAULT_FACTORS[variant]))

    def to_json(self) -> dict:
        return {"variant": self.variant.value, "deltas": dict(self.deltas)}

    @classmethod
    def from_json(cls, obj: dict) -> "FaultSpec":
        return cls(obj["variant"], obj.get("deltas", {}))


def _perturbed_A(A: np.ndarray, spec: FaultSpec) -> np.ndarray:
    f_Ir = spec.deltas.get("I_r", 1.0)
    f_In = spec.deltas.get("I_n", 1.0)
    f_Rn = spec.deltas.get("R_n", 1.0)
    A_f = A.copy()
    # 1/(I beta) and R/I both scale with 1/I; R_n/I_n also scales with R_n
    A_f[2, 0:2] = A[2, 0:2] / f_Ir
    A_f[2, 2] = A[2, 2] / f_Ir
    A_f[3, 0:2] = A[3, 0:2] / f_In
    A_f[3, 3] = A[3, 3] * f_Rn / f_In
    return A_f


def build_fault_matrix(base: SystemMatrices, spec: FaultSpec) -> np.ndarray:
    """Return the fault term B_f * f as a 4x4 matrix (perturbed minus healthy A)."""
    if spec.variant is Variant.HEALTHY:
        raise ModelError("the healthy variant has no fault matrix")
    return _perturbed_A(base.A, spec) - base.A


def faulted_dynamics(base: SystemMatrices, spec: FaultSpec) -> np.ndarray:
    if spec.variant is Variant.HEALTHY:
        return base.A.copy()
    return base.A + build_fault_matrix(base, spec)


def fault_pattern(variant) -> np.ndarray:
    """Unit-entry matrix marking the A entries a fault variant may change."""
    variant = Variant(variant)
    P = np.zeros((4, 4))
    if variant is Variant.HEALTHY:
        return P
    if variant is Variant.EC:
        P[2, [0, 1, 2]] = 1.0
    if variant in (Variant.EC, Variant.FBN, Variant.PBN):
        P[3, [0, 1]] = 1.0
    P[3, 3] = 1.0
    return P
