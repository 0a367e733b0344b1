"""Free-response simulation of the ink channel and labeled dataset assembly."""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import expm

from .model import (NOMINAL_A, NOMINAL_C, NOMINAL_XA, DEFAULT_FACTORS, FAULTS,
                    LABELS, FaultSpec, SystemMatrices, Variant, faulted_dynamics)


class SimulationError(RuntimeError):
    pass


@dataclass
class Signal:
    """Uniformly sampled sensing (or residual) trace starting at ``t_a``."""

    samples: np.ndarray
    t_a: float = 0.0
    dt: float = 1e-7

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=float).ravel()
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.samples.size == 0:
            raise ValueError("empty signal")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("signal contains non-finite samples")

    def __len__(self):
        return self.samples.size

    @property
    def t_f(self) -> float:
        return self.t_a + (len(self) - 1) * self.dt

    @property
    def times(self) -> np.ndarray:
        return self.t_a + self.dt * np.arange(len(self))

    def same_grid(self, other: "Signal") -> bool:
        return (len(self) == len(other) and self.dt == other.dt and self.t_a == other.t_a)


def simulate_autonomous(Adyn, C, x_a, t_a: float, dt: float, n: int) -> Signal:
    """Sample y[k] = C expm(Adyn k dt) x_a for k = 0..n-1."""
    if n < 2:
        raise ValueError("need at least two samples")
    if not dt > 0:
        raise ValueError("dt must be positive")
    Adyn = np.asarray(Adyn, dtype=float)
    C = np.asarray(C, dtype=float).reshape(1, -1)
    x = np.asarray(x_a, dtype=float).ravel().copy()
    y = np.empty(n)
    with np.errstate(over="ignore", invalid="ignore"):  # blow-up is reported below
        Phi = expm(Adyn * dt)
        for k in range(n):
            y[k] = C[0] @ x
            x = Phi @ x
    if not np.all(np.isfinite(y)):
        raise SimulationError("free response overflowed")
    return Signal(y, t_a, dt)


def add_noise(s: Signal, sigma: float, seed: int) -> Signal:
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return Signal(s.samples.copy(), s.t_a, s.dt)
    rng = np.random.default_rng(seed)
    return Signal(s.samples + rng.normal(0.0, sigma, size=len(s)), s.t_a, s.dt)


def _default_counts() -> dict:
    counts = {Variant.HEALTHY.value: 2475}
    counts.update({v.value: 225 for v in FAULTS})
    return counts


@dataclass
class GenerationConfig:
    """Recipe for a labeled dataset.

    ``deltas`` holds nominal fault factors per variant; each generated signal
    scales every factor by an independent U(1 - delta_jitter, 1 + delta_jitter)
    draw, and each acquisition-state component by U(1 - xa_jitter, 1 + xa_jitter).
    Noise sigma is ``noise_rel`` times the peak of the nominal healthy signal.
    """

    counts: dict = field(default_factory=_default_counts)
    deltas: dict = field(default_factory=lambda: {v.value: dict(f) for v, f in DEFAULT_FACTORS.items()})
    delta_jitter: float = 0.2
    xa_jitter: float = 0.1
    noise_rel: float = 0.02
    seed: int = 0
    t_a: float = 0.0
    dt: float = 1e-7
    n: int = 500
    A: list = field(default_factory=lambda: NOMINAL_A.tolist())
    C: list = field(default_factory=lambda: NOMINAL_C.tolist())
    x_a: list = field(default_factory=lambda: NOMINAL_XA.tolist())

    def __post_init__(self):
        for label, count in self.counts.items():
            if label not in LABELS:
                raise ValueError(f"unknown class label {label!r}")
            if int(count) != count or count < 0:
                raise ValueError(f"class count for {label} must be a non-negative integer")
        for label, factors in self.deltas.items():
            FaultSpec(label, factors)  # validates direction and touched parameters
        if not 0 <= self.delta_jitter < 1 or not 0 <= self.xa_jitter < 1:
            raise ValueError("jitter ranges must lie in [0, 1)")
        if self.noise_rel < 0:
            raise ValueError("noise_rel must be non-negative")
        if self.n < 2 or not self.dt > 0:
            raise ValueError("grid needs n >= 2 and dt > 0")

    def to_json(self) -> dict:
        return {
            "counts": {k: int(v) for k, v in self.counts.items()},
            "deltas": {k: dict(v) for k, v in self.deltas.items()},
            "delta_jitter": self.delta_jitter,
            "xa_jitter": self.xa_jitter,
            "noise_rel": self.noise_rel,
            "seed": int(self.seed),
            "t_a": self.t_a,
            "dt": self.dt,
            "n": int(self.n),
            "A": np.asarray(self.A, dtype=float).tolist(),
            "C": np.asarray(self.C, dtype=float).tolist(),
            "x_a": np.asarray(self.x_a, dtype=float).tolist(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "GenerationConfig":
        return cls(**obj)

    def digest(self) -> str:
        return config_digest(self.to_json())

    @property
    def system(self) -> SystemMatrices:
        return SystemMatrices(np.asarray(self.A, float), np.zeros((4, 1)), np.asarray(self.C, float))

    def noise_sigma(self) -> float:
        s = self.system
        nominal = simulate_autonomous(s.A, s.C, self.x_a, self.t_a, self.dt, self.n)
        return self.noise_rel * float(np.max(np.abs(nominal.samples)))


def config_digest(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


@dataclass
class LabeledDataset:
    entries: list  # of (Signal, label)
    seed: int = 0
    config_digest: str = ""
    config: dict | None = None

    def __len__(self):
        return len(self.entries)

    @property
    def signals(self) -> list:
        return [s for s, _ in self.entries]

    @property
    def labels(self) -> list:
        return [lab for _, lab in self.entries]

    def matrix(self) -> np.ndarray:
        """Samples stacked as rows (n_signals x n_samples)."""
        if not self.entries:
            return np.zeros((0, 0))
        return np.vstack([s.samples for s, _ in self.entries])

    def by_class(self) -> dict:
        out: dict = {}
        for s, lab in self.entries:
            out.setdefault(lab, []).append(s)
        return out

    def subset(self, indices) -> "LabeledDataset":
        return LabeledDataset([self.entries[i] for i in indices], self.seed,
                              self.config_digest, self.config)

    def to_csv(self, path) -> None:
        write_signals_csv(path, self.entries)
        if self.config is not None:
            sidecar = {"seed": int(self.seed), "config_digest": self.config_digest,
                       "config": self.config}
            Path(path).with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))

    @classmethod
    def from_csv(cls, path) -> "LabeledDataset":
        entries = read_signals_csv(path)
        sidecar = Path(path).with_suffix(".json")
        if sidecar.exists():
            meta = json.loads(sidecar.read_text())
            return cls(entries, meta.get("seed", 0), meta.get("config_digest", ""), meta.get("config"))
        return cls(entries)


def write_signals_csv(path, entries) -> None:
    """Write ``label,t_a,dt,y_0..y_{n-1}`` rows; floats use repr for exact round trips."""
    n = len(entries[0][0]) if entries else 0
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["label", "t_a", "dt"] + [f"y_{k}" for k in range(n)])
        for s, label in entries:
            writer.writerow([str(label), repr(float(s.t_a)), repr(float(s.dt))]
                            + [repr(float(v)) for v in s.samples])


def read_signals_csv(path) -> list:
    entries = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:3] != ["label", "t_a", "dt"]:
            raise ValueError(f"{path}: expected header starting with label,t_a,dt")
        for row in reader:
            if not row:
                continue
            entries.append((Signal(np.array(row[3:], dtype=float), float(row[1]), float(row[2])), row[0]))
    return entries


def _entry_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(index)])


def _entry_draws(cfg: GenerationConfig, label: str, index: int):
    """Per-entry random draws (fault spec, acquisition state, noise seed) from (seed, index)."""
    rng = _entry_rng(cfg.seed, index)
    variant = Variant(label)
    if variant is Variant.HEALTHY:
        spec = FaultSpec(variant)
    else:
        nominal = cfg.deltas[label]
        jittered = {k: f * rng.uniform(1 - cfg.delta_jitter, 1 + cfg.delta_jitter)
                    for k, f in sorted(nominal.items())}
        spec = FaultSpec(variant, jittered)
    x_a = np.asarray(cfg.x_a, float) * rng.uniform(1 - cfg.xa_jitter, 1 + cfg.xa_jitter, size=4)
    noise_seed = int(rng.integers(2**63 - 1))
    return spec, x_a, noise_seed


def generate_entry(cfg: GenerationConfig, label: str, index: int, sigma: float) -> Signal:
    """Simulate one dataset entry; depends only on (cfg, label, index)."""
    spec, x_a, noise_seed = _entry_draws(cfg, label, index)
    base = cfg.system
    clean = simulate_autonomous(faulted_dynamics(base, spec), base.C, x_a, cfg.t_a, cfg.dt, cfg.n)
    return add_noise(clean, sigma, noise_seed)


def _simulate_batch(Phis: np.ndarray, C: np.ndarray, X0: np.ndarray, n: int) -> np.ndarray:
    """Same recursion as simulate_autonomous, run for many (Phi, x0) pairs at once."""
    Y = np.empty((len(X0), n))
    X = X0.copy()
    c = C.ravel()
    for k in range(n):
        Y[:, k] = X @ c
        X = np.einsum("sij,sj->si", Phis, X)
    return Y


def generate_dataset(cfg: GenerationConfig) -> LabeledDataset:
    """Entries are grouped by class in canonical label order."""
    sigma = cfg.noise_sigma()
    base = cfg.system
    labels = [label for label in LABELS for _ in range(int(cfg.counts.get(label, 0)))]
    if not labels:
        return LabeledDataset([], cfg.seed, cfg.digest(), cfg.to_json())
    draws = [_entry_draws(cfg, label, i) for i, label in enumerate(labels)]
    Phis = np.array([expm(faulted_dynamics(base, spec) * cfg.dt) for spec, _, _ in draws])
    X0 = np.array([x_a for _, x_a, _ in draws])
    Y = _simulate_batch(Phis, base.C, X0, cfg.n)
    if not np.all(np.isfinite(Y)):
        raise SimulationError("free response overflowed")
    entries = []
    for y, (_, _, noise_seed), label in zip(Y, draws, labels):
        entries.append((add_noise(Signal(y, cfg.t_a, cfg.dt), sigma, noise_seed), label))
    return LabeledDataset(entries, cfg.seed, cfg.digest(), cfg.to_json())
