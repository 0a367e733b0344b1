import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from inkwell.fdfilter import (BalancedModel, FilterPolynomials, GridMismatchError, ResidualFilter, SynthesisError,
                              assemble_dae, calibrate_threshold, check_sensitivity, compute_residual,
                              compute_residuals, continuous_response, design_denominator, design_filter, detect,
                              discrete_response, left_null_basis, left_null_space, null_polynomial,
                              realize_filter, realize_transfer, residual_energy, residual_statistic, stack_Fbar,
                              stack_Hbar)
from inkwell.model import NOMINAL_A, NOMINAL_C, NOMINAL_XA, LABELS, FaultSpec, faulted_dynamics
from inkwell.simulate import GenerationConfig, Signal, generate_dataset, simulate_autonomous

DT, N = 1e-7, 500


def healthy_signal(n=N, x_a=NOMINAL_XA):
    return simulate_autonomous(NOMINAL_A, NOMINAL_C, x_a, 0.0, DT, n)


def faulty_signal(nominal, variant, n=N):
    A = faulted_dynamics(nominal, FaultSpec.default(variant))
    return simulate_autonomous(A, NOMINAL_C, NOMINAL_XA, 0.0, DT, n)


# --- DAE and stacking ------------------------------------------------------

def test_dae_blocks(nominal):
    dae = assemble_dae(nominal)
    np.testing.assert_array_equal(dae.H0[4], [0, 0, 1, 1])
    np.testing.assert_array_equal(dae.H1, np.vstack([-np.eye(4), np.zeros((1, 4))]))
    np.testing.assert_array_equal(dae.L.ravel(), [0, 0, 0, 0, -1])
    assert len(dae.F_list) == 6 and all(F.shape == (5, 4) for F in dae.F_list)
    sdn = dae.F_list[dae.labels.index("SDN")]
    assert list(zip(*np.nonzero(sdn))) == [(3, 3)]


def test_stacked_shapes(nominal):
    dae = assemble_dae(nominal)
    np.testing.assert_array_equal(stack_Hbar(dae, 1), np.hstack([dae.H0, dae.H1]))
    assert stack_Hbar(dae, 5).shape == (25, 24)
    assert stack_Fbar(dae.F_list[0], 5).shape == (25, 20)
    with pytest.raises(ValueError):
        stack_Hbar(dae, 0)


def balanced_dae(nominal, faults=None):
    bal = BalancedModel.from_model(nominal)
    return bal, (assemble_dae(bal) if faults is None else assemble_dae(bal, faults))


def test_null_dimension_by_order(nominal):
    # singular values of the dimensionless stack: the minimal annihilating row
    # has degree 3, so order 4 leaves one null vector and order 5 leaves two
    _, dae = balanced_dae(nominal)
    assert np.linalg.matrix_rank(stack_Hbar(dae, 5)) == 23
    assert left_null_basis(stack_Hbar(dae, 5)).shape[0] == 2
    assert left_null_basis(stack_Hbar(dae, 4)).shape[0] == 1
    assert left_null_basis(stack_Hbar(dae, 3)).shape[0] == 0


def test_null_vector_exact_and_sensitive(nominal):
    design = null_polynomial(nominal, 5)
    _, dae = balanced_dae(nominal)
    N_bar = design.blocks_balanced.ravel()
    H = stack_Hbar(dae, 5)
    nN = np.max(np.abs(N_bar))
    assert np.max(np.abs(N_bar @ H)) <= 1e-9 * nN * np.linalg.norm(H, np.inf)
    assert all(check_sensitivity(N_bar, dae, 5))
    for F in dae.F_list:
        assert np.max(np.abs(N_bar @ stack_Fbar(F, 5))) > 1e-6 * nN
    # trailing block removed: degree-3 polynomial row
    assert not np.any(design.blocks_balanced[4])


def test_null_vector_in_physical_units(nominal):
    design = null_polynomial(nominal, 5)
    H = stack_Hbar(assemble_dae(nominal), 5)
    N_bar = design.blocks.ravel()
    assert np.max(np.abs(N_bar @ H)) <= 1e-9 * np.max(np.abs(N_bar)) * np.linalg.norm(H, np.inf)


def test_full_row_rank_has_no_null_space():
    with pytest.raises(SynthesisError, match="increase d_N"):
        left_null_space(np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]).T)


def test_left_null_space_reports_dimension():
    v, dim = left_null_space(np.array([[1.0], [0.0], [0.0]]))
    assert dim == 2
    assert np.linalg.norm(v) == pytest.approx(1.0)
    assert abs(v[0]) < 1e-15


def test_sensitivity_false_cases(nominal):
    _, dae = balanced_dae(nominal)
    N_bar = null_polynomial(nominal, 5).blocks_balanced.ravel()
    dae.F_list = [np.zeros((5, 4))]
    dae.labels = ["zero"]
    with pytest.warns(RuntimeWarning, match="blind"):
        assert check_sensitivity(N_bar, dae, 5) == [False]
    # pattern supported only where N-bar vanishes
    N = np.zeros(25)
    N[0] = 1.0
    F = np.zeros((5, 4))
    F[1, 2] = 1.0
    dae.F_list, dae.labels = [F], ["crafted"]
    with pytest.warns(RuntimeWarning):
        assert check_sensitivity(N, dae, 5) == [False]


# --- denominator -----------------------------------------------------------

def test_denominator_pure_oscillator():
    alpha = design_denominator(3, 5, 50e-6)
    w = 2 * math.pi * 1e5
    np.testing.assert_allclose(alpha, [1.0, 0.0, w * w])


@pytest.mark.parametrize("d_N", [3, 4, 5, 7])
def test_denominator_roots(d_N):
    alpha = design_denominator(d_N, 5, 50e-6)
    w = 2 * math.pi * 1e5
    assert len(alpha) - 1 == d_N - 1
    roots = np.roots(alpha)
    osc = roots[np.abs(roots.imag) > 0.5 * w]
    np.testing.assert_allclose(np.sort(osc.imag), [-w, w], rtol=1e-9)
    assert np.allclose(osc.real, 0, atol=1e-6 * w)
    rest = roots[np.abs(roots.imag) <= 0.5 * w]
    assert rest.size == d_N - 3
    np.testing.assert_allclose(rest.real, -w, rtol=1e-3)


def test_denominator_literal_convention():
    alpha = design_denominator(3, 5, 50e-6, convention="literal")
    assert alpha[2] == pytest.approx((5 / 50e-6) ** 2)


def test_denominator_needs_order_three():
    with pytest.raises(SynthesisError):
        design_denominator(2, 5, 50e-6)


# --- realization -----------------------------------------------------------

def test_first_order_sanity():
    g = realize_transfer([-1.0], [1.0, 1.0], DT)
    np.testing.assert_allclose(g.poles, [math.exp(-DT)], rtol=1e-14)
    y = g.response(np.ones(10))
    assert y[1] == pytest.approx(-(1 - math.exp(-DT)), rel=1e-9)


@pytest.mark.parametrize("hold", [0, 5])
def test_step_response_closed_forms(hold):
    t = np.arange(N) * DT
    a = 1e5
    y1 = realize_transfer([a], [1.0, a], DT, hold).response(np.ones(N))
    ref1 = 1 - np.exp(-a * t)
    assert np.max(np.abs(y1 - ref1)) < 1e-6 * np.max(np.abs(ref1))
    w, z = 1e6, 0.1
    wd = w * math.sqrt(1 - z * z)
    y2 = realize_transfer([w * w], [1.0, 2 * z * w, w * w], DT, hold).response(np.ones(N))
    ref2 = 1 - np.exp(-z * w * t) * (np.cos(wd * t) + z / math.sqrt(1 - z * z) * np.sin(wd * t))
    assert np.max(np.abs(y2 - ref2)) < 1e-6 * np.max(np.abs(ref2))


def test_improper_transfer_rejected():
    with pytest.raises(SynthesisError):
        realize_transfer([1.0, 1.0], [1.0, 1.0], DT)


def test_filter_poles(default_filter):
    mod = np.abs(np.linalg.eigvals(default_filter.A_d))
    marginal = np.sort(mod)[-2:]
    assert np.all(np.abs(marginal - 1.0) <= 1e-12)
    assert np.all(np.sort(mod)[:-2] < 1.0)
    ang = np.abs(np.angle(np.linalg.eigvals(default_filter.A_d[:2, :2])))
    np.testing.assert_allclose(ang, default_filter.polys.omega_r * DT, rtol=1e-12)


def test_frequency_response_matches_continuous(default_filter):
    w = np.linspace(1e3, 0.1 / DT, 400)
    w = w[np.abs(w - default_filter.polys.omega_r) > 1e-3 * default_filter.polys.omega_r]
    Gc = continuous_response(default_filter.polys, w)
    Gd = discrete_response(default_filter, w)
    assert np.max(np.abs(np.abs(Gd) / np.abs(Gc) - 1)) < 0.01


def test_zero_order_hold_option(nominal_model):
    f = design_filter(nominal_model, dt=DT, window=N * DT, hold_order=0)
    assert f.B_taps.shape == (1, f.order, 1)
    mod = np.sort(np.abs(np.linalg.eigvals(f.A_d)))
    assert np.all(np.abs(mod[-2:] - 1) <= 1e-12)


def test_properness_violation():
    blocks = np.zeros((5, 5))
    blocks[4, 4] = 1.0   # N_y of degree 4 against a degree-4 alpha
    polys = FilterPolynomials(blocks, design_denominator(5, 8, 50e-6), 1e6, 5)
    with pytest.raises(SynthesisError):
        realize_filter(polys, NOMINAL_XA, DT)


# --- residuals -------------------------------------------------------------

def test_ideal_healthy_residual_vanishes(default_filter):
    y = healthy_signal()
    r = compute_residual(default_filter, y)
    assert np.max(np.abs(r.samples)) <= 1e-6 * np.max(np.abs(y.samples))


def test_zero_input_zero_state(nominal_model):
    f = design_filter(nominal_model, np.zeros(4), dt=DT, window=N * DT)
    r = compute_residual(f, Signal(np.zeros(N), 0.0, DT))
    assert not np.any(r.samples)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-3, 3), st.floats(-3, 3))
def test_residual_linear_in_output(nominal_model, seed, a, b):
    f = zero_state_filter(nominal_model)
    rng = np.random.default_rng(seed)
    y1, y2 = rng.normal(size=N), rng.normal(size=N)
    r = compute_residuals(f, [Signal(y1, 0, DT), Signal(y2, 0, DT), Signal(a * y1 + b * y2, 0, DT)])
    np.testing.assert_allclose(r[2], a * r[0] + b * r[1], atol=1e-9 * np.max(np.abs(r[:2])) * (1 + abs(a) + abs(b)))


_ZERO_STATE = {}


def zero_state_filter(model):
    if "f" not in _ZERO_STATE:
        _ZERO_STATE["f"] = design_filter(model, np.zeros(4), dt=DT, window=N * DT)
    return _ZERO_STATE["f"]


def test_fault_excites_persistent_oscillation(nominal, default_filter):
    n = 4000
    y = faulty_signal(nominal, "DDN", n)
    r = compute_residual(default_filter, y).samples
    spec = np.abs(np.fft.rfft(r[n // 2:], n=16 * n))
    freq = 2 * np.pi * np.fft.rfftfreq(16 * n, DT)
    assert freq[np.argmax(spec)] == pytest.approx(default_filter.polys.omega_r, rel=0.01)
    # energy keeps growing: late window carries as much as an early one
    quarter = n // 4
    early = np.sum(r[quarter:2 * quarter] ** 2)
    late = np.sum(r[3 * quarter:] ** 2)
    assert late > 0.5 * early
    cum = np.cumsum(r ** 2) * DT
    assert np.all(np.diff(cum) >= 0)


def test_dried_nozzle_energy_far_above_healthy(default_filter):
    counts = {lab: 0 for lab in LABELS}
    counts.update(Healthy=60, DDN=30)
    ds = generate_dataset(GenerationConfig(counts=counts, seed=4))
    R = compute_residuals(default_filter, ds.signals)
    E = np.sum(R ** 2, axis=1) * DT
    labels = np.array(ds.labels)
    assert np.min(E[labels == "DDN"]) > 10 * np.median(E[labels == "Healthy"])


def test_grid_mismatch(default_filter):
    with pytest.raises(GridMismatchError):
        compute_residual(default_filter, Signal(np.ones(N), 0.0, 2 * DT))
    with pytest.raises(GridMismatchError):
        compute_residuals(default_filter, [Signal(np.ones(N), 0.0, DT), Signal(np.ones(N - 1), 0.0, DT)])


def test_filter_json_round_trip(default_filter, nominal):
    back = ResidualFilter.from_json(default_filter.to_json())
    y = faulty_signal(nominal, "SDN")
    assert np.array_equal(compute_residual(back, y).samples, compute_residual(default_filter, y).samples)


def test_design_is_invariant_to_output_equivalent_models(nominal_model, nominal):
    from inkwell.model import structured_A
    from inkwell.sysid import IdentifiedModel, observability_rows, output_equivalent
    A2 = structured_A(*output_equivalent(-4.33e11, -1.59e5, -6.17e11, -1.75e5, 1.0e5))
    y = healthy_signal()
    x2 = np.linalg.lstsq(observability_rows(A2, NOMINAL_C, DT, N), y.samples, rcond=None)[0]
    f2 = design_filter(IdentifiedModel(A2, NOMINAL_C, x2, 0.0), dt=DT, window=N * DT)
    f1 = design_filter(nominal_model, dt=DT, window=N * DT)
    z = faulty_signal(nominal, "PBN")
    r1 = compute_residual(f1, z).samples
    r2 = compute_residual(f2, z).samples
    assert np.max(np.abs(r1 - r2)) < 1e-6 * np.max(np.abs(r1))


# --- energy, threshold, decision -------------------------------------------

def test_energy_examples():
    assert residual_energy(Signal(np.zeros(N), 0, DT)) == 0
    assert residual_energy(Signal(np.ones(N), 0, DT)) == pytest.approx(5e-5, rel=1e-12)
    t = np.arange(N) * DT
    a = 2.5
    sine = Signal(a * np.sin(2 * np.pi * 1e5 * t), 0, DT)
    assert residual_energy(sine) == pytest.approx(a * a * N * DT / 2, rel=0.01)
    assert residual_statistic(sine, "max") == pytest.approx(a, rel=1e-3)
    with pytest.raises(ValueError):
        residual_statistic(sine, "median")


def test_threshold():
    sigs = [Signal(np.full(10, math.sqrt(e / 10)), 0, 1.0) for e in (1.0, 2.0, 3.0)]
    assert calibrate_threshold(sigs, 1.0) == pytest.approx(3.0)
    assert calibrate_threshold(sigs, 2.0) == pytest.approx(6.0)
    with pytest.raises(ValueError):
        calibrate_threshold([], 1.0)


def test_detect_is_strict():
    assert not detect(3.0, 3.0).is_faulty
    assert detect(3.01, 3.0).is_faulty
    with pytest.raises(ValueError):
        detect(-1.0, 1.0)


def test_no_warnings_for_nominal_design(nominal_model):
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        design_filter(nominal_model, dt=DT, window=N * DT)
