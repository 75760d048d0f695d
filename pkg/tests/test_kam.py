import itertools
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from stochkam import hamiltonian as h
from stochkam import kam
from stochkam import noise as nz
from stochkam.errors import ContractViolation, InvalidParameters, SamplingTooCoarse

GOLDEN = (1 + math.sqrt(5)) / 2
SCAN_ETAS = [0.0, 1e-3, 1e-2, 5e-2, 1e-1]


@pytest.fixture(scope="module")
def scan():
    params = kam.KAMParams(l=10, nu=3, alpha=1e-3)
    I0 = kam.golden_actions([0.2, 0.3, 0.4, 0.5, 0.6])
    return kam.torus_persistence_scan(h.twist2d(), nz.identity(2), SCAN_ETAS, I0, 500.0, 20000, params)


# -- frequency estimation ----------------------------------------------------

def test_frequency_harmonic_orbit():
    sys = h.harmonic()
    T, N = 60.0, 60000
    p = h.deterministic_flow(sys, [1.0, 0.0], T, N)  # I = 0.5
    theta, _ = h.to_action_angle(sys, p.values)
    fv = kam.frequency_estimate(theta[:, 0], T, expected_min_frequency=1.0)
    # the chart angle atan2(p, q) turns clockwise under this flow
    assert abs(abs(fv.omega[0]) - 1.0) <= 1e-6
    assert fv.omega[0] < 0


def test_frequency_unperturbed_twist():
    sys = h.twist2d(0.0)
    T, N = 200.0, 4000
    p = h.deterministic_flow(sys, [0.0, 0.0, 0.3, 0.48], T, N)
    fv = kam.frequency_estimate(np.mod(p.values[:, :2], 2 * np.pi), T)
    np.testing.assert_allclose(fv.omega, [0.3, 0.48], atol=1e-6)
    assert fv.n == 2


def test_frequency_synthetic_signal():
    t = np.linspace(0, 200, 8001)
    fv = kam.frequency_estimate(0.7 * t + 0.01 * np.sin(5 * t), times=t)
    assert abs(fv.omega[0] - 0.7) <= 1e-4
    assert fv.estimated_error[0] > 0


def test_frequency_exact_line_error_floor():
    t = np.linspace(0, 100, 1001)
    fv = kam.frequency_estimate(1.25 * t + 0.3, 100.0)
    assert abs(fv.omega[0] - 1.25) <= fv.estimated_error[0]


@given(st.lists(st.integers(-3, 3), min_size=401, max_size=401), st.floats(0.2, 2.0))
def test_frequency_unwrap_invariance(shifts, w):
    t = np.linspace(0, 100, 401)
    theta = w * t + 0.05 * np.cos(1.3 * t)
    shifted = theta + 2 * np.pi * np.asarray(shifts)
    a = kam.frequency_estimate(theta, 100.0).omega
    b = kam.frequency_estimate(shifted, 100.0).omega
    assert abs(a[0] - b[0]) <= 1e-9 * max(1.0, abs(a[0]))


def test_frequency_sampling_too_coarse():
    t = np.linspace(0, 100, 101)
    with pytest.raises(SamplingTooCoarse):
        kam.frequency_estimate(np.mod(2.0 * t, 2 * np.pi), 100.0)


def test_frequency_contract():
    with pytest.raises(ContractViolation):
        kam.frequency_estimate(np.zeros(5), 1.0)
    with pytest.raises(ContractViolation):
        kam.frequency_estimate(np.linspace(0, 1, 100), 1.0, expected_min_frequency=1.0)
    with pytest.raises(ContractViolation):
        kam.frequency_estimate(np.full(20, np.nan), 1.0)
    with pytest.raises(ContractViolation):
        kam.frequency_estimate(np.zeros(20))
    with pytest.raises(ContractViolation):
        kam.FrequencyVector([1.0], [-1.0])


# -- parameters --------------------------------------------------------------

def test_kam_params_validation():
    p = kam.KAMParams(l=10, nu=3, alpha=0.1)
    assert p.tau == 2.0
    for kw in [dict(l=6, nu=3), dict(l=10, nu=2), dict(l=10, nu=3, alpha=0.0), dict(l=10, nu=3, k_max=0)]:
        kw.setdefault("alpha", 0.1)
        with pytest.raises(InvalidParameters):
            kam.KAMParams(**kw)


def test_alpha_from_eta():
    p = kam.KAMParams(l=10, nu=3, alpha=0.1)
    assert kam.alpha_from_eta(1.0, p) == 1.0
    assert kam.alpha_from_eta(1e-2, p) == pytest.approx(10 ** -0.4, rel=1e-12)
    assert kam.alpha_from_eta(1e-2, kam.KAMParams(l=10, nu=3, alpha=0.1, c=2.0)) == pytest.approx(2 * 10 ** -0.4)
    half = kam.KAMParams(l=20, nu=2.5, alpha=0.1)
    full = kam.KAMParams(l=20, nu=5, alpha=0.1)
    # a smaller nu raises the exponent, so for eta < 1 the scale shrinks
    assert kam.alpha_from_eta(0.1, half) < kam.alpha_from_eta(0.1, full)
    assert kam.alpha_from_eta(10.0, half) > kam.alpha_from_eta(10.0, full)
    with pytest.raises(ContractViolation):
        kam.alpha_from_eta(0.0, p)


def test_alpha_from_eta_invalid_exponent():
    # l > 2 nu keeps the exponent positive; a hand-built record can still violate it
    p = kam.KAMParams(l=10, nu=3, alpha=0.1)
    object.__setattr__(p, "l", 6.0)
    with pytest.raises(InvalidParameters):
        kam.alpha_from_eta(0.5, p)


# -- Diophantine check -------------------------------------------------------

def brute_force(omega, tau, k_max):
    best, arg = math.inf, None
    for k in itertools.product(range(-k_max, k_max + 1), repeat=len(omega)):
        n1 = sum(abs(c) for c in k)
        if 0 < n1 <= k_max:
            v = abs(sum(a * b for a, b in zip(omega, k))) * n1 ** tau
            if v < best:
                best, arg = v, k
    return best, arg


def test_integer_vectors_canonical():
    K = kam.integer_vectors(2, 3)
    assert len(K) == (2 * 3 * 4 + 1 - 1) // 2  # half of the nonzero points in the l1 ball
    assert [tuple(k) for k in K[:2]] == [(0, 1), (1, 0)]
    norms = np.abs(K).sum(axis=1)
    assert np.all(np.diff(norms) >= 0)


def test_diophantine_golden():
    omega = np.array([1.0, GOLDEN])
    best, _ = brute_force(omega, 1.0, 30)
    assert best > 0
    p = kam.KAMParams(l=5, nu=2, n=1, alpha=best / 2)  # tau = 1
    ok, _, margin = kam.diophantine_check(omega, p)
    assert ok and margin == pytest.approx(best / 2, rel=1e-12)


@pytest.mark.parametrize("omega, k", [((1.0, 2.0), (2, -1)), ((1.0, 0.0), (0, 1))])
def test_diophantine_resonances(omega, k):
    ok, worst, margin = kam.diophantine_check(omega, kam.KAMParams(l=10, nu=3, alpha=1e-9))
    assert not ok and tuple(worst) in {k, tuple(-np.array(k))} and margin < 0


def test_diophantine_matches_enumeration():
    rng = np.random.default_rng(2024)
    p = kam.KAMParams(l=10, nu=3, alpha=1e-3)
    for _ in range(100):
        omega = rng.uniform(-2, 2, size=2)
        best, _ = brute_force(omega, p.tau, 30)
        ok, worst, margin = kam.diophantine_check(omega, p)
        assert abs((margin + p.alpha) - best) <= 1e-12 * max(1.0, best)
        assert ok == (best >= p.alpha)


@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(0.01, 100.0), st.floats(1e-4, 1e-1))
def test_diophantine_scaling(w1, w2, c, alpha):
    p = kam.KAMParams(l=10, nu=3, alpha=alpha, k_max=10)
    q = kam.KAMParams(l=10, nu=3, alpha=c * alpha, k_max=10)
    a = kam.diophantine_check([w1, w2], p)
    b = kam.diophantine_check([c * w1, c * w2], q)
    if abs(a[2]) > 1e-9 * alpha:  # skip boundary cases lost to rounding
        assert a[0] == b[0]


# -- persistence scan --------------------------------------------------------

def test_scan_zero_eta_survives(scan):
    assert scan.survival[0.0] == 1.0
    for r in scan.rows_for(0.0):
        assert np.all(np.abs(r.omega - r.omega0) <= r.omega_error + 1e-12)


def test_scan_small_eta_drift(scan):
    for r in scan.rows_for(1e-3):
        assert r.drift <= 10 * 1e-3


def test_scan_survival_non_increasing(scan):
    s = [scan.survival[e] for e in SCAN_ETAS]
    assert all(0.0 <= v <= 1.0 for v in s)
    assert all(b <= a for a, b in zip(s, s[1:]))
    assert s[-1] < 1.0 and scan.slope is not None


def test_scan_drift_shrinks_with_eta(scan):
    for i in range(5):
        d = scan.drifts(i)
        assert np.all(np.diff(d) >= -1e-9)


def test_scan_outputs(scan, tmp_path):
    text = scan.to_csv(tmp_path / "scan.csv")
    lines = text.splitlines()
    assert lines[0] == "eta,I0_1,I0_2,omega_1,omega_2,drift,osc,survived"
    assert len(lines) == 1 + 5 * 5
    assert (tmp_path / "scan.csv").read_text() == text
    summ = scan.summary()
    assert "drift_tol = 0.001" in summ and "log-log slope" in summ


def test_scan_preconditions():
    p = kam.KAMParams(l=10, nu=3, alpha=1e-3)
    with pytest.raises(ContractViolation, match="Hamiltonian-columns"):
        kam.torus_persistence_scan(h.twist2d(), nz.make_field("diag_sqrt", n=2), [0.0],
                                   kam.golden_actions([0.3]), 10.0, 100, p)
    with pytest.raises(ContractViolation, match="Diophantine"):
        kam.torus_persistence_scan(h.twist2d(), nz.identity(2), [0.0], [[0.3, 0.6]], 10.0, 100, p)
    with pytest.raises(ContractViolation):
        kam.torus_persistence_scan(h.harmonic(), nz.identity(), [0.0], [[0.3]], 10.0, 100, p)
    with pytest.raises(ContractViolation):
        kam.torus_persistence_scan(h.twist2d(), nz.identity(2), [-0.1], kam.golden_actions([0.3]), 10.0, 100, p)


def test_scan_records_estimation_failures():
    p = kam.KAMParams(l=10, nu=3, alpha=1e-3)
    rep = kam.torus_persistence_scan(h.twist2d(), nz.identity(2), [0.0], kam.golden_actions([0.3, 3.0]),
                                     20.0, 20, p)
    assert rep.failures[0.0] == 1
    bad = [r for r in rep.rows if r.error]
    assert len(bad) == 1 and not bad[0].survived and bad[0].omega is None
    assert rep.survival[0.0] == 1.0
