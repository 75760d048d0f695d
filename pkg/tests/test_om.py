import math

import numpy as np
import pytest

from stochkam import hamiltonian as h
from stochkam import noise as nz
from stochkam import om
from stochkam.errors import ContractViolation, NearSingularError
from stochkam.paths import DiscretePath

FIELDS = {"identity": nz.identity(), "diag_poly": nz.diag_poly(), "diag_sqrt": nz.diag_sqrt()}
C4_FIELDS = ["identity", "diag_poly"]


def smooth_path(rng, T=1.0, N=100, x0=None):
    a = rng.normal(scale=0.3, size=(3, 2))
    w = rng.uniform(0.5, 3.0, size=3)
    base = rng.uniform(-0.4, 0.4, size=2) if x0 is None else np.asarray(x0)

    def f(t):
        return base + sum(a[j] * np.sin(w[j] * t) for j in range(3))

    return DiscretePath.from_function(f, T, N)


def rough_path(rng, N=40, T=1.0):
    return DiscretePath(T, rng.uniform(-0.8, 0.8, size=(N + 1, 2)))


def fd_gradient(sys, fld, path, step=1e-6):
    v = path.values.copy()
    g = np.zeros((path.N - 1, path.dim))
    for k in range(1, path.N):
        for c in range(path.dim):
            v[k, c] += step
            up = om.om_action(sys, fld, DiscretePath(path.T, v)).total
            v[k, c] -= 2 * step
            dn = om.om_action(sys, fld, DiscretePath(path.T, v)).total
            v[k, c] += step
            g[k - 1, c] = (up - dn) / (2 * step)
    return g


def rel_err(g, ref):
    floor = 1e-3 * np.max(np.abs(ref))
    return np.max(np.abs(g - ref) / np.maximum(np.abs(ref), floor))


def test_action_on_flow_path():
    sys = h.harmonic()
    p = h.deterministic_flow(sys, [1.0, 0.0], 2.0, 2000)
    b = om.om_action(sys, nz.identity(), p)
    assert b.quadratic_term <= 1e-6 and b.divergence_term == 0.0


def test_action_on_implicit_midpoint_orbit_vanishes():
    sys = h.pendulum()
    p = h.deterministic_flow(sys, [1.0, 0.2], 2.0, 200, scheme="midpoint")
    assert om.om_action(sys, nz.identity(), p).quadratic_term <= 1e-20


def test_action_constant_path_closed_form():
    b = om.om_action(h.harmonic(), nz.identity(), DiscretePath.constant([1.0, 0.0], 1.0, 50))
    assert abs(b.total - 1.0) <= 1e-4
    assert b.N == 50 and b.quadrature == "midpoint"


def test_action_against_richardson_reference(rng):
    sys, fld = h.pendulum(), nz.diag_sqrt()
    a = rng.normal(scale=0.3, size=(2, 2))

    def f(t):
        return np.array([0.2, -0.1]) + a[0] * np.sin(2 * t) + a[1] * np.cos(3 * t)

    vals = [om.om_action(sys, fld, DiscretePath.from_function(f, 1.0, N)).total for N in (100, 1600, 3200)]
    ref = (4 * vals[2] - vals[1]) / 3
    assert abs(vals[0] - ref) <= 1e-4 * abs(ref)


@pytest.mark.parametrize("name", sorted(FIELDS))
def test_breakdown_invariants(name, rng):
    for _ in range(5):
        b = om.om_action(h.pendulum(), FIELDS[name], rough_path(rng))
        assert b.quadratic_term >= 0
        assert abs(b.total - (b.quadratic_term - b.divergence_term)) <= 1e-12 * max(1.0, abs(b.total))


@pytest.mark.parametrize("name", C4_FIELDS)
def test_divergence_term_vanishes_under_c4(name, rng):
    for _ in range(10):
        p = rough_path(rng, N=60)
        assert abs(om.om_action(h.pendulum(), FIELDS[name], p).divergence_term) <= 1e-12 * p.N


def test_divergence_term_nonzero_without_c4():
    p = h.deterministic_flow(h.harmonic(), [0.8, 0.0], 1.0, 100)
    assert abs(om.om_action(h.harmonic(), nz.diag_sqrt(), p).divergence_term) >= 0.01


def test_quadrature_is_second_order(rng):
    sys, fld = h.pendulum(), nz.diag_poly()
    a = rng.normal(scale=0.3, size=2)

    def f(t):
        return np.array([0.3, 0.1]) + a * np.sin(2.5 * t)

    tot = [om.om_action(sys, fld, DiscretePath.from_function(f, 1.0, N)).total for N in (50, 100, 200)]
    d1, d2 = abs(tot[0] - tot[1]), abs(tot[1] - tot[2])
    assert 3.0 <= d1 / d2 <= 5.0


def test_action_near_singular_reports_interval():
    p = DiscretePath(1.0, np.array([[0.5, 0.0], [0.5, 0.0], [0.02, 0.0], [0.0, 0.0]]))
    with pytest.raises(NearSingularError) as ei:
        om.om_action(h.free(), nz.diag_linear(0.1), p)
    assert ei.value.index == 1


def test_action_contract():
    with pytest.raises(ContractViolation):
        om.om_action(h.harmonic(), nz.identity(), DiscretePath.constant([0, 0], 1.0, 1))
    with pytest.raises(ContractViolation):
        om.om_action(h.harmonic(2), nz.identity(), DiscretePath.constant([0, 0], 1.0, 5))


# -- rate function -----------------------------------------------------------

def test_rate_function_examples():
    sys = h.harmonic()
    flow = h.deterministic_flow(sys, [1.0, 0.0], 1.0, 1000)
    r = om.rate_function(sys, nz.identity(), flow, [1.0, 0.0])
    assert r.finite and r.value <= 1e-6
    r = om.rate_function(sys, nz.identity(), DiscretePath.constant([1.0, 0.0], 1.0, 100), [1.0, 0.0])
    assert r.finite and abs(r.value - 0.5) <= 1e-4
    r = om.rate_function(sys, nz.identity(), flow, [1.0, 1e-12])
    assert not r.finite and math.isinf(r.value)


@pytest.mark.parametrize("name", sorted(FIELDS))
def test_rate_is_half_quadratic(name, rng):
    p = rough_path(rng)
    r = om.rate_function(h.pendulum(), FIELDS[name], p, p.values[0])
    assert r.value == 0.5 * om.om_action(h.pendulum(), FIELDS[name], p).quadratic_term


# -- gradient ----------------------------------------------------------------

@pytest.mark.parametrize("sysname", ["harmonic", "pendulum"])
@pytest.mark.parametrize("name", sorted(FIELDS))
def test_gradient_matches_finite_differences(sysname, name, rng):
    sys, fld = h.make_system(sysname), FIELDS[name]
    for _ in range(3):
        p = rough_path(rng, N=12)
        assert rel_err(om.om_gradient(sys, fld, p), fd_gradient(sys, fld, p)) <= 1e-6


def test_gradient_with_finite_difference_second_derivatives(rng):
    base = nz.diag_sqrt()
    from dataclasses import replace
    fld = replace(base, sigma_second=None)
    p = rough_path(rng, N=10)
    sys = h.pendulum()
    assert rel_err(om.om_gradient(sys, fld, p), fd_gradient(sys, fld, p)) <= 1e-5


def test_gradient_vanishes_at_minimiser():
    sys = h.harmonic()
    p = h.deterministic_flow(sys, [1.0, 0.0], 1.0, 200, scheme="midpoint")
    assert np.max(np.abs(om.om_gradient(sys, nz.identity(), p))) <= 1e-6


def test_gradient_refinement_consistency(rng):
    sys, fld = h.pendulum(), nz.diag_poly()
    a = rng.normal(scale=0.3, size=2)

    def f(t):
        return np.array([0.3, 0.1]) + a * np.sin(2.0 * t) + np.array([0.1, -0.2]) * t

    diffs = []
    for N in (50, 100, 200):
        g1 = om.om_gradient(sys, fld, DiscretePath.from_function(f, 1.0, N)) / (1.0 / N)
        g2 = om.om_gradient(sys, fld, DiscretePath.from_function(f, 1.0, 2 * N)) / (0.5 / N)
        diffs.append(np.max(np.abs(g1 - g2[1::2])))
    assert diffs[1] < diffs[0] and diffs[2] < diffs[1]
    assert diffs[0] / diffs[2] >= 3.0


def test_gradient_needs_interior():
    with pytest.raises(ContractViolation):
        om.om_gradient(h.harmonic(), nz.identity(), DiscretePath.constant([0, 0], 1.0, 2))


# -- most probable paths -------------------------------------------------------

def test_mpp_free_is_straight_line():
    res = om.solve_mpp(h.free(), nz.identity(), [0.0, 0.2], [1.0, -0.5], 1.0, 50,
                       init=DiscretePath(1.0, np.vstack([[0.0, 0.2],
                                                         np.random.default_rng(1).uniform(-1, 1, (49, 2)),
                                                         [1.0, -0.5]])))
    line = DiscretePath.straight_line([0.0, 0.2], [1.0, -0.5], 1.0, 50)
    assert res.converged and res.path.sup_distance(line) <= 1e-8


def test_mpp_harmonic_recovers_orbit():
    sys = h.harmonic()
    x0 = np.array([1.0, 0.0])
    T, N = 1.5, 300
    xT = h.deterministic_flow(sys, x0, T, N).end
    res = om.solve_mpp(sys, nz.identity(), x0, xT, T, N)
    t = np.linspace(0, T, N + 1)
    exact = np.stack([np.cos(t), -np.sin(t)], axis=1)
    assert res.converged
    assert np.max(np.abs(res.path.values - exact)) <= 1e-3
    assert res.action.total <= 1e-6


def test_mpp_basin_stability(rng):
    sys, fld = h.pendulum(), nz.diag_poly()
    x0, xT = np.array([0.3, 0.0]), np.array([-0.2, 0.4])
    T, N = 1.0, 60
    a = om.solve_mpp(sys, fld, x0, xT, T, N)
    init = DiscretePath.straight_line(x0, xT, T, N).values.copy()
    init[1:-1] += rng.uniform(-0.1, 0.1, size=(N - 1, 2))
    b = om.solve_mpp(sys, fld, x0, xT, T, N, init=DiscretePath(T, init))
    assert a.converged and b.converged
    assert a.path.sup_distance(b.path) <= 1e-6


def test_mpp_minimiser_invariant_under_constant_scaling():
    sys = h.pendulum()
    x0, xT = np.array([0.3, 0.0]), np.array([-0.2, 0.4])
    A = np.array([[1.0, 0.2], [0.2, 0.8]])
    a = om.solve_mpp(sys, nz.constant_field(A), x0, xT, 1.0, 50)
    b = om.solve_mpp(sys, nz.constant_field(3.0 * A), x0, xT, 1.0, 50)
    assert a.path.sup_distance(b.path) <= 1e-8
    assert math.isclose(b.action.total, a.action.total / 9.0, rel_tol=1e-6)


def test_mpp_grid_refinement_converges():
    sys, fld = h.pendulum(), nz.diag_poly()
    x0, xT = np.array([0.3, 0.0]), np.array([-0.2, 0.4])
    dists = []
    sols = {N: om.solve_mpp(sys, fld, x0, xT, 1.0, N).path for N in (25, 50, 100)}
    for N in (25, 50):
        dists.append(np.max(np.abs(sols[N].values - sols[2 * N].values[::2])))
    assert dists[1] < dists[0]
    assert dists[0] * 25 <= 1.0


def test_mpp_reports_non_convergence():
    res = om.solve_mpp(h.pendulum(), nz.diag_poly(), [0.3, 0.0], [-0.2, 0.4], 1.0, 40, max_iter=2)
    assert res.grad_norm > 0 and res.iterations >= 2
    if not res.converged:
        assert "above tolerance" in res.message


def test_mpp_contract():
    with pytest.raises(ContractViolation):
        om.solve_mpp(h.free(), nz.identity(), [0, 0], [1, 1], 1.0, 2)
    with pytest.raises(ContractViolation):
        om.solve_mpp(h.free(), nz.identity(), [0, 0], [1, 1], 1.0, 10,
                     init=DiscretePath.straight_line([0, 0], [1, 2], 1.0, 10))


# -- Euler-Lagrange residual --------------------------------------------------

def test_el_residual_straight_line():
    p = DiscretePath.straight_line([0.0, 0.0], [1.0, -2.0], 1.0, 30)
    m, norms = om.euler_lagrange_residual(h.free(), nz.identity(), p)
    assert m <= 1e-10 and norms.shape == (29,)


def test_el_residual_decreases_on_minimisers():
    sys, fld = h.pendulum(), nz.diag_poly()
    res = [om.euler_lagrange_residual(sys, fld, om.solve_mpp(sys, fld, [0.3, 0.0], [-0.2, 0.4], 1.0, N).path)[0]
           for N in (25, 50, 100)]
    assert res[2] < res[1] < res[0]


def test_el_residual_negative_control():
    sys = h.harmonic()
    fwd = h.deterministic_flow(sys, [1.0, 0.0], 1.0, 100)
    rev = DiscretePath(1.0, fwd.values[::-1].copy())
    assert om.euler_lagrange_residual(sys, nz.identity(), rev)[0] >= 0.1
    assert om.euler_lagrange_residual(sys, nz.identity(), fwd)[0] <= 1e-3


# -- deterministic flow as minimiser -----------------------------------------

@pytest.mark.parametrize("sysname", ["harmonic", "pendulum"])
@pytest.mark.parametrize("name", C4_FIELDS)
def test_verify_flow_is_most_probable(sysname, name):
    rep = om.verify_theorem2(h.make_system(sysname), FIELDS[name], [0.5, 0.3], 2.0, 200)
    assert rep.passed and rep.status == "pass"
    assert rep.action <= 1e-6 and rep.distance <= 1e-3 and abs(rep.divergence_term) <= 1e-10
    assert rep.to_dict()["mpp"]["converged"]


def test_verify_skips_without_c4():
    rep = om.verify_theorem2(h.harmonic(), nz.diag_sqrt(), [0.5, 0.3], 2.0, 200)
    assert rep.passed is None and rep.status.startswith("skipped")
    assert abs(rep.divergence_term) > 1e-3
