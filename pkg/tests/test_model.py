import dataclasses

import numpy as np
import pytest
from hypothesis import assume, given, strategies as st

from axonctl.model import (ParameterError, PhysicalParams, compute_steady_state,
                           error_coordinates, h_bar, h_bar_expanded, h_bar_rate, h_tilde,
                           local_z2_radius, physical_coordinates, system_matrices)

from conftest import param_strategy


def _oracle_steady_state(p):
    """Roots of the characteristic polynomial and the 2x2 boundary solve."""
    lam = np.sort(np.roots([p.D, -p.a, -p.g]).real)[::-1]
    # c(l_s) = c_inf and D c'(l_s) = (a - g l_c) c_inf
    M = np.array([[1.0, 1.0], [p.D * lam[0], p.D * lam[1]]])
    K = np.linalg.solve(M, [1.0, p.a - p.g * p.l_c])
    return lam, K


@given(param_strategy())
def test_steady_state_matches_direct_solve(p):
    # a = g = 0 merges the two modes and the boundary solve is singular
    assume(p.a**2 + 4 * p.D * p.g > 1e-8)
    ss = compute_steady_state(p)
    lam, K = _oracle_steady_state(p)
    assert ss.lambda_plus == pytest.approx(lam[0], rel=1e-10, abs=1e-12)
    assert ss.lambda_minus == pytest.approx(lam[1], rel=1e-10, abs=1e-12)
    assert ss.K_plus == pytest.approx(K[0], rel=1e-9, abs=1e-10)
    assert ss.K_minus == pytest.approx(K[1], rel=1e-9, abs=1e-10)


@given(param_strategy())
def test_steady_state_identities(p):
    ss = compute_steady_state(p)
    for lam in (ss.lambda_plus, ss.lambda_minus):
        scale = p.D * lam**2 + abs(p.a * lam) + p.g
        assert abs(p.D * lam**2 - p.a * lam - p.g) <= 1e-12 * scale
    assert ss.K_plus + ss.K_minus == pytest.approx(1.0, abs=1e-14)
    assert ss.c_eq(p.l_s) == pytest.approx(p.c_inf, rel=1e-12)
    assert ss.q_s_star == pytest.approx(-ss.c_eq(0.0, 1), rel=1e-12, abs=1e-15)


@given(param_strategy())
def test_equilibrium_solves_stationary_pde(p):
    ss = compute_steady_state(p)
    x = np.linspace(0.0, p.l_s, 33)
    c, cx, cxx = ss.c_eq(x), ss.c_eq(x, 1), ss.c_eq(x, 2)
    res = p.D * cxx - p.a * cx - p.g * c
    scale = np.abs(p.D * cxx) + np.abs(p.a * cx) + np.abs(p.g * c) + 1e-300
    assert np.all(np.abs(res) <= 1e-10 * scale)


def test_equilibrium_derivative_against_finite_difference(params):
    ss = compute_steady_state(params)
    x = np.linspace(0.1, 0.9, 9)
    h = 1e-5
    fd = (ss.c_eq(x + h) - ss.c_eq(x - h)) / (2 * h)
    np.testing.assert_allclose(ss.c_eq(x, 1), fd, rtol=1e-8)


def test_default_system_matrices(params):
    m = system_matrices(params)
    assert m.a_tilde == pytest.approx((0.1 - 0.5) / 0.5 - 0.1 - 0.05)
    assert m.beta == pytest.approx(2.0)
    assert m.kappa == pytest.approx(1.0)
    np.testing.assert_allclose(m.A, [[m.a_tilde, 0.0], [0.5, 0.0]])
    np.testing.assert_allclose(m.B, [-2.0, 0.0])
    np.testing.assert_allclose(m.C, [1.0, -0.05])
    with pytest.raises(ValueError):
        m.A[0, 0] = 1.0


def test_parameter_validation_lists_every_violation():
    with pytest.raises(ParameterError) as exc:
        PhysicalParams(D=-1.0, l_s=0.0, g=-0.5)
    names = " ".join(exc.value.violations)
    assert "D must be" in names and "l_s must be" in names and "g must be" in names
    assert len(exc.value.violations) == 3


@pytest.mark.parametrize("field", ["D", "l_c", "r_g", "c_inf", "l_s"])
def test_nonpositive_fields_rejected(field):
    with pytest.raises(ParameterError, match=field):
        PhysicalParams(**{field: 0.0})


def test_params_are_immutable(params):
    with pytest.raises(dataclasses.FrozenInstanceError):
        params.D = 2.0
    q = params.replace(D=2.0)
    assert q.D == 2.0 and params.D == 1.0


def test_admits_domain_bound_boundary():
    p = PhysicalParams(D=1.0, a=0.1)
    assert p.admits_domain_bound(2.5)
    assert not p.admits_domain_bound(2.5001)


@given(param_strategy(), st.floats(-0.3, 0.3), st.floats(-1.0, 1.0))
def test_h_bar_forms_agree(p, s, z1):
    ss = compute_steady_state(p)
    C = system_matrices(p).C
    z2 = s / max(abs(ss.lambda_plus), abs(ss.lambda_minus), 1.0)
    a = h_bar([z1, z2], ss, C)
    b = h_bar_expanded(z2, ss)
    assert a == pytest.approx(b, abs=1e-12 * max(1.0, p.c_inf))


def test_h_bar_taylor_limit(params):
    ss = compute_steady_state(params)
    curv = -0.5 * params.c_inf * (ss.K_plus * ss.lambda_plus**2 + ss.K_minus * ss.lambda_minus**2)
    for z2 in (1e-2, 1e-3, 1e-4):
        assert h_bar_expanded(z2, ss) / z2**2 == pytest.approx(curv, rel=2 * z2)
    # quadratic bound inside the local radius
    r = local_z2_radius(ss)
    z = np.linspace(-r, r, 201)
    assert np.all(np.abs(h_bar_expanded(z, ss)) <= 2 * ss.k_n * z**2 + 1e-15)


def test_h_tilde_zero_at_target(params):
    ss = compute_steady_state(params)
    assert h_tilde(0.0, ss) == pytest.approx(0.0, abs=1e-15)


def test_h_bar_rate_matches_chain_rule(params):
    ss = compute_steady_state(params)
    C = system_matrices(params).C
    X = np.array([0.03, -0.02])
    dt = 1e-6
    dX = np.array([0.0, params.r_g * X[0]])
    # only z2 moves the z2-dependent part; z1 terms cancel in h_bar
    fd = (h_bar_expanded(X[1] + dt * dX[1], ss) - h_bar_expanded(X[1] - dt * dX[1], ss)) / (2 * dt)
    assert h_bar_rate(X, ss, params.r_g) == pytest.approx(fd, rel=1e-6)
    assert h_bar(X, ss, C) == pytest.approx(h_bar_expanded(X[1], ss), abs=1e-15)


@given(param_strategy(), st.integers(0, 2**32 - 1))
def test_coordinates_round_trip(p, seed):
    rng = np.random.default_rng(seed)
    ss = compute_steady_state(p)
    l = p.l_s * rng.uniform(0.5, 1.5)
    x = np.linspace(0.0, l, 17)
    c = ss.c_eq(x) + rng.normal(size=x.size)
    c_c, q_s = rng.normal() + p.c_inf, rng.normal()
    u, X, U = error_coordinates(c, x, c_c, l, q_s, ss)
    c2, cc2, l2, qs2 = physical_coordinates(u, x, X, U, ss)
    np.testing.assert_allclose(c2, c, rtol=1e-12, atol=1e-12)
    assert (cc2, l2) == pytest.approx((c_c, l), rel=1e-12)
    assert qs2 == pytest.approx(q_s, rel=1e-12, abs=1e-12)


def test_error_coordinates_rejects_grid_outside_domain(params):
    ss = compute_steady_state(params)
    with pytest.raises(ValueError, match="exceeds domain"):
        error_coordinates(np.zeros(3), [0.0, 0.5, 1.2], 1.0, 1.0, 0.0, ss)
