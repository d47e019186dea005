import threading
import time

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.integrate import quad, solve_ivp

from axonctl.controller import GainVector, default_gains
from axonctl.kernels import (KernelCache, PhiKernel, build_kernel_set, dump_kernels, k_eval,
                             k_x_eval, kernel_residuals, n1_matrix, p_eval, solve_q_psi)
from axonctl.model import PhysicalParams, system_matrices

from conftest import param_strategy


def _phi_ivp(params, mats, K, s_end):
    """phi on [0, s_end] by integrating the second-order row ODE directly."""
    D, a, g = params.D, params.a, params.g
    BC = np.outer(mats.B, mats.C)
    G0 = (g * np.eye(2) + mats.A + (a / D) * BC) / D
    G1 = (a * np.eye(2) - BC) / D

    def rhs(s, y):
        f, df = y[:2], y[2:]
        return np.concatenate([df, f @ G0 + df @ G1])

    y0 = np.concatenate([mats.C, K - float(mats.C @ mats.B) * mats.C / D])
    return solve_ivp(rhs, (0.0, s_end), y0, rtol=1e-12, atol=1e-14, dense_output=True)


def _phi_taylor(phi, s, terms=30):
    """Truncated exponential series of the first-order generator."""
    out = np.zeros(4)
    term = phi.init.copy()
    for k in range(terms):
        out += term
        term = term @ phi.N1 * s / (k + 1)
    return out


def test_phi_matches_ivp_oracle(params, mats, gains, phi):
    s = np.linspace(-1.5, 0.0, 16)
    sol = _phi_ivp(params, mats, gains.as_array(), -1.5)
    f, df = phi(s)
    ref = sol.sol(s).T
    np.testing.assert_allclose(f, ref[:, :2], rtol=1e-9, atol=1e-11)
    np.testing.assert_allclose(df, ref[:, 2:], rtol=1e-9, atol=1e-11)


def test_phi_matches_taylor_series(phi):
    for s in (-1.2, -0.4, 0.3):
        np.testing.assert_allclose(phi.rows(s)[0], _phi_taylor(phi, s), rtol=1e-12, atol=1e-14)


def test_phi_second_derivative_finite_difference(phi):
    s, h = -0.7, 1e-5
    fd = (phi(np.array([s + h]))[1] - phi(np.array([s - h]))[1]) / (2 * h)
    np.testing.assert_allclose(phi.second(s), fd, rtol=1e-7)


@given(param_strategy(), st.floats(0.0, 3.0), st.floats(0.0, 3.0))
def test_phi_boundary_values_and_diagonal(p, dk1, k2):
    mats = system_matrices(p)
    K = default_gains(mats).as_array() + np.array([dk1, k2])
    phi = PhiKernel(mats, K, p.D, p.a, p.g)
    f0, df0 = phi(np.array([0.0]))
    np.testing.assert_allclose(f0[0], mats.C, atol=1e-12)
    np.testing.assert_allclose(df0[0], K - float(mats.C @ mats.B) * mats.C / p.D, atol=1e-12)
    x = np.linspace(0.0, 2 * p.l_s, 9)
    np.testing.assert_allclose(k_eval(x, x, phi, mats.B, p.D), -1.0 / p.l_c, rtol=1e-10)


def test_n1_block_structure(mats, params):
    N1 = n1_matrix(mats, params.D, params.a, params.g)
    np.testing.assert_array_equal(N1[:2, :2], 0.0)
    np.testing.assert_array_equal(N1[2:, :2], np.eye(2))


def test_k_depends_on_difference_only(phi, mats, params):
    x = np.array([0.3, 0.8, 1.1])
    np.testing.assert_allclose(k_eval(x, x - 0.2, phi, mats.B, params.D),
                               k_eval(x + 0.5, x + 0.3, phi, mats.B, params.D), rtol=1e-13)
    h = 1e-6
    fd = (k_eval(0.4 + h, 0.1, phi, mats.B, params.D) - k_eval(0.4 - h, 0.1, phi, mats.B, params.D)) / (2 * h)
    assert float(k_x_eval(0.4, 0.1, phi, mats.B, params.D)) == pytest.approx(float(fd), rel=1e-7)


def test_initial_slice_and_coupling(params, mats, phi):
    g = solve_q_psi(1.0, mats, phi, params, 40, 60)
    np.testing.assert_allclose(g.q[0], k_x_eval(0.0, g.y, phi, mats.B, params.D), rtol=1e-14)
    np.testing.assert_allclose(g.psi[0], -phi(np.array([-1.0]))[1][0], rtol=1e-14)
    # q(x, l) = -psi(x - l) B / D on every marching step
    np.testing.assert_allclose(g.q[:, -1], -(g.psi @ mats.B) / params.D, atol=1e-13)


def test_point_kernel_discrete_delta(params, mats, phi):
    g = solve_q_psi(1.0, mats, phi, params, 10, 50, "point")
    w = np.full(g.y.size, g.dy)
    w[0] = w[-1] = 0.5 * g.dy
    assert np.dot(w, g.q[0]) == pytest.approx(1.0)
    np.testing.assert_array_equal(g.psi[0], 0.0)


def _diff_orders(grids, step):
    d_row, d_psi, d_trace = [], [], []
    for g1, g2 in zip(grids[:-1], grids[1:]):
        sx, sy = step
        q2, p2 = g2.q[::sx, ::sy], g2.psi[::sx]
        d_row.append(np.abs(g1.q[-1] - q2[-1]).max())
        d_psi.append(np.abs(g1.psi - p2).max())
        sel = g1.x >= g1.x[-1] / 4 - 1e-12
        d_trace.append(np.abs(g1.q[sel, 0] - q2[sel, 0]).max())
    return [np.log2(np.array(d[:-1]) / np.array(d[1:])) for d in (d_row, d_psi, d_trace)]


def test_refinement_orders_small(params, mats, phi):
    dx = _diff_orders([solve_q_psi(1.0, mats, phi, params, nx, 200) for nx in (25, 50, 100, 200)],
                      (2, 1))
    dy = _diff_orders([solve_q_psi(1.0, mats, phi, params, 200, ny) for ny in (25, 50, 100, 200)],
                      (1, 2))
    for o in dx:
        assert np.all(o >= 0.9)
    for o in dy:
        assert np.all(o >= 1.8)


def test_kernel_residual_report(params, mats, phi):
    coarse = kernel_residuals(solve_q_psi(1.0, mats, phi, params, 50, 50), mats, params)
    fine = kernel_residuals(solve_q_psi(1.0, mats, phi, params, 100, 100), mats, params)
    assert fine["boundary_coupling"] < 1e-12
    assert fine["psi_ode"] < 0.6 * coarse["psi_ode"]
    assert set(fine) == {"boundary_coupling", "robin", "pde", "psi_ode"}


def _upwind_p(g, D, D_e, ny):
    """First-order upwind solve of p_x + p_y = 0 on [D_e/2, D_e] x [0, D_e/2].

    Inflow p(x, 0) = -D q(x, 0); the slice x = D_e/2 comes from p_eval.
    """
    hy = 0.5 * D_e / ny
    hx = 0.5 * hy
    y = np.linspace(0.0, 0.5 * D_e, ny + 1)
    x = 0.5 * D_e
    p = p_eval(x, y, g, D)
    for _ in range(2 * ny):
        x += hx
        p[1:] = p[1:] - hx / hy * (p[1:] - p[:-1])
        p[0] = -D * np.interp(x, g.x, g.q[:, 0])
    return y, p


def test_p_transport_residual_is_first_order(params, mats, phi):
    g = solve_q_psi(1.0, mats, phi, params, 800, 100)
    errs = []
    for ny in (20, 40, 80):
        y, p = _upwind_p(g, params.D, params.D_e, ny)
        errs.append(np.abs(p - p_eval(params.D_e, y, g, params.D)).max())
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(orders > 0.8), (errs, orders)
    with pytest.raises(ValueError):
        p_eval(0.1, 0.2, g, params.D)


def test_zero_delay_has_single_slice(mats, phi):
    p = PhysicalParams(D_e=0.0)
    g = solve_q_psi(1.0, mats, phi, p, 400, 50)
    assert g.x.size == 1 and g.q.shape == (1, 51)


def test_kernel_set_combination(params, mats, phi):
    ks = build_kernel_set(1.0, mats, phi, params, 20, 40)
    assert ks.point_weight == pytest.approx(1.0 / params.l_c)
    np.testing.assert_allclose(ks.q_table(), ks.smooth.q + ks.point_weight * ks.point.q)
    np.testing.assert_allclose(ks.q_at(params.D_e), ks.q_table()[-1])
    mid = 0.5 * (ks.x[3] + ks.x[4])
    np.testing.assert_allclose(ks.psi_at(mid), 0.5 * (ks.psi_table()[3] + ks.psi_table()[4]))
    with pytest.raises(ValueError):
        ks.q_at(params.D_e * 1.5)
    bare = build_kernel_set(1.0, mats, phi, params, 20, 40, point_term=False)
    assert bare.point is None
    np.testing.assert_array_equal(bare.q_table(), bare.smooth.q)


def test_cache_nearest_and_bracket():
    built = []

    def builder(l):
        built.append(l)
        return type("KS", (), {"l_snap": l})()

    cache = KernelCache(builder, 0.1)
    a = cache.get(1.01)
    assert a.l_snap == pytest.approx(1.0)
    assert cache.get(0.97) is a and cache.hits == 1 and cache.misses == 1
    lo, hi, th = cache.bracket(1.04)
    assert lo is a and hi.l_snap == pytest.approx(1.1) and th == pytest.approx(0.4)
    with pytest.raises(ValueError):
        cache.get(0.0)
    with pytest.raises(ValueError):
        cache.at_key(0)
    with pytest.raises(ValueError):
        KernelCache(builder, 0.0)


def test_cache_concurrent_lookups_build_once():
    calls = []

    def builder(l):
        calls.append(l)
        time.sleep(0.02)
        return type("KS", (), {"l_snap": l})()

    cache = KernelCache(builder, 0.05)
    out = []
    threads = [threading.Thread(target=lambda: out.append(cache.get(1.0))) for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert len(calls) == 1
    assert all(o is out[0] for o in out)


def test_dump_columns(tmp_path, params, mats, phi):
    ks = build_kernel_set(1.0, mats, phi, params, 4, 5)
    dump_kernels(ks, tmp_path / "q.csv", tmp_path / "psi.csv")
    q_lines = (tmp_path / "q.csv").read_text().splitlines()
    psi_lines = (tmp_path / "psi.csv").read_text().splitlines()
    assert q_lines[0] == "x,y,q" and len(q_lines) == 1 + 5 * 6
    assert psi_lines[0] == "x,psi1,psi2" and len(psi_lines) == 1 + 5
    vals = np.loadtxt(tmp_path / "q.csv", delimiter=",", skiprows=1)
    np.testing.assert_allclose(vals[:, 2].reshape(5, 6), ks.q_table(), rtol=1e-11)


def test_l5_constant_against_quadrature(params, mats, phi):
    from axonctl.diagnostics import estimate_L_constants
    L = estimate_L_constants(phi, mats, params, [1.0], n_quad=400)
    ref, _ = quad(lambda x: float(np.sum(phi(np.array([x - 1.0]))[0] ** 2)), 0.0, 1.0,
                  epsabs=1e-13)
    assert L["L5"] == pytest.approx(ref, rel=1e-5)
    assert L["unhoused"] == ["L8"]


def test_gain_vector_enters_phi_slope(params, mats):
    K = GainVector(3.0, -0.5).as_array()
    phi = PhiKernel(mats, K, params.D, params.a, params.g)
    df0 = phi(np.array([0.0]))[1][0]
    np.testing.assert_allclose(df0 - K, -float(mats.C @ mats.B) * mats.C / params.D)
