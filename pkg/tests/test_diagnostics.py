import numpy as np
import pytest
from hypothesis import given, strategies as st

from axonctl.controller import default_gains
from axonctl.diagnostics import (LyapunovWeights, SnapshotKernels, WeightSelectionError,
                                 fit_decay, lyapunov_eval, lyapunov_matrix,
                                 norm_equivalence_bounds, select_weights, v_monotone_after,
                                 varpi_profile)
from axonctl.model import PhysicalParams, compute_steady_state, h_bar, system_matrices


@pytest.fixture(scope="module")
def prov():
    return SnapshotKernels(PhysicalParams(), ny=81, nx=50)


@pytest.fixture
def setup(params, mats, gains):
    P = lyapunov_matrix(mats, gains)
    W = select_weights(params, mats, P, 1.5 * params.l_s)
    ss = compute_steady_state(params)
    return P, W, ss, norm_equivalence_bounds(params, W, P, ss.k_n)


def _random_state(ops, rng, scale):
    return (rng.normal(size=ops.M) * scale, rng.normal(size=ops.n + 1) * scale,
            rng.normal(size=2) * scale)


def _eval(ops, u, v, X, W, P, ss, mats):
    w, z = ops.forward(u, v, X)
    vp = varpi_profile(w, ops.x, z[0], ops.l, float(h_bar(X, ss, mats.C)))
    return lyapunov_eval(vp, ops.x, z, ops.xd, X, W, P, w=w, u=u, v=v)


def test_round_trip(prov, rng):
    for l in (0.9, 1.0, 1.07):
        ops = prov.operators(l)
        u, v, X = _random_state(ops, rng, 1.0)
        w, z = ops.forward(u, v, X)
        u2, v2 = ops.inverse(w, z, X)
        np.testing.assert_allclose(u2, u, rtol=0, atol=1e-11)
        np.testing.assert_allclose(v2, v, rtol=0, atol=1e-11)


def test_transform_boundary_identities(prov, rng):
    ops = prov.operators(1.0)
    u, v, X = _random_state(ops, rng, 1.0)
    w, z = ops.forward(u, v, X)
    C = system_matrices(PhysicalParams()).C
    # the integral over [l, l] vanishes and phi(0) = C
    assert w[-1] == pytest.approx(u[-1] - C @ X, abs=1e-12)
    # z(0) = v(0) because the delay integrals start empty
    assert z[0] == pytest.approx(v[0] + ops.Zu[0] @ u + ops.ZX[0] @ X, abs=1e-12)


def test_transform_grid_mismatch(prov):
    ops = prov.operators(1.0)
    with pytest.raises(ValueError, match="grid mismatch"):
        ops.forward(np.zeros(3), np.zeros(ops.n + 1), np.zeros(2))


def test_lyapunov_matrix_solves_equation(mats, gains):
    P = lyapunov_matrix(mats, gains)
    Acl = mats.A + np.outer(mats.B, gains.as_array())
    np.testing.assert_allclose(Acl.T @ P + P @ Acl, -np.eye(2), atol=1e-12)
    assert np.all(np.linalg.eigvalsh(P) > 0)


def test_v_is_quadratic_without_ode_state(prov, setup, mats, rng):
    P, W, ss, _ = setup
    ops = prov.operators(1.0)
    u, v, _ = _random_state(ops, rng, 1.0)
    X = np.zeros(2)
    r1 = _eval(ops, u, v, X, W, P, ss, mats)
    r3 = _eval(ops, 3 * u, 3 * v, X, W, P, ss, mats)
    assert r3.V == pytest.approx(9 * r1.V, rel=1e-12)
    assert r3.Pi == pytest.approx(9 * r1.Pi, rel=1e-12)


def test_norm_sandwich_on_random_states(prov, setup, mats, rng):
    P, W, ss, b = setup
    for l in (0.95, 1.0, 1.05):
        ops = prov.operators(l)
        for scale in (1e-3, 1e-2):
            for _ in range(10):
                rep = _eval(ops, *_random_state(ops, rng, scale), W, P, ss, mats)
                assert b["delta_lo"] * rep.V <= rep.Pi <= b["delta_hi_weighted"] * rep.V


def test_printed_upper_constant_fails_on_pure_ode_state(setup, params):
    # varpi = 0 and z = 0 leave only d4 X^T P X in V while Pi >= |X|^2
    P, W, ss, b = setup
    x = np.linspace(0.0, params.l_s, 51)
    xd = np.linspace(0.0, params.D_e, 26)
    X = np.array([0.0, 0.01])
    w = np.full(x.size, float(h_bar(X, ss, system_matrices(params).C)))
    rep = lyapunov_eval(np.zeros(x.size), x, np.zeros(xd.size), xd, X, W, P, w=w)
    assert rep.V == pytest.approx(W.d4 * X @ P @ X)
    assert rep.Pi > b["delta_hi"] * rep.V
    assert rep.Pi <= b["delta_hi_weighted"] * rep.V


def test_default_weights(params, mats, setup):
    P, W, _, b = setup
    assert W.d1 == 1.0 and W.eps == pytest.approx(0.25)
    assert W.d2 == pytest.approx(39.36, rel=1e-3)
    assert W.d3 == pytest.approx(252.0, rel=1e-3)
    assert W.d4 == pytest.approx(0.00303, rel=1e-2)
    assert W.v_bar == pytest.approx((params.D - 0.5) / (8 * 1.5))
    # M1 = 4 De^3 l_bar + 4 De l_bar^3 = 7.5 sets both the printed upper constant and Sigma1
    assert b["M1"] == pytest.approx(7.5)
    assert b["delta_hi"] == pytest.approx(17.0)
    assert b["delta_lo"] == pytest.approx(1.0 / (W.d3 * np.exp(0.5) + 0.5 * 7.5 * 2.25))


def test_select_weights_errors(mats, gains):
    P = lyapunov_matrix(mats, gains)
    with pytest.raises(WeightSelectionError, match="l_bar"):
        select_weights(PhysicalParams(a=0.9), mats, P, 1.5)
    with pytest.raises(WeightSelectionError, match="g > 0"):
        select_weights(PhysicalParams(g=0.0), mats, P, 1.5)
    with pytest.raises(WeightSelectionError, match="eps"):
        select_weights(PhysicalParams(), mats, P, 1.5, eps=0.6)


@given(st.floats(0.2, 2.0), st.floats(1.0, 3.0))
def test_weights_monotone_in_l_bar(l1, factor):
    p = PhysicalParams(a=0.0)
    m = system_matrices(p)
    P = lyapunov_matrix(m, default_gains(m))
    # the d2 bound carries a decreasing D/(128 l_bar) part through d4; it is
    # dominated for l_bar >= sqrt(D)/8, the range tested here
    lo = max(l1, np.sqrt(p.D) / 8)
    w1 = select_weights(p, m, P, lo)
    w2 = select_weights(p, m, P, lo * factor)
    assert w2.d2 >= w1.d2 - 1e-12 * w1.d2
    assert w2.d3 >= w1.d3 - 1e-12 * w1.d3


def test_fit_decay_exact_exponential():
    t = np.linspace(0, 10, 101)
    fit = fit_decay(t, 3.0 * np.exp(-0.7 * t))
    assert fit.rate == pytest.approx(0.7, rel=1e-10)
    assert fit.r2 == pytest.approx(1.0)
    assert fit.decaying


def test_fit_decay_noisy_and_growing(rng):
    t = np.linspace(0, 10, 201)
    y = np.exp(-0.5 * t + 0.05 * rng.normal(size=t.size))
    fit = fit_decay(t, y)
    assert fit.rate == pytest.approx(0.5, abs=0.02) and fit.r2 > 0.95
    grow = fit_decay(t, np.exp(0.2 * t))
    assert not grow.decaying and grow.rate < 0


def test_fit_decay_truncates_at_first_nonpositive():
    t = np.linspace(0, 1, 11)
    y = np.exp(-t)
    y[6] = 0.0
    assert fit_decay(t, y, transient=0.0).n_points == 6
    with pytest.raises(ValueError):
        fit_decay(t[:2], y[:2])


def test_v_monotone_after():
    t = np.linspace(0, 10, 11)
    V = np.exp(-t)
    V[0] = 0.1  # transient bump
    assert v_monotone_after(t, V)[0]
    V2 = V.copy()
    V2[8] = V2[7] * 1.01
    ok, worst = v_monotone_after(t, V2)
    assert not ok and worst == pytest.approx(0.01)
    assert v_monotone_after(t, V2, t_start=8.5)[0]


def test_weights_dataclass_frozen():
    w = LyapunovWeights(1, 2, 3, 4, 1, 0.25, 0.1, 1.5)
    with pytest.raises(Exception):
        w.d1 = 5


def test_decay_rate_bounds_report(params, mats, gains, phi, setup):
    from axonctl.diagnostics import decay_rate_bounds, estimate_L_constants
    P, W, ss, _ = setup
    L = estimate_L_constants(phi, mats, params, [0.9, 1.0, 1.1], n_quad=200)
    r = decay_rate_bounds(params, W, P, L, ss.k_n, ss.h_n(params.r_g))
    assert r["alpha"] == pytest.approx(min(W.d1 * params.D / 8, params.g / 16,
                                           1.0 / (2 * np.linalg.eigvalsh(P)[0]), W.c))
    assert r["alpha"] > 0 and r["beta1_without_L8"] > 0 and r["beta2"] > 0
