"""Fast invariant suite behind ``axonctl verify``.

Each check returns ``(ok, detail)``. Thresholds are the same as in the unit
tests but the grids are smaller so the whole suite runs in seconds.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .controller import (CompensatedController, DelayFreeController, default_gains,
                         hurwitz_check, trapezoid_weights)
from .diagnostics import (SnapshotKernels, lyapunov_eval, lyapunov_matrix,
                          norm_equivalence_bounds, select_weights, varpi_profile)
from .kernels import PhiKernel, build_kernel_set, k_eval, kernel_residuals
from .model import (PhysicalParams, compute_steady_state, h_bar, h_bar_expanded,
                    system_matrices)
from .simulator import (DelayLine, SimConfig, equilibrium_drift_constant, equilibrium_state,
                        run_closed_loop)


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str
    seconds: float


def random_params(rng, n):
    """Random admissible parameter sets (the same ranges as the tests)."""
    out = []
    for _ in range(n):
        out.append(PhysicalParams(
            D=rng.uniform(0.2, 5.0), a=rng.uniform(-1.0, 1.0), g=rng.uniform(0.0, 1.0),
            l_c=rng.uniform(0.1, 2.0), r_g=rng.uniform(0.05, 2.0),
            r_g_tilde=rng.uniform(0.0, 0.5), c_inf=rng.uniform(0.1, 5.0),
            D_e=rng.uniform(0.0, 2.0), l_s=rng.uniform(0.2, 5.0)))
    return out


def steady_state_residual(p: PhysicalParams) -> float:
    """Worst relative residual of the equilibrium identities for ``p``."""
    ss = compute_steady_state(p)
    res = []
    for lam in (ss.lambda_plus, ss.lambda_minus):
        scale = p.D * lam**2 + abs(p.a * lam) + p.g
        res.append(abs(p.D * lam**2 - p.a * lam - p.g) / max(scale, 1e-300))
    res.append(abs(ss.K_plus + ss.K_minus - 1.0) / max(abs(ss.K_plus) + abs(ss.K_minus), 1.0))
    res.append(abs(ss.c_eq(p.l_s) - p.c_inf) / p.c_inf)
    x = np.linspace(0.0, p.l_s, 17)
    c0, c1, c2 = ss.c_eq(x), ss.c_eq(x, 1), ss.c_eq(x, 2)
    scale = np.abs(p.D * c2) + np.abs(p.a * c1) + np.abs(p.g * c0)
    res.append(float(np.max(np.abs(p.D * c2 - p.a * c1 - p.g * c0) / np.maximum(scale, 1e-300))))
    # cone balance D c_x(l_s) = (a - g l_c) c_inf, soma flux c_x(0) = -q_s*
    cx = ss.c_eq(p.l_s, 1)
    res.append(abs(p.D * cx - (p.a - p.g * p.l_c) * p.c_inf)
               / max(p.D * abs(cx) + abs(p.a - p.g * p.l_c) * p.c_inf, 1e-300))
    cx0 = ss.c_eq(0.0, 1)
    res.append(abs(cx0 + ss.q_s_star) / max(abs(cx0), 1e-300))
    return float(max(res))


def delay_free_law(phi: PhiKernel, B, D: float, l_c: float, u, X, l: float) -> float:
    """Delay-free backstepping law coded straight from phi.

    U = -u(0)/l_c - int_0^l k_x(0, y) u(y) dy + phi'(-l) X, trapezoid in y.
    """
    u = np.asarray(u, dtype=float)
    y = np.linspace(0.0, l, u.size)
    kx0 = phi(-y)[1] @ np.asarray(B) / D
    w = trapezoid_weights(y.size, y[1] - y[0])
    return float(-u[0] / l_c - np.dot(w, kx0 * u) + phi(np.array([-l]))[1][0] @ X)


def _check_steady(rng):
    worst = max(steady_state_residual(p) for p in random_params(rng, 50))
    return worst < 1e-10, f"max relative residual {worst:.2e} over 50 sets"


def _check_h_bar(rng):
    ss = compute_steady_state(PhysicalParams())
    C = system_matrices(PhysicalParams()).C
    z2 = np.linspace(-0.5, 0.5, 41)
    X = np.vstack([rng.normal(size=z2.size), z2])
    a = np.array([h_bar(X[:, i], ss, C) for i in range(z2.size)])
    err = float(np.max(np.abs(a - h_bar_expanded(z2, ss))))
    return err < 1e-12, f"max |difference| {err:.2e}"


def _check_phi(rng):
    p = PhysicalParams()
    mats = system_matrices(p)
    K = default_gains(mats).as_array()
    phi = PhiKernel(mats, K, p.D, p.a, p.g)
    f0, df0 = phi(np.array([0.0]))
    e1 = float(np.max(np.abs(f0[0] - mats.C)))
    e2 = float(np.max(np.abs(df0[0] - (K - float(mats.C @ mats.B) * mats.C / p.D))))
    x = np.linspace(0.0, 3.0, 31)
    e3 = float(np.max(np.abs(k_eval(x, x, phi, mats.B, p.D) + 1.0 / p.l_c)))
    worst = max(e1, e2, e3)
    return worst <= 1e-10, f"phi(0) {e1:.1e}, phi'(0) {e2:.1e}, k(x,x) {e3:.1e}"


def _check_hurwitz(rng):
    fails = 0
    for p in random_params(rng, 50):
        mats = system_matrices(p)
        ok, _, routh = hurwitz_check(mats, default_gains(mats))
        fails += (not ok) or (not routh)
    return fails == 0, f"{fails} of 50 default gain vectors not Hurwitz"


def _check_kernel_residuals(rng):
    p = PhysicalParams()
    mats = system_matrices(p)
    phi = PhiKernel(mats, default_gains(mats).as_array(), p.D, p.a, p.g)
    r_lo = kernel_residuals(build_kernel_set(p.l_s, mats, phi, p, 50, 50).smooth, mats, p)
    r_hi = kernel_residuals(build_kernel_set(p.l_s, mats, phi, p, 100, 100).smooth, mats, p)
    ok = r_hi["boundary_coupling"] < 1e-10 and r_hi["psi_ode"] < r_lo["psi_ode"]
    return ok, (f"coupling {r_hi['boundary_coupling']:.1e}, psi residual "
                f"{r_lo['psi_ode']:.2e} -> {r_hi['psi_ode']:.2e}")


def _check_delay_line(rng):
    line = DelayLine(0.05, 0.01)
    sig = rng.normal(size=30)
    out = []
    for k, s in enumerate(sig):
        line.push(s, k * 0.01)
        out.append(line.sample())
    out = np.array(out)
    ok = np.array_equal(out[5:], sig[:-5]) and np.all(out[:5] == 0.0)
    return bool(ok), "five-step shift of a random sequence"


def _check_round_trip(rng):
    p = PhysicalParams()
    prov = SnapshotKernels(p, ny=61, nx=25)
    worst = 0.0
    for _ in range(20):
        l = p.l_s * (1 + 0.1 * rng.uniform(-1, 1))
        ops = prov.operators(l)
        u = rng.normal(size=ops.M)
        v = rng.normal(size=ops.n + 1)
        X = rng.normal(size=2)
        w, z = ops.forward(u, v, X)
        u2, v2 = ops.inverse(w, z, X)
        err = np.linalg.norm(np.concatenate([u2 - u, v2 - v])) / np.linalg.norm(np.concatenate([u, v]))
        worst = max(worst, float(err))
    return worst <= 1e-8, f"max relative error {worst:.1e} over 20 states"


def _check_reduction(rng):
    p = PhysicalParams(D_e=0.0)
    N = 120
    ctrl = DelayFreeController(p, N=N, dt=1e-3, tol_l=1e-9)
    worst = 0.0
    for _ in range(10):
        l = p.l_s * (1 + 0.05 * rng.uniform(-1, 1))
        ks = ctrl.cache.get(l)
        u = rng.normal(size=N + 2) * np.cos(np.linspace(0, np.pi / 2, N + 2))
        X = rng.normal(size=2)
        U = ctrl(u, X, ks.l_snap)
        ref = delay_free_law(ctrl.phi, ctrl.mats.B, p.D, p.l_c, u, X, ks.l_snap)
        worst = max(worst, abs(U - ref) / max(abs(ref), 1e-12))
    return worst <= 1e-6, f"max relative difference {worst:.1e}"


def _check_drift(rng):
    p = PhysicalParams()
    c1 = equilibrium_drift_constant(p)
    N, dt = 40, 1e-3
    h = 1.0 / (N + 1)
    st = equilibrium_state(p, N)
    ctrl = CompensatedController(p, N=N, dt=dt)
    tr = run_closed_loop(SimConfig(N=N, dt=dt, t_end=dt, record_every=1), p, ctrl, initial=st)
    f0, f1 = tr.frames[0], tr.frames[-1]
    d = max(np.abs(f1.c - f0.c).max(), abs(f1.c_c - f0.c_c), abs(f1.l - f0.l))
    return d <= c1 * dt * h * h, f"drift {d:.2e} vs bound {c1 * dt * h * h:.2e}"


def _check_weights(rng):
    p = PhysicalParams()
    mats = system_matrices(p)
    gains = default_gains(mats)
    P = lyapunov_matrix(mats, gains)
    W = select_weights(p, mats, P, 1.5 * p.l_s)
    ss = compute_steady_state(p)
    b = norm_equivalence_bounds(p, W, P, ss.k_n)
    prov = SnapshotKernels(p, gains, ny=41, nx=20)
    ops = prov.operators(p.l_s)
    bad = 0
    for _ in range(20):
        u = rng.normal(size=ops.M) * 0.01
        v = rng.normal(size=ops.n + 1) * 0.01
        X = rng.normal(size=2) * 0.01
        w, z = ops.forward(u, v, X)
        vp = varpi_profile(w, ops.x, z[0], ops.l, float(h_bar(X, ss, mats.C)))
        rep = lyapunov_eval(vp, ops.x, z, ops.xd, X, W, P, w=w, u=u, v=v)
        bad += not (b["delta_lo"] * rep.V <= rep.Pi <= b["delta_hi_weighted"] * rep.V)
    return bad == 0, f"{bad} of 20 random states outside the norm sandwich"


def _check_closed_loop(rng):
    p = PhysicalParams()
    cfg = SimConfig(N=40, dt=5e-3, t_end=6.0, record_every=20)
    tr = run_closed_loop(cfg, p, CompensatedController(p, N=40, dt=5e-3))
    Z = tr.norms()[:, 3]
    ok = tr.termination == "completed" and Z[-1] < 0.5 * Z[0]
    return ok, f"Z {Z[0]:.2e} -> {Z[-1]:.2e} ({tr.termination})"


CHECKS = [
    ("steady-state identities", _check_steady),
    ("h_bar closed forms agree", _check_h_bar),
    ("phi boundary values", _check_phi),
    ("default gains Hurwitz", _check_hurwitz),
    ("kernel residuals", _check_kernel_residuals),
    ("delay line shift", _check_delay_line),
    ("transform round trip", _check_round_trip),
    ("zero-delay reduction", _check_reduction),
    ("equilibrium drift", _check_drift),
    ("norm equivalence", _check_weights),
    ("closed-loop decay", _check_closed_loop),
]


def run_checks(seed: int = 0) -> list[CheckResult]:
    results = []
    for name, fn in CHECKS:
        rng = np.random.default_rng(seed)
        t0 = time.perf_counter()
        try:
            ok, detail = fn(rng)
        except Exception as exc:  # a crash is a failed check, not a crashed suite
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        results.append(CheckResult(name, bool(ok), detail, time.perf_counter() - t0))
    return results


def format_table(results) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'check'.ljust(width)}  result  detail"]
    for r in results:
        lines.append(f"{r.name.ljust(width)}  {'PASS' if r.ok else 'FAIL':6}  {r.detail}")
    n_ok = sum(r.ok for r in results)
    lines.append(f"{n_ok}/{len(results)} checks passed")
    return "\n".join(lines)
