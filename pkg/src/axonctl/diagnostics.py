"""Backstepping transforms, target-system residuals, Lyapunov functionals and decay fits."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.linalg import solve_continuous_lyapunov, solve_triangular

from .controller import GainVector, default_gains, require_hurwitz, trapezoid_weights
from .kernels import KernelCache, KernelSet, PhiKernel, build_kernel_set
from .model import (PhysicalParams, SystemMatrices, compute_steady_state, h_bar,
                    system_matrices)


class WeightSelectionError(ValueError):
    pass


class TransformOperators:
    """Discrete forward/inverse maps (u, v, X) <-> (w, z, X) for one snapshot.

    ``u`` lives on ``M`` uniform nodes of [0, l], ``v`` on the ``n + 1`` nodes
    of the delay grid [0, D_e] (spacing dt, equal to the kernel march step).

    w = Wu u + WX X           (Wu upper triangular)
    z = Zv v + Zu u + ZX X    (Zv lower triangular)
    """

    def __init__(self, kset: KernelSet, l: float, D_e: float, D: float, B):
        phi = kset.phi
        M = kset.y.size
        self.l = float(l)
        self.M = M
        self.x = np.linspace(0.0, l, M)
        h = l / (M - 1)
        self.h = h
        # k(x_j, x_i) depends on (i - j) only
        kd = phi(-h * np.arange(M))[0] @ np.asarray(B) / D
        idx = np.arange(M)
        diffm = idx[None, :] - idx[:, None]
        Wu = np.where(diffm >= 0, kd[np.clip(diffm, 0, M - 1)] * h, 0.0)
        Wu[idx, idx] *= 0.5
        Wu[:, -1] *= 0.5
        Wu[-1, -1] = 0.0
        Wu[idx, idx] += 1.0
        self.Wu = Wu
        self.WX = -phi(self.x - l)[0]

        n = kset.x.size - 1
        self.n = n
        self.xd = kset.x.copy()
        Zv = np.eye(n + 1)
        if n > 0:
            # product trapezoid: row m couples v_{m-r} and v_{m-r-1} through dP[r]
            dP = np.diff(kset.boundary_trace_integral())
            idx_d = np.arange(n + 1)
            r = idx_d[:, None] - idx_d[None, :]
            lower = r >= 0
            rr = np.clip(r, 0, n - 1)
            Ta = np.where(lower & (r < n) & (idx_d[None, :] >= 1), dP[rr], 0.0)
            Tb = np.where(r >= 1, dP[np.clip(r - 1, 0, n - 1)], 0.0)
            Zv -= 0.5 * D * (Ta + Tb)
        self.Zv = Zv
        wq = trapezoid_weights(M, kset.y[1] - kset.y[0])
        self.Zu = kset.q_table() * wq[None, :]
        self.ZX = kset.psi_table().copy()

    def forward(self, u, v, X):
        u, v, X = (np.asarray(a, dtype=float) for a in (u, v, X))
        self._check(u, v)
        w = self.Wu @ u + self.WX @ X
        z = self.Zv @ v + self.Zu @ u + self.ZX @ X
        return w, z

    def inverse(self, w, z, X):
        w, z, X = (np.asarray(a, dtype=float) for a in (w, z, X))
        self._check(w, z)
        u = solve_triangular(self.Wu, w - self.WX @ X, lower=False)
        v = solve_triangular(self.Zv, z - self.Zu @ u - self.ZX @ X, lower=True)
        return u, v

    def _check(self, a, b):
        if a.size != self.M or b.size != self.n + 1:
            raise ValueError(f"grid mismatch: got ({a.size}, {b.size}), "
                             f"expected ({self.M}, {self.n + 1})")


class SnapshotKernels:
    """Kernel provider for diagnostics, independent of the controller's cache."""

    def __init__(self, params: PhysicalParams, gains: GainVector | None = None, *, ny: int,
                 nx: int, tol_l: float | None = None, point_term: bool = True):
        self.params = params
        self.mats = system_matrices(params)
        self.gains = gains or default_gains(self.mats)
        require_hurwitz(self.mats, self.gains)
        self.phi = PhiKernel(self.mats, self.gains.as_array(), params.D, params.a, params.g)
        self.cache = KernelCache(
            lambda ls: build_kernel_set(ls, self.mats, self.phi, params, nx, ny, point_term),
            tol_l or params.l_s / 2000)

    def operators(self, l: float) -> TransformOperators:
        return TransformOperators(self.cache.get(l), l, self.params.D_e, self.params.D,
                                  self.mats.B)


def varpi_profile(w, x, z0, l, hbar):
    """Homogenized target state: w - x z(0) + l z(0) - h_bar."""
    return w - x * z0 + l * z0 - hbar


def _dx(f, x):
    return np.gradient(f, x, edge_order=2)


def frame_state(frame, ss):
    x = np.linspace(0.0, frame.l, frame.c.size)
    u = frame.c - ss.c_eq(x)
    X = np.array([frame.c_c - ss.c_inf, frame.l - ss.l_s])
    return u, frame.history, X


def target_residuals(frames, ops_list, params: PhysicalParams) -> dict:
    """Max-norm residuals of the target boundary conditions along frames.

    Reports |z(D_e)|, |w(l) - h_bar(X)|, |varpi(l)|, |varpi_x(0)| and, when
    at least two frames are given, the transport residual z_t - z_x on
    interior delay nodes (first-order backward difference in time; the
    l_dot X coupling is quadratic in the error and left in the residual).
    """
    if len(frames) != len(ops_list) or not frames:
        raise ValueError("need one operator set per frame")
    ss = compute_steady_state(params)
    mats = system_matrices(params)
    out = {"z_De": 0.0, "w_l": 0.0, "varpi_l": 0.0, "varpi_x0": 0.0}
    zs = []
    for fr, ops in zip(frames, ops_list):
        u, v, X = frame_state(fr, ss)
        w, z = ops.forward(u, v, X)
        hb = float(h_bar(X, ss, mats.C))
        vp = varpi_profile(w, ops.x, z[0], ops.l, hb)
        out["z_De"] = max(out["z_De"], abs(z[-1]))
        out["w_l"] = max(out["w_l"], abs(w[-1] - hb))
        out["varpi_l"] = max(out["varpi_l"], abs(vp[-1]))
        vx0 = (-3 * vp[0] + 4 * vp[1] - vp[2]) / (2 * ops.h)
        out["varpi_x0"] = max(out["varpi_x0"], abs(vx0))
        zs.append((fr.t, z))
    if len(zs) >= 2 and ops_list[0].n >= 2:
        res = 0.0
        for (t0, z0), (t1, z1), ops in zip(zs[:-1], zs[1:], ops_list[1:]):
            dt = t1 - t0
            zt = (z1 - z0) / dt
            zx = _dx(z1, ops.xd)
            res = max(res, float(np.max(np.abs((zt - zx)[1:-1]))))
        out["z_transport"] = res
    return out


@dataclass(frozen=True)
class LyapunovWeights:
    d1: float
    d2: float
    d3: float
    d4: float
    c: float
    eps: float
    v_bar: float
    l_bar: float


def lyapunov_matrix(mats: SystemMatrices, gains: GainVector, Q=None) -> np.ndarray:
    """P solving (A + BK)^T P + P (A + BK) = -Q (Q = I by default)."""
    require_hurwitz(mats, gains)
    Acl = mats.A + np.outer(mats.B, gains.as_array())
    Q = np.eye(2) if Q is None else np.asarray(Q, dtype=float)
    P = solve_continuous_lyapunov(Acl.T, -Q)
    return 0.5 * (P + P.T)


def select_weights(params: PhysicalParams, mats: SystemMatrices, P, l_bar: float, Q=None,
                   c: float = 1.0, eps: float | None = None, d1_floor: float = 1.0) -> LyapunovWeights:
    """Smallest weights satisfying the four Lyapunov weight inequalities.

    d4 sits at its upper bound; d1, d2, d3 at their lower bounds (d1 no
    smaller than ``d1_floor``).

    Raises
    ------
    WeightSelectionError
        If D/(4 l_bar) < a (domain bound inadmissible), g <= 0 (the d2, d3
        bounds divide by g), or eps is outside (0, D/2).
    """
    D, a, g = params.D, params.a, params.g
    if not params.admits_domain_bound(l_bar):
        raise WeightSelectionError(f"D/(4 l_bar) = {D / (4 * l_bar):.6g} < a = {a:.6g}")
    if g <= 0:
        raise WeightSelectionError("weight bounds require g > 0")
    eps = D / 4 if eps is None else eps
    if not 0 < eps < D / 2:
        raise WeightSelectionError("eps must lie in (0, D/2)")
    Q = np.eye(2) if Q is None else np.asarray(Q, dtype=float)
    lq = float(np.linalg.eigvalsh(Q)[0])
    BP = float(np.linalg.norm(np.asarray(P) @ mats.B))
    lb = l_bar
    d4 = D * lq / (512 * lb * BP**2)
    d1 = max(4 * a * a / (D * D), d1_floor)
    s = a * a + g * g * lb * lb
    d2 = (d1 * (g * g * lb**5 / (6 * D) + (4 * s + g) / g) + 32 * s / D + 32 * lb**3 / (3 * D)
          + d4 * 4 * BP**2 / lq)
    d3 = d1 * 4 * lb**2 / g + d1 * 4 * lb**3 / (3 * g) + 32 * lb**5 / (3 * D) + 32 * lb**3 / (3 * D)
    return LyapunovWeights(d1, d2, d3, d4, c, eps, (D - 2 * eps) / (8 * lb), lb)


@dataclass
class NormReport:
    u_L2: float
    u_H1: float
    v_H1: float
    X2: float
    Z: float
    V1: float
    V2: float
    V3: float
    V4: float
    V5: float
    V: float
    Pi: float

    def as_dict(self):
        return asdict(self)


def _trap(f, x):
    return float(np.sum(0.5 * (f[1:] + f[:-1]) * np.diff(x))) if x.size > 1 else 0.0


def _h1sq(f, x):
    if x.size < 2:
        return 0.0
    fx = _dx(f, x) if x.size > 2 else np.full(2, (f[1] - f[0]) / (x[1] - x[0]))
    return _trap(f * f, x) + _trap(fx * fx, x)


def lyapunov_eval(varpi, x, z, xd, X, weights: LyapunovWeights, P, w=None, u=None, v=None) -> NormReport:
    """V1..V5 and the weighted total for one target state.

    ``w``, ``u``, ``v`` are optional and only feed the norm fields (Pi, Z).
    """
    X = np.asarray(X, dtype=float)
    vx = _dx(varpi, x)
    V1 = 0.5 * _trap(varpi**2, x)
    V2 = 0.5 * _trap(vx**2, x)
    if xd.size > 1:
        e = np.exp(weights.c * xd)
        zx = _dx(z, xd) if xd.size > 2 else np.full(2, (z[1] - z[0]) / (xd[1] - xd[0]))
        V3 = 0.5 * _trap(e * z * z, xd)
        V4 = 0.5 * _trap(e * zx * zx, xd)
    else:
        V3 = V4 = 0.0
    V5 = float(X @ np.asarray(P) @ X)
    V = weights.d1 * V1 + V2 + weights.d2 * V3 + weights.d3 * V4 + weights.d4 * V5
    X2 = float(X @ X)
    Pi = (_h1sq(w, x) if w is not None else float("nan")) + _h1sq(z, xd) + X2
    if u is not None:
        u_l2 = math.sqrt(_trap(u * u, x))
        u_h1 = math.sqrt(_h1sq(u, x))
    else:
        u_l2 = u_h1 = float("nan")
    v_h1 = math.sqrt(_h1sq(v, xd)) if v is not None else float("nan")
    Z = u_h1**2 + v_h1**2 + X2
    return NormReport(u_l2, u_h1, v_h1, X2, Z, V1, V2, V3, V4, V5, V, Pi)


def norm_equivalence_bounds(params: PhysicalParams, weights: LyapunovWeights, P, k_n: float) -> dict:
    """delta_lo and delta_hi of the displayed norm equivalence delta_lo V <= Pi <= delta_hi V.

    Also returns ``delta_hi_weighted``, the upper constant obtained when each
    term of the Pi bound is divided by its own Lyapunov weight.
    """
    lb, De = weights.l_bar, params.D_e
    M1 = 4 * De**3 * lb + 4 * De * lb**3
    M2 = 12 * k_n**2
    M3 = max(lb**2, 1.0)
    lmin = float(np.linalg.eigvalsh(P)[0])
    d = weights
    S1 = max(d.d2, d.d3) * math.exp(d.c * De) + 0.5 * M1 * M3 * max(d.d1, 1.0)
    S2 = 1.5 * M3 * max(d.d1, 1.0)
    S3 = d.d4 / lmin + 0.5 * M2 * M3 * max(d.d1, 1.0)
    hi = max(2 + 2 * M1, 12.0, (1 + M2) / lmin)
    hi_w = max((2 + 2 * M1) / min(d.d2, d.d3), 12.0 / min(d.d1, 1.0), (1 + M2) / (lmin * d.d4))
    return {"M1": M1, "M2": M2, "M3": M3, "Sigma1": S1, "Sigma2": S2, "Sigma3": S3,
            "delta_lo": 1.0 / max(S1, S2, S3), "delta_hi": hi, "delta_hi_weighted": hi_w}


def _phi_rows_on(phi: PhiKernel, s):
    R = phi.rows(s)
    return R[:, :2], R[:, 2:], (R @ phi.N1)[:, 2:]


def estimate_L_constants(phi: PhiKernel, mats: SystemMatrices, params: PhysicalParams,
                         lengths, ksets=(), n_quad: int = 400) -> dict:
    """Sampled suprema L1..L7 over the given axon lengths.

    L1..L3, L5..L7 depend on phi only and are evaluated on ``n_quad``
    trapezoid intervals of [0, l] for every l in ``lengths``. L4 needs the
    q/psi kernels and is taken over ``ksets``. L8 has no defining bound and
    is not computed.
    """
    D, a = params.D, params.a
    B, C = mats.B, mats.C
    L = dict.fromkeys(["L1", "L2", "L3", "L5", "L6", "L7"], 0.0)
    for l in np.atleast_1d(lengths):
        x = np.linspace(0.0, l, n_quad + 1)
        ph, dph, ddph = _phi_rows_on(phi, x - l)
        kxl = (phi(x - l)[0] @ B) / D  # k(x, l)
        kx_xl = (dph @ B) / D
        F = dph + kxl[:, None] * C[None, :]
        Fx = ddph + kx_xl[:, None] * C[None, :]
        L["L1"] = max(L["L1"], float(F[-1] @ F[-1]))
        L["L2"] = max(L["L2"], _trap(np.sum(F * F, axis=1), x))
        L["L3"] = max(L["L3"], _trap(np.sum(Fx * Fx, axis=1), x))
        L["L5"] = max(L["L5"], _trap(np.sum(ph * ph, axis=1), x))
        G2B = (-dph - ph / D) @ B
        G3B = (-dph - (a / D) * ph) @ B
        L["L6"] = max(L["L6"], _trap(G2B**2, x))
        L["L7"] = max(L["L7"], _trap(G3B**2, x))
    L4 = 0.0
    for ks in ksets:
        g = ks.smooth
        psi0 = ks.psi_table()[0]
        q0l = ks.q_table()[0, -1]
        qy = g.qy_l[0] + (ks.point_weight * ks.point.qy_l[0] if ks.point is not None else 0.0)
        dpsi = psi0 @ mats.A - (D * qy + a * q0l) * C
        L4 = max(L4, float(np.linalg.norm(dpsi - q0l * C)))
    L["L4"] = L4
    L["resolution"] = {"n_quad": n_quad, "n_lengths": int(np.size(lengths)), "n_kernel_sets": len(ksets)}
    L["unhoused"] = ["L8"]
    return L


def decay_rate_bounds(params: PhysicalParams, weights: LyapunovWeights, P, Lc: dict, k_n: float,
                h_n: float, Q=None) -> dict:
    """alpha, beta1, beta2 of the V-derivative bound; beta1 omits the L8 term."""
    D, g, r, De = params.D, params.g, params.r_g, params.D_e
    kappa = params.r_g / params.l_c
    d = weights
    Q = np.eye(2) if Q is None else np.asarray(Q, dtype=float)
    lq = float(np.linalg.eigvalsh(Q)[0])
    lp = float(np.linalg.eigvalsh(P)[0])
    Pn = float(np.linalg.norm(P, 2))
    lb, e, ec = d.l_bar, d.eps, math.exp(d.c * De)
    alpha = min(d.d1 * D / 8, g / 16, lq / (2 * lp), d.c)
    beta1 = (d.d1 * lb * r / 2 + d.d1 * r / 2 + d.d2 * ec * r + d.d3 * ec * r
             + d.d1 * lb * r * Lc["L4"] ** 2 / 2 + d.d1 * r * Lc["L2"] / 2 + r * Lc["L1"] / 2
             + 2 * d.d4 * Pn + d.d2 * r * Lc["L7"])
    beta2 = (d.d1 * r * r / 2 + 1024 * De**2 / D**2 * r**4 + 8 * De**2 * (1 + math.exp(-d.c * De)) ** 2
             + Lc["L5"] * kappa / (2 * e) + d.d1 * k_n * Lc["L6"] / e
             + 64 / D * r * r * (lb**2 + lb**3 / 3) * Lc["L4"] ** 2 + 2 / (d.d1 * D) * r * r * Lc["L3"]
             + Lc["L5"] * kappa / (2 * e) + k_n * Lc["L6"] / (2 * e) + 2 * h_n + 8 * k_n**2 * g**2)
    return {"alpha": alpha, "beta1_without_L8": beta1, "beta2": beta2}


@dataclass
class DecayFit:
    rate: float
    offset: float
    r2: float
    n_points: int
    decaying: bool

    def as_dict(self):
        return asdict(self)


def fit_decay(t, y, transient: float = 0.1, min_rate: float = 1e-8) -> DecayFit:
    """Least-squares fit log y = offset - rate t after the transient window.

    ``transient`` is the fraction of the time span discarded at the start.
    Only the leading run of positive samples is used.
    """
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    pos = y > 0
    if not pos.all():
        stop = int(np.argmin(pos))
        t, y = t[:stop], y[:stop]
    t0 = t[0] + transient * (t[-1] - t[0]) if t.size else 0.0
    sel = t >= t0
    t, y = t[sel], y[sel]
    if t.size < 3:
        raise ValueError("need at least 3 positive samples after the transient window")
    ly = np.log(y)
    slope, icpt = np.polyfit(t, ly, 1)
    pred = icpt + slope * t
    ss_res = float(np.sum((ly - pred) ** 2))
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else (1.0 if ss_res == 0 else 0.0)
    rate = -float(slope)
    return DecayFit(rate, float(icpt), r2, int(t.size), rate > min_rate)


def annotate_trajectory(traj, gains: GainVector | None = None, l_bar: float | None = None,
                        kernel_tol: float | None = None, residuals: bool = True) -> dict:
    """Evaluate transforms and Lyapunov functionals on every recorded frame.

    Fills ``traj.lyapunov`` (columns V_total, V1..V5) and returns a report
    with residual maxima, norm-equivalence checks and decay fits of Z and V.
    Kernels are rebuilt independently of the controller's cache, with
    snapshot spacing ``kernel_tol`` (default l_s / 2000).
    """
    params = traj.params
    cfg = traj.config
    ss = compute_steady_state(params)
    mats = system_matrices(params)
    gains = gains or default_gains(mats)
    l_bar = l_bar or 1.5 * params.l_s
    P = lyapunov_matrix(mats, gains)
    weights = select_weights(params, mats, P, l_bar)
    nx = int(round(params.D_e / cfg.dt))
    prov = SnapshotKernels(params, gains, ny=cfg.N + 1, nx=nx, tol_l=kernel_tol)
    bounds = norm_equivalence_bounds(params, weights, P, ss.k_n)

    cols = {k: np.empty(len(traj)) for k in ("V_total", "V1", "V2", "V3", "V4", "V5", "Pi", "Z")}
    ops_list = []
    for i, fr in enumerate(traj.frames):
        ops = prov.operators(fr.l)
        ops_list.append(ops)
        u, v, X = frame_state(fr, ss)
        w, z = ops.forward(u, v, X)
        hb = float(h_bar(X, ss, mats.C))
        vp = varpi_profile(w, ops.x, z[0], ops.l, hb)
        rep = lyapunov_eval(vp, ops.x, z, ops.xd, X, weights, P, w=w, u=u, v=v)
        cols["V_total"][i] = rep.V
        for k in ("V1", "V2", "V3", "V4", "V5"):
            cols[k][i] = getattr(rep, k)
        cols["Pi"][i] = rep.Pi
        cols["Z"][i] = rep.Z
    traj.lyapunov = cols

    V, Pi = cols["V_total"], cols["Pi"]
    report = {
        "weights": asdict(weights),
        "norm_equivalence": {
            **bounds,
            "lower_holds": bool(np.all(bounds["delta_lo"] * V <= Pi * (1 + 1e-12))),
            "upper_holds": bool(np.all(Pi <= bounds["delta_hi"] * V * (1 + 1e-12))),
            "upper_weighted_holds": bool(np.all(Pi <= bounds["delta_hi_weighted"] * V * (1 + 1e-12))),
            "max_Pi_over_V": float(np.max(Pi / V)) if np.all(V > 0) else float("inf"),
            "min_Pi_over_V": float(np.min(Pi / V)) if np.all(V > 0) else 0.0,
        },
        "kernel_snapshots": len(prov.cache),
    }
    if residuals:
        report["residuals"] = target_residuals(traj.frames, ops_list, params)
    if len(traj) >= 3:
        try:
            report["decay_Z"] = fit_decay(traj.t, cols["Z"]).as_dict()
            report["decay_V"] = fit_decay(traj.t, V).as_dict()
        except ValueError as exc:
            report["decay_error"] = str(exc)
    return report


def v_monotone_after(t, V, transient: float = 0.1, rtol: float = 0.0,
                     t_start: float | None = None) -> tuple[bool, float]:
    """Whether V is non-increasing after the transient; also the worst relative increase.

    The window starts at ``t_start`` when given, else after the fraction
    ``transient`` of the time span.
    """
    t = np.asarray(t)
    V = np.asarray(V)
    if t_start is None:
        t_start = t[0] + transient * (t[-1] - t[0])
    sel = t >= t_start
    Vs = V[sel]
    if Vs.size < 2:
        return True, 0.0
    rel = np.diff(Vs) / np.maximum(Vs[:-1], 1e-300)
    worst = float(rel.max())
    return worst <= rtol, worst
