"""Feedback laws: delay-compensated predictor law and the delay-free baseline."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kernels import KernelCache, KernelSet, PhiKernel, build_kernel_set
from .model import PhysicalParams, SystemMatrices, system_matrices


class GainError(ValueError):
    pass


@dataclass(frozen=True)
class GainVector:
    """Row gain K = [k1, k2] acting as U = K X on the ODE block."""

    k1: float
    k2: float

    def as_array(self) -> np.ndarray:
        return np.array([self.k1, self.k2], dtype=float)


def default_gains(mats: SystemMatrices) -> GainVector:
    """A stabilizing choice: enough k1 to make the trace negative, k2 = 1."""
    return GainVector(max(0.0, mats.a_tilde / mats.beta) + 1.0, 1.0)


def routh_hurwitz_2(coeffs) -> bool:
    """Routh test for s^2 + c1 s + c0 (all first-column entries positive)."""
    c1, c0 = coeffs
    return c1 > 0 and c0 > 0


def hurwitz_check(mats: SystemMatrices, gains: GainVector):
    """Check that A + B K is Hurwitz.

    Returns
    -------
    ok : bool
        True when both the eigenvalue test and the Routh test agree.
    eigenvalues : ndarray
    routh_ok : bool
    """
    M = mats.A + np.outer(mats.B, gains.as_array())
    eig = np.linalg.eigvals(M)
    routh_ok = routh_hurwitz_2((-np.trace(M), np.linalg.det(M)))
    eig_ok = bool(np.all(eig.real < 0))
    return eig_ok and routh_ok, eig, routh_ok


def require_hurwitz(mats: SystemMatrices, gains: GainVector):
    ok, eig, _ = hurwitz_check(mats, gains)
    if not ok:
        raise GainError(f"A + B K is not Hurwitz: eigenvalues {eig}")
    return eig


def trapezoid_weights(n_nodes: int, h: float) -> np.ndarray:
    w = np.full(n_nodes, h)
    w[0] = w[-1] = 0.5 * h
    return w


def _law_coefficients(kset: KernelSet, D_e: float):
    key = ("law", D_e)
    if key not in kset._memo:
        y = kset.y
        wq = trapezoid_weights(y.size, y[1] - y[0]) * kset.q_at(D_e)
        dP = np.diff(kset.boundary_trace_integral()) if kset.x.size > 1 else np.zeros(0)
        kset._memo[key] = (wq, kset.psi_at(D_e), dP)
    return kset._memo[key]


def control_law(kset: KernelSet, u, X, past, D_e: float, D: float) -> float:
    """Evaluate U(t) for the kernel snapshot ``kset``.

    ``u`` is sampled on the snapshot's y-grid (index aligned) and ``past``
    holds U(t - D_e), ..., U(t - dt). The history integral contains U(t)
    itself through the trapezoid rule, so the scalar equation is solved
    for it in closed form.
    """
    u = np.asarray(u, dtype=float)
    if u.size != kset.y.size:
        raise ValueError(f"profile has {u.size} nodes, kernel grid has {kset.y.size}")
    wq, psi, dP = _law_coefficients(kset, D_e)
    spatial = float(np.dot(wq, u))
    ode = float(psi @ np.asarray(X, dtype=float))
    if D_e == 0:
        return -spatial - ode
    past = np.asarray(past, dtype=float)
    n = kset.x.size - 1
    if past.size != n:
        raise ValueError(f"history has {past.size} samples, expected {n}")
    # tau_m = m dt, U(t - tau_m): m = 0 is the unknown, m = n is the oldest
    Ut = past[::-1]
    rest = 0.5 * dP[0] * Ut[0] + float(np.dot(0.5 * dP[1:], Ut[:-1] + Ut[1:]))
    denom = 1.0 - 0.5 * D * dP[0]
    if abs(denom) < 1e-12:
        raise GainError("implicit history term is singular")
    return (D * rest - spatial - ode) / denom


class CompensatedController:
    """Predictor-based feedback for the delayed plant.

    Kernels are computed on demand per quantized axon length and cached.
    ``ny`` defaults to the simulator's N + 1 so the kernel y-grid lines up
    with the profile nodes. With ``blend`` the law is evaluated on the two
    snapshots bracketing l and interpolated linearly, which keeps U
    continuous as l crosses snapshot bins; otherwise the nearest snapshot
    within ``tol_l`` is used.
    """

    def __init__(self, params: PhysicalParams, gains: GainVector | None = None, *, N: int = 200,
                 dt: float = 1e-3, tol_l: float | None = None, point_term: bool = True,
                 cache: KernelCache | None = None, nx: int | None = None, blend: bool = True):
        self.params = params
        self.mats = system_matrices(params)
        self.gains = gains or default_gains(self.mats)
        require_hurwitz(self.mats, self.gains)
        self.phi = PhiKernel(self.mats, self.gains.as_array(), params.D, params.a, params.g)
        self.ny = N + 1
        self.nx = nx if nx is not None else int(round(params.D_e / dt))
        self.point_term = point_term
        self.blend = blend
        self.cache = cache or KernelCache(self._build, tol_l or params.l_s / 200)

    def _build(self, l_snap):
        return build_kernel_set(l_snap, self.mats, self.phi, self.params, self.nx, self.ny,
                                self.point_term)

    def kernels(self, l: float) -> KernelSet:
        return self.cache.get(l)

    def __call__(self, u, X, l, past):
        return self._evaluate(u, X, l, past, self.params.D_e)

    def _evaluate(self, u, X, l, past, D_e):
        D = self.params.D
        if not self.blend:
            return control_law(self.kernels(l), u, X, past, D_e, D)
        lo, hi, th = self.cache.bracket(l)
        U_lo = control_law(lo, u, X, past, D_e, D)
        if th == 0.0:
            return U_lo
        return (1.0 - th) * U_lo + th * control_law(hi, u, X, past, D_e, D)


class DelayFreeController(CompensatedController):
    """Nominal law designed for zero delay; ignores the input history.

    Applied to a delayed plant this is the uncompensated baseline.
    """

    def __init__(self, params: PhysicalParams, gains: GainVector | None = None, **kw):
        self.plant_params = params
        kw.pop("nx", None)
        super().__init__(params.replace(D_e=0.0), gains, nx=0, **kw)

    def __call__(self, u, X, l, past=None):
        return self._evaluate(u, X, l, (), 0.0)


def make_controller(mode: str, params: PhysicalParams, gains=None, **kw):
    """Controller callable for a simulation mode (``None`` for open loop)."""
    if mode == "compensated":
        return CompensatedController(params, gains, **kw)
    if mode == "uncompensated":
        return DelayFreeController(params, gains, **kw)
    if mode == "open-loop":
        return None
    raise ValueError(f"unknown mode {mode!r}")
