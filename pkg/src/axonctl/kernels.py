"""Backstepping gain kernels.

phi and k are closed form (4x4 matrix exponential). The coupled (q, psi)
system is marched in x with backward Euler, x playing the role of time.
p is obtained from q along characteristics.

Sign conventions: ``k(x, y) = phi(x - y) B / D`` so that ``k(x, x) = -1/l_c``,
and the state transform reads ``w = u + int_x^l k u dy - phi(x - l) X``.
With this pairing the phi ODE has ``(a I - B C^T) / D`` in its lower-right
block; see ``n1_matrix``.
"""

from __future__ import annotations

import csv
import threading
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm, solve_banded

from .model import PhysicalParams, SystemMatrices


class KernelSolverError(RuntimeError):
    pass


def n1_matrix(mats: SystemMatrices, D: float, a: float, g: float) -> np.ndarray:
    """Generator of the second-order phi ODE written as a first-order system.

    Acts on the row ``[phi, phi']`` from the right.
    """
    I = np.eye(2)
    BC = np.outer(mats.B, mats.C)
    return np.block([
        [np.zeros((2, 2)), (g * I + mats.A + (a / D) * BC) / D],
        [I, (a * I - BC) / D],
    ])


class PhiKernel:
    """Evaluator for phi(s), phi'(s), phi''(s) (each a 2-row per sample)."""

    def __init__(self, mats: SystemMatrices, K, D: float, a: float, g: float):
        self.mats = mats
        self.K = np.asarray(K, dtype=float)
        self.D = D
        self.N1 = n1_matrix(mats, D, a, g)
        CB = float(mats.C @ mats.B)
        self.init = np.concatenate([mats.C, self.K - CB * mats.C / D])

    def rows(self, s):
        s = np.atleast_1d(np.asarray(s, dtype=float))
        E = expm(self.N1[None, :, :] * s[:, None, None])
        return np.einsum("i,nij->nj", self.init, E)

    def __call__(self, s):
        """Return (phi(s), phi'(s)) with shapes (n, 2)."""
        R = self.rows(s)
        return R[:, :2], R[:, 2:]

    def second(self, s):
        return (self.rows(s) @ self.N1)[:, 2:]


def k_eval(x, y, phi: PhiKernel, B, D: float):
    """k(x, y) = phi(x - y) B / D (depends on x - y only)."""
    s = np.asarray(x, dtype=float) - np.asarray(y, dtype=float)
    shape = np.shape(s)
    val = phi(np.ravel(s))[0] @ np.asarray(B)
    return (val / D).reshape(shape)


def k_x_eval(x, y, phi: PhiKernel, B, D: float):
    s = np.asarray(x, dtype=float) - np.asarray(y, dtype=float)
    shape = np.shape(s)
    val = phi(np.ravel(s))[1] @ np.asarray(B)
    return (val / D).reshape(shape)


@dataclass
class QPsiGrid:
    """Solution of the (q, psi) kernel system on a rectangular grid.

    ``q[n, j]`` approximates q(x_n, y_j); ``psi[n]`` approximates
    psi(x_n - l_snap); ``qy_l[n]`` is the one-sided q_y(x_n, l_snap).
    ``kind`` is ``"smooth"`` (initial slice k_x(0, y)) or ``"point"`` (unit
    point mass at y = 0, used for the boundary-value part of the transform).
    """

    l_snap: float
    x: np.ndarray
    y: np.ndarray
    q: np.ndarray
    psi: np.ndarray
    qy_l: np.ndarray
    kind: str = "smooth"

    @property
    def dx(self) -> float:
        return float(self.x[1] - self.x[0]) if self.x.size > 1 else 0.0

    @property
    def dy(self) -> float:
        return float(self.y[1] - self.y[0])

    def q_at(self, x):
        """q(x, .) on the y-grid, linear in x between marching steps."""
        return _interp_rows(self.x, self.q, x)

    def psi_at(self, x):
        return _interp_rows(self.x, self.psi, x)


def _interp_rows(xg, table, x):
    x = float(x)
    if xg.size == 1:
        if abs(x - xg[0]) > 1e-12:
            raise ValueError(f"x={x} outside kernel grid [{xg[0]}, {xg[-1]}]")
        return table[0].copy()
    tol = 1e-9 * max(1.0, xg[-1])
    if x < xg[0] - tol or x > xg[-1] + tol:
        raise ValueError(f"x={x} outside kernel grid [{xg[0]}, {xg[-1]}]")
    h = xg[1] - xg[0]
    pos = min(max((x - xg[0]) / h, 0.0), xg.size - 1.0)
    n = min(int(np.floor(pos)), xg.size - 2)
    th = pos - n
    if th < 1e-12:
        return table[n].copy()
    return (1.0 - th) * table[n] + th * table[n + 1]


def _operator_bands(ny, dy, D, a, g):
    """Bands of L q = D q_yy + a q_y - g q on nodes 0..ny-1.

    Node 0 carries the Robin condition q_y = -(a/D) q through a ghost node.
    Returns (lower, diag, upper, coefficient of the Dirichlet value q_ny).
    """
    lo = np.full(ny, D / dy**2 - a / (2 * dy))
    di = np.full(ny, -2 * D / dy**2 - g)
    up = np.full(ny, D / dy**2 + a / (2 * dy))
    di[0] = -2 * D / dy**2 + 2 * a / dy - a**2 / D - g
    up[0] = 2 * D / dy**2
    return lo, di, up, D / dy**2 + a / (2 * dy)


def solve_q_psi(l_snap, mats: SystemMatrices, phi: PhiKernel, params: PhysicalParams,
                nx: int = 400, ny: int = 200, kind: str = "smooth") -> QPsiGrid:
    """March the (q, psi) kernel system from x = 0 to x = D_e.

    Parameters
    ----------
    l_snap : float
        Axon length the kernels are built for (right edge of the y-grid).
    nx, ny : int
        Number of marching steps in x and intervals in y.
    kind : {"smooth", "point"}
        Initial data. ``"smooth"`` uses q(0, y) = k_x(0, y) and
        psi(-l) = -phi'(-l); ``"point"`` uses a unit point mass at y = 0
        (discrete delta for the trapezoid rule) and psi(-l) = 0.

    Raises
    ------
    KernelSolverError
        If the per-step boundary closure is singular or the march produces
        non-finite values.
    """
    D, a, g, D_e = params.D, params.a, params.g, params.D_e
    if l_snap <= 0:
        raise ValueError("l_snap must be positive")
    if ny < 3:
        raise ValueError("ny must be >= 3")
    if D_e == 0:
        nx = 0
    elif nx < 1:
        raise ValueError("nx must be >= 1 when D_e > 0")
    y = np.linspace(0.0, l_snap, ny + 1)
    x = np.linspace(0.0, D_e, nx + 1)
    dy = l_snap / ny
    B, C, A = mats.B, mats.C, mats.A

    q = np.empty((nx + 1, ny + 1))
    psi = np.empty((nx + 1, 2))
    qy_l = np.empty(nx + 1)
    if kind == "smooth":
        q[0] = k_x_eval(0.0, y, phi, B, D)
        psi[0] = -phi(-l_snap)[1][0]
    elif kind == "point":
        q[0] = 0.0
        q[0, 0] = 2.0 / dy
        psi[0] = 0.0
    else:
        raise ValueError(f"unknown kernel kind {kind!r}")
    qy_l[0] = (3 * q[0, ny] - 4 * q[0, ny - 1] + q[0, ny - 2]) / (2 * dy)
    if nx == 0:
        return QPsiGrid(l_snap, x, y, q, psi, qy_l, kind)

    dx = D_e / nx
    lo, di, up, cb = _operator_bands(ny, dy, D, a, g)
    ab = np.zeros((3, ny))
    ab[0, 1:] = -dx * up[:-1]
    ab[1] = 1.0 - dx * di
    ab[2, :-1] = -dx * lo[1:]
    # response of one implicit step to a unit Dirichlet value at y = l
    e = np.zeros(ny)
    e[-1] = dx * cb
    r = solve_banded((1, 1), ab, e)
    gamma = (3.0 - 4.0 * r[-1] + r[-2]) / (2 * dy)
    BCt = np.outer(B, C)
    M2 = np.eye(2) - dx * A - dx * (D * gamma + a) / D * BCt
    if not np.isfinite(M2).all() or np.linalg.cond(M2) > 1e12:
        raise KernelSolverError("boundary closure matrix is singular (step 1)")
    M2inv = np.linalg.inv(M2)

    for n in range(nx):
        q0 = solve_banded((1, 1), ab, q[n, :ny])
        alpha = (-4.0 * q0[-1] + q0[-2]) / (2 * dy)
        rhs = psi[n] - dx * D * alpha * C
        psi[n + 1] = rhs @ M2inv
        b = -float(psi[n + 1] @ B) / D
        q[n + 1, :ny] = q0 + b * r
        q[n + 1, ny] = b
        qy_l[n + 1] = alpha + gamma * b
        if not (np.isfinite(q[n + 1]).all() and np.isfinite(psi[n + 1]).all()):
            raise KernelSolverError(f"kernel march diverged at step {n + 1}")
    return QPsiGrid(l_snap, x, y, q, psi, qy_l, kind)


def p_eval(x, y, grid: QPsiGrid, D: float):
    """p(x, y) = -D q(x - y, 0), the characteristic solution of p_x = -p_y."""
    s = np.asarray(x, dtype=float) - np.asarray(y, dtype=float)
    xg = grid.x
    tol = 1e-12 * max(1.0, xg[-1])
    if np.any(s < -tol) or np.any(s > xg[-1] + tol):
        raise ValueError("p is only defined for 0 <= x - y <= D_e")
    if xg.size == 1:
        return np.full(np.shape(s), -D * grid.q[0, 0])
    return -D * np.interp(s, xg, grid.q[:, 0])


def kernel_residuals(grid: QPsiGrid, mats: SystemMatrices, params: PhysicalParams) -> dict:
    """Finite-difference substitution residuals of the kernel equations.

    x-derivatives use centred differences around interior marching steps,
    so the reported PDE and psi residuals expose the first-order truncation
    of the march. The Robin residual uses a second-order one-sided stencil.
    """
    D, a, g = params.D, params.a, params.g
    q, psi = grid.q, grid.psi
    dy = grid.dy
    out = {
        "boundary_coupling": float(np.max(np.abs(q[:, -1] + psi @ mats.B / D))),
    }
    first = 1 if grid.kind == "point" else 0
    rob = (-3 * q[first:, 0] + 4 * q[first:, 1] - q[first:, 2]) / (2 * dy) + a / D * q[first:, 0]
    out["robin"] = float(np.max(np.abs(rob)))
    if grid.x.size >= 3:
        dx = grid.dx
        qm = q[1:-1]
        qyy = (qm[:, 2:] - 2 * qm[:, 1:-1] + qm[:, :-2]) / dy**2
        qy = (qm[:, 2:] - qm[:, :-2]) / (2 * dy)
        qxc = (q[2:, 1:-1] - q[:-2, 1:-1]) / (2 * dx)
        res = qxc - (D * qyy + a * qy - g * qm[:, 1:-1])
        if grid.kind == "point":
            res = res[1:]
        out["pde"] = float(np.max(np.abs(res))) if res.size else 0.0
        dpsi = (psi[2:] - psi[:-2]) / (2 * dx)
        rhs = psi[1:-1] @ mats.A - np.outer(D * grid.qy_l[1:-1] + a * q[1:-1, -1], mats.C)
        out["psi_ode"] = float(np.max(np.abs(dpsi - rhs)))
    return out


@dataclass
class KernelSet:
    """All gain kernels for one axon-length snapshot.

    The q/psi kernels are ``smooth + point_weight * point``: the point part
    carries the boundary-value term -k(0, 0) u(0) of the w_x(0) identity.
    """

    l_snap: float
    phi: PhiKernel
    smooth: QPsiGrid
    point: QPsiGrid | None
    point_weight: float
    D: float
    _memo: dict = field(default_factory=dict, repr=False)

    @property
    def x(self):
        return self.smooth.x

    @property
    def y(self):
        return self.smooth.y

    def q_at(self, x):
        row = self.smooth.q_at(x)
        if self.point is not None:
            row = row + self.point_weight * self.point.q_at(x)
        return row

    def psi_at(self, x):
        val = self.smooth.psi_at(x)
        if self.point is not None:
            val = val + self.point_weight * self.point.psi_at(x)
        return val

    def q_table(self):
        if self.point is None:
            return self.smooth.q
        return self.smooth.q + self.point_weight * self.point.q

    def psi_table(self):
        if self.point is None:
            return self.smooth.psi
        return self.smooth.psi + self.point_weight * self.point.psi

    def boundary_trace_integral(self):
        """Cumulative integral of q(xi, 0) over xi in [0, x_n] on the x-grid.

        The smooth part uses the trapezoid rule. The point part is singular
        like xi**-1/2 near 0, so its integral is accumulated with the
        right-endpoint rule that matches the backward-Euler march.
        """
        if "trace" in self._memo:
            return self._memo["trace"]
        xg = self.smooth.x
        out = np.zeros(xg.size)
        if xg.size > 1:
            h = np.diff(xg)
            qs = self.smooth.q[:, 0]
            out[1:] = np.cumsum(0.5 * h * (qs[1:] + qs[:-1]))
            if self.point is not None:
                out[1:] += self.point_weight * np.cumsum(h * self.point.q[1:, 0])
        self._memo["trace"] = out
        return out

    def trace_integral_at(self, xq):
        xg = self.smooth.x
        cum = self.boundary_trace_integral()
        if xg.size == 1:
            return np.zeros(np.shape(xq))
        return np.interp(xq, xg, cum)


def build_kernel_set(l_snap, mats, phi, params, nx=400, ny=200, point_term=True) -> KernelSet:
    smooth = solve_q_psi(l_snap, mats, phi, params, nx, ny, "smooth")
    point = solve_q_psi(l_snap, mats, phi, params, nx, ny, "point") if point_term else None
    weight = -float(mats.C @ mats.B) / params.D
    return KernelSet(float(l_snap), phi, smooth, point, weight, params.D)


class KernelCache:
    """Thread-safe snapshot cache keyed by quantized axon length.

    A lookup returns the nearest existing snapshot within ``tol_l`` of the
    query; otherwise a new snapshot is built at the centre of the query's
    quantization bin. Entries are inserted only after they are fully built.
    """

    def __init__(self, builder, tol_l: float):
        if tol_l <= 0:
            raise ValueError("tol_l must be positive")
        self.builder = builder
        self.tol_l = float(tol_l)
        self._entries: dict[int, KernelSet] = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def key(self, l: float) -> int:
        return int(round(l / self.tol_l))

    def __len__(self):
        return len(self._entries)

    def entries(self):
        with self._lock:
            return dict(self._entries)

    def get(self, l: float) -> KernelSet:
        if not l > 0:
            raise ValueError(f"axon length must be positive (got {l})")
        k = self.key(l)
        with self._lock:
            best = None
            for kk in (k - 1, k, k + 1):
                ks = self._entries.get(kk)
                if ks is not None and abs(ks.l_snap - l) <= self.tol_l:
                    if best is None or abs(ks.l_snap - l) < abs(best.l_snap - l):
                        best = ks
            if best is not None:
                self.hits += 1
                return best
            return self._build_locked(k)

    def at_key(self, k: int) -> KernelSet:
        """Snapshot built exactly at ``k * tol_l`` (built on first use)."""
        if k < 1:
            raise ValueError(f"key {k} maps to a non-positive length")
        with self._lock:
            ks = self._entries.get(k)
            if ks is not None and ks.l_snap == k * self.tol_l:
                self.hits += 1
                return ks
            return self._build_locked(k)

    def bracket(self, l: float):
        """Snapshots at the two bin centres around ``l`` and the blend weight of the upper one."""
        if not l > 0:
            raise ValueError(f"axon length must be positive (got {l})")
        k = max(int(np.floor(l / self.tol_l)), 1)
        theta = min(max(l / self.tol_l - k, 0.0), 1.0)
        return self.at_key(k), self.at_key(k + 1), theta

    def _build_locked(self, k):
        self.misses += 1
        ks = self.builder(k * self.tol_l)
        self._entries[k] = ks
        return ks


def dump_kernels(kset: KernelSet, q_path, psi_path):
    """Write the combined kernels as CSV.

    ``q_path`` columns: x, y, q (row-major in x then y).
    ``psi_path`` columns: x, psi1, psi2.
    """
    q = kset.q_table()
    psi = kset.psi_table()
    with open(q_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "q"])
        for n, xv in enumerate(kset.x):
            for j, yv in enumerate(kset.y):
                w.writerow([f"{xv:.10e}", f"{yv:.10e}", f"{q[n, j]:.12e}"])
    with open(psi_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "psi1", "psi2"])
        for n, xv in enumerate(kset.x):
            w.writerow([f"{xv:.10e}", f"{psi[n, 0]:.12e}", f"{psi[n, 1]:.12e}"])
