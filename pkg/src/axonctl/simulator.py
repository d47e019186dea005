"""Time integration of the delayed tubulin/axon-length plant.

The moving domain [0, l(t)] is mapped to xi in [0, 1] (x = xi l). Nodes are
xi_j = j h, j = 0..N+1, h = 1/(N+1); node 0 carries the soma flux condition,
node N+1 the Dirichlet condition c = c_c.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.linalg import solve_banded

from .model import PhysicalParams, SteadyState, compute_steady_state


class DomainCollapseError(RuntimeError):
    pass


class DelayLineError(RuntimeError):
    pass


SCHEMES = ("implicit-euler", "crank-nicolson")
MODES = ("compensated", "uncompensated", "open-loop")


def delay_steps(D_e: float, dt: float) -> int:
    """Number of steps spanning the delay; raises if dt does not divide D_e."""
    ratio = D_e / dt
    n = int(round(ratio))
    if abs(ratio - n) > 1e-6 * max(1.0, ratio):
        raise DelayLineError(f"dt={dt} does not divide D_e={D_e}")
    return n


class DelayLine:
    """Ring buffer holding U on [t - D_e, t] at spacing dt.

    Discrete form of the transport equation v_t = v_x, v(D_e) = U(t):
    reading the oldest slot gives v(0, t) = U(t - D_e).
    """

    def __init__(self, D_e: float, dt: float, prehistory: float = 0.0, t0: float = 0.0):
        self.n = delay_steps(D_e, dt)
        self.dt = dt
        self.D_e = D_e
        self._buf = np.full(self.n + 1, float(prehistory))
        self._head = self.n  # index of newest entry
        self._t_next = t0
        self.t_head = None

    def __len__(self):
        return self.n + 1

    def push(self, U: float, t: float | None = None):
        if t is not None and abs(t - self._t_next) > 1e-9 * max(1.0, abs(t)) + 1e-9 * self.dt:
            raise DelayLineError(f"push at t={t}, expected t={self._t_next}")
        self._head = (self._head + 1) % (self.n + 1)
        self._buf[self._head] = U
        self.t_head = self._t_next
        self._t_next = self._t_next + self.dt

    def history(self) -> np.ndarray:
        """Values U(t - D_e), ..., U(t), oldest first."""
        idx = (self._head + 1 + np.arange(self.n + 1)) % (self.n + 1)
        return self._buf[idx].copy()

    def sample(self, offset: int = 0) -> float:
        """U(t_head - D_e + offset * dt); offset 0 is the delayed input."""
        if not 0 <= offset <= self.n:
            raise DelayLineError(f"offset {offset} outside [0, {self.n}]")
        return float(self._buf[(self._head + 1 + offset) % (self.n + 1)])


@dataclass
class SimConfig:
    N: int = 200
    dt: float = 1e-3
    t_end: float = 20.0
    scheme: str = "implicit-euler"
    mode: str = "compensated"
    amplitude: float = 0.05
    seed: int | None = None
    record_every: int = 50
    l_min_frac: float = 0.01
    overflow_guard: float = 1e6
    prehistory: float = 0.0

    def __post_init__(self):
        problems = []
        if self.N < 8:
            problems.append("N must be >= 8")
        if not self.dt > 0:
            problems.append("dt must be > 0")
        if not self.t_end > 0:
            problems.append("t_end must be > 0")
        if self.scheme not in SCHEMES:
            problems.append(f"scheme must be one of {SCHEMES}")
        if self.mode not in MODES:
            problems.append(f"mode must be one of {MODES}")
        if self.record_every < 1:
            problems.append("record_every must be >= 1")
        if problems:
            raise ValueError("; ".join(problems))


@dataclass
class SimState:
    c: np.ndarray
    c_c: float
    l: float
    t: float = 0.0

    @property
    def xi(self):
        return np.linspace(0.0, 1.0, self.c.size)

    @property
    def x(self):
        return self.xi * self.l

    def copy(self):
        return SimState(self.c.copy(), self.c_c, self.l, self.t)


def equilibrium_state(params: PhysicalParams, N: int, ss: SteadyState | None = None) -> SimState:
    ss = ss or compute_steady_state(params)
    xi = np.linspace(0.0, 1.0, N + 2)
    c = ss.c_eq(xi * params.l_s)
    c[-1] = params.c_inf
    return SimState(c, params.c_inf, params.l_s, 0.0)


def perturbed_state(params: PhysicalParams, N: int, amplitude: float, seed=None) -> SimState:
    """Equilibrium plus a half-cosine bump and a length offset.

    The bump cos(pi xi / 2) has zero slope at the soma and vanishes at the
    cone, so both boundary conditions stay consistent. Without a seed the
    profile bump is ``amplitude * c_inf`` and the length is
    ``(1 + amplitude) l_s``; a seed draws both coefficients from
    +-[0.5, 1] * amplitude.
    """
    ss = compute_steady_state(params)
    cu, cl = 1.0, 1.0
    if seed is not None:
        rng = np.random.default_rng(seed)
        cu, cl = rng.uniform(0.5, 1.0, 2) * rng.choice([-1.0, 1.0], 2)
    l0 = params.l_s * (1.0 + cl * amplitude)
    xi = np.linspace(0.0, 1.0, N + 2)
    c = ss.c_eq(xi * l0) + cu * amplitude * params.c_inf * np.cos(0.5 * np.pi * xi)
    return SimState(c, float(c[-1]), l0, 0.0)


def _pde_matrix(n_nodes, l, l_dot, params, h):
    """Banded (l=1, u=2) form of the semi-discrete operator on nodes 0..N.

    Returns the lower, main, upper and second-upper bands and the coupling
    of node N to the Dirichlet node.
    """
    D, a, g = params.D, params.a, params.g
    N1 = n_nodes - 1  # last unknown index (node N)
    xi = np.arange(n_nodes) * h
    diff = D / (l * l * h * h)
    adv = (xi * l_dot / l - a / l) / (2 * h)
    lower = diff - adv
    diag = np.full(n_nodes, -2 * diff - g)
    upper = diff + adv
    upper2 = np.zeros(n_nodes)
    # node 0: second-order Neumann closure c_xixi ~ (-7c0 + 8c1 - c2)/(2h^2) - 3 c_xi/h
    diag[0] = -3.5 * diff - g
    upper[0] = 4.0 * diff
    upper2[0] = -0.5 * diff
    lower[0] = 0.0
    return lower, diag, upper, upper2, upper[N1]


def _apply(lower, diag, upper, upper2, c):
    out = diag * c
    out[1:] += lower[1:] * c[:-1]
    out[:-1] += upper[:-1] * c[1:]
    out[:-2] += upper2[:-2] * c[2:]
    return out


def pde_step(state: SimState, params: PhysicalParams, q_s_delayed: float, dt: float,
             scheme: str = "implicit-euler", l_dot: float | None = None, source=None,
             c_right: float | None = None, q_s_prev: float | None = None,
             c_right_prev: float | None = None) -> np.ndarray:
    """Advance the concentration profile by one implicit step.

    Parameters
    ----------
    q_s_delayed : float
        Soma flux acting at the new time level (c_x(0) = -q_s).
    l_dot : float, optional
        Domain velocity; defaults to r_g (c_c - c_inf).
    source : callable(x, t), optional
        Extra volumetric forcing, used by manufactured-solution tests.
    c_right : float, optional
        Dirichlet value at the new level; defaults to ``state.c_c``.
    q_s_prev, c_right_prev : float, optional
        Boundary data at the old level (Crank-Nicolson only); default to the
        new-level values.

    Returns
    -------
    numpy.ndarray
        New profile on the xi-grid (length unchanged; Dirichlet node set).
    """
    l = state.l
    if l <= 0:
        raise DomainCollapseError(f"axon length {l} <= 0")
    if l_dot is None:
        l_dot = params.r_g * (state.c_c - params.c_inf)
    c = state.c
    n = c.size - 1  # unknowns: nodes 0..N, node N+1 is Dirichlet
    h = 1.0 / n
    c_right = state.c_c if c_right is None else c_right
    q_prev = q_s_delayed if q_s_prev is None else q_s_prev
    cr_prev = c_right if c_right_prev is None else c_right_prev
    lo, di, up, up2, cD = _pde_matrix(n, l, l_dot, params, h)
    diff = params.D / (l * l * h * h)

    def bvec(q_s, cr, t):
        b = np.zeros(n)
        cxi0 = -l * q_s
        b[0] = diff * (-3.0 * h * cxi0) - params.a / l * cxi0
        b[-1] += cD * cr
        if source is not None:
            b += source(np.arange(n) * h * l, t)
        return b

    ab = np.zeros((4, n))
    if scheme == "implicit-euler":
        theta = 1.0
    elif scheme == "crank-nicolson":
        theta = 0.5
    else:
        raise ValueError(f"unknown scheme {scheme!r}")
    ab[0, 2:] = -theta * dt * up2[:-2]
    ab[1, 1:] = -theta * dt * up[:-1]
    ab[2] = 1.0 - theta * dt * di
    ab[3, :-1] = -theta * dt * lo[1:]
    rhs = c[:n] + theta * dt * bvec(q_s_delayed, c_right, state.t + dt)
    if theta < 1.0:
        rhs += (1 - theta) * dt * (_apply(lo, di, up, up2, c[:n]) + bvec(q_prev, cr_prev, state.t))
    new = np.empty_like(c)
    new[:n] = solve_banded((1, 2), ab, rhs)
    new[n] = c_right
    return new


def cone_gradient(c: np.ndarray, l: float) -> float:
    """Second-order one-sided c_x at x = l."""
    h = 1.0 / (c.size - 1)
    return (3 * c[-1] - 4 * c[-2] + c[-3]) / (2 * h * l)


def soma_gradient(c: np.ndarray, l: float) -> float:
    h = 1.0 / (c.size - 1)
    return (-3 * c[0] + 4 * c[1] - c[2]) / (2 * h * l)


def ode_rhs(c_c, l, cx_l, params: PhysicalParams):
    p = params
    dcc = ((p.a - p.g * p.l_c) * c_c - p.D * cx_l
           - (p.r_g * c_c + p.r_g_tilde * p.l_c) * (c_c - p.c_inf)) / p.l_c
    return dcc, p.r_g * (c_c - p.c_inf)


def ode_step(state: SimState, params: PhysicalParams, dt: float, l_min: float | None = None) -> SimState:
    """One Heun (RK2) step of the cone/length ODEs with frozen c_x(l)."""
    l_min = params.l_s / 100 if l_min is None else l_min
    cx_l = cone_gradient(state.c, state.l)
    k1 = ode_rhs(state.c_c, state.l, cx_l, params)
    c1, l1 = state.c_c + dt * k1[0], state.l + dt * k1[1]
    k2 = ode_rhs(c1, l1, cx_l, params)
    c_c = state.c_c + 0.5 * dt * (k1[0] + k2[0])
    l = state.l + 0.5 * dt * (k1[1] + k2[1])
    if not l > l_min:
        raise DomainCollapseError(f"axon length {l:.6g} fell below l_min={l_min:.6g}")
    c = state.c.copy()
    c[-1] = c_c
    return SimState(c, c_c, l, state.t)


def equilibrium_drift_constant(params: PhysicalParams) -> float:
    """Constant c1 in the per-step equilibrium drift bound c1 dt h^2.

    Built from the truncation errors of the stencils: the interior centred
    second difference (D l^2 c'''' / 12), the Neumann closure at the soma
    (D l^2 c'''' / 6), the centred advection term (|a| l^2 c''' / 6) and the
    one-sided cone gradient feeding the ODE (D l c''' / (3 l_c)), with a
    safety factor of 2.
    """
    ss = compute_steady_state(params)
    # termwise bound on [0, l_s]: each exponential peaks at an end point
    m3 = params.c_inf * sum(abs(K) * abs(lam) ** 3 * max(1.0, math.exp(-lam * params.l_s))
                            for K, lam in ((ss.K_plus, ss.lambda_plus), (ss.K_minus, ss.lambda_minus)))
    m4 = params.c_inf * sum(abs(K) * lam ** 4 * max(1.0, math.exp(-lam * params.l_s))
                            for K, lam in ((ss.K_plus, ss.lambda_plus), (ss.K_minus, ss.lambda_minus)))
    L = params.l_s
    return 2.0 * (params.D * L**2 * m4 / 6 + abs(params.a) * L**2 * m3 / 6
                  + params.D * L * m3 / (3 * params.l_c))


TRAJECTORY_COLUMNS = ["t", "l", "c_c", "U_now", "U_applied", "z1", "z2", "norm_u_L2",
                      "norm_u_H1", "V_total", "V1", "V2", "V3", "V4", "V5"]


@dataclass
class Frame:
    t: float
    c: np.ndarray
    c_c: float
    l: float
    U_now: float
    U_applied: float
    history: np.ndarray  # U on [t - D_e, t], oldest first


@dataclass
class Trajectory:
    params: PhysicalParams
    config: SimConfig
    frames: list = field(default_factory=list)
    termination: str = "completed"
    message: str = ""
    lyapunov: dict | None = None  # column name -> array, filled by diagnostics

    def __len__(self):
        return len(self.frames)

    @property
    def t(self):
        return np.array([f.t for f in self.frames])

    @property
    def l(self):
        return np.array([f.l for f in self.frames])

    @property
    def c_c(self):
        return np.array([f.c_c for f in self.frames])

    def errors(self):
        ss = compute_steady_state(self.params)
        return np.array([[f.c_c - ss.c_inf, f.l - ss.l_s] for f in self.frames])

    def norms(self):
        """Per-frame (||u||_L2, ||u||_H1, ||v||_H1, Z)."""
        ss = compute_steady_state(self.params)
        out = np.empty((len(self.frames), 4))
        for i, f in enumerate(self.frames):
            x = np.linspace(0.0, f.l, f.c.size)
            u = f.c - ss.c_eq(x)
            out[i] = state_norms(u, x, f.history, self.config.dt, f.c_c - ss.c_inf, f.l - ss.l_s)
        return out

    def rows(self):
        nrm = self.norms()
        X = self.errors()
        lyap = self.lyapunov or {}
        for i, f in enumerate(self.frames):
            vals = [f.t, f.l, f.c_c, f.U_now, f.U_applied, X[i, 0], X[i, 1], nrm[i, 0], nrm[i, 1]]
            for key in TRAJECTORY_COLUMNS[9:]:
                col = lyap.get(key)
                vals.append(float(col[i]) if col is not None else float("nan"))
            yield vals

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TRAJECTORY_COLUMNS)
            for vals in self.rows():
                w.writerow([_fmt(v) for v in vals])


def _fmt(v: float) -> str:
    return "nan" if not np.isfinite(v) else f"{v:.12e}"


def _trapz(y, x):
    return float(np.sum(0.5 * (y[1:] + y[:-1]) * np.diff(x))) if len(x) > 1 else 0.0


def state_norms(u, x, history, dt, z1, z2):
    """(||u||_L2, ||u||_H1, ||v||_H1, Z) for one snapshot."""
    ux = np.gradient(u, x, edge_order=2)
    l2 = _trapz(u * u, x)
    h1 = l2 + _trapz(ux * ux, x)
    if history.size > 1:
        xv = np.arange(history.size) * dt
        vx = np.gradient(history, xv, edge_order=2) if history.size > 2 else np.diff(history) / dt * np.ones(2)
        v_h1 = _trapz(history**2, xv) + _trapz(vx**2, xv)
    else:
        v_h1 = 0.0
    Z = h1 + v_h1 + z1 * z1 + z2 * z2
    return math.sqrt(l2), math.sqrt(h1), math.sqrt(v_h1), Z


def run_closed_loop(config: SimConfig, params: PhysicalParams, controller=None,
                    initial: SimState | None = None) -> Trajectory:
    """Simulate the plant under ``controller`` and record a trajectory.

    ``controller(u, X, l, past)`` returns U(t) from the error profile ``u``
    on the current nodes, ``X = [z1, z2]``, the length and ``past`` =
    U on [t - D_e, t - dt] (oldest first). ``None`` means open loop.
    Each step: read the delayed input, advance the PDE, then the ODE, then
    evaluate and push the new input.
    """
    ss = compute_steady_state(params)
    dt = config.dt
    line = DelayLine(params.D_e, dt, prehistory=config.prehistory)
    state = initial.copy() if initial is not None else perturbed_state(
        params, config.N, config.amplitude, config.seed)
    l_min = config.l_min_frac * params.l_s
    traj = Trajectory(params, config)
    n_steps = int(round(config.t_end / dt))

    def control(st):
        if controller is None:
            return 0.0
        x = st.x
        u = st.c - ss.c_eq(x)
        X = np.array([st.c_c - ss.c_inf, st.l - ss.l_s])
        return float(controller(u, X, st.l, line.history()[1:]))

    def record(st, U_now):
        traj.frames.append(Frame(st.t, st.c.copy(), st.c_c, st.l, U_now, line.sample(),
                                 line.history()))

    U = control(state)
    line.push(U, 0.0)
    record(state, U)
    offset = 1 if line.n >= 1 else 0
    for k in range(1, n_steps + 1):
        U_new_level = line.sample(offset)
        U_old_level = line.sample(0)
        try:
            c_new = pde_step(state, params, ss.q_s_star - U_new_level, dt, config.scheme,
                             q_s_prev=ss.q_s_star - U_old_level)
            stepped = SimState(c_new, state.c_c, state.l, state.t)
            state = ode_step(stepped, params, dt, l_min)
        except DomainCollapseError as exc:
            traj.termination, traj.message = "domain-collapse", str(exc)
            break
        state.t = k * dt
        if not np.all(np.isfinite(state.c)) or np.max(np.abs(state.c)) > config.overflow_guard:
            traj.termination, traj.message = "diverged", f"overflow at t={state.t:.6g}"
            break
        U = control(state)
        if not np.isfinite(U) or abs(U) > config.overflow_guard:
            traj.termination, traj.message = "diverged", f"input overflow at t={state.t:.6g}"
            break
        line.push(U, state.t)
        if k % config.record_every == 0 or k == n_steps:
            record(state, U)
    return traj


def summary(traj: Trajectory, fit=None, extra=None) -> dict:
    X = traj.errors()
    nrm = traj.norms()
    out = {
        "termination": traj.termination,
        "message": traj.message,
        "t_final": float(traj.t[-1]) if len(traj) else 0.0,
        "final": {
            "z1": float(X[-1, 0]), "z2": float(X[-1, 1]),
            "norm_u_L2": float(nrm[-1, 0]), "norm_u_H1": float(nrm[-1, 1]), "Z": float(nrm[-1, 3]),
        },
        "initial": {
            "z1": float(X[0, 0]), "z2": float(X[0, 1]),
            "norm_u_H1": float(nrm[0, 1]), "Z": float(nrm[0, 3]),
        },
        "config": asdict(traj.config),
        "params": traj.params.as_dict(),
    }
    if fit is not None:
        out["decay_fit"] = fit
    if extra:
        out.update(extra)
    return out


def write_summary(path, data: dict):
    with open(path, "w") as fh:
        json.dump(data, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"not JSON serializable: {type(o)}")


__all__ = [
    "DelayLine", "DelayLineError", "DomainCollapseError", "SimConfig", "SimState", "Trajectory",
    "pde_step", "ode_step", "run_closed_loop", "equilibrium_state", "perturbed_state",
    "equilibrium_drift_constant", "delay_steps", "state_norms", "summary", "write_summary",
]
