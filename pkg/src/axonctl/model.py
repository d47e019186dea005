"""Plant constants, equilibrium, error coordinates and the linearized ODE block.

Unit convention used throughout the package (the model itself is unit-free):
lengths in micrometres, time in minutes, concentrations in micromolar.
Any consistent system works as long as every parameter uses it.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np


class ParameterError(ValueError):
    """Raised when plant constants violate their admissibility constraints.

    ``violations`` lists every failed constraint, not just the first one.
    """

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("invalid parameters: " + "; ".join(self.violations))


@dataclass(frozen=True)
class PhysicalParams:
    """Constants of the tubulin/axon-length plant.

    D : diffusion constant [um^2/min]
    a : advection velocity [um/min]
    g : degradation rate [1/min]
    l_c : growth ratio [um]
    r_g : lumped growth rate [um^4/(uM min)]
    r_g_tilde : microtubule reaction rate [1/min]
    c_inf : equilibrium cone concentration [uM]
    D_e : input delay [min]
    l_s : desired axon length [um]
    """

    D: float = 1.0
    a: float = 0.1
    g: float = 0.1
    l_c: float = 0.5
    r_g: float = 0.5
    r_g_tilde: float = 0.05
    c_inf: float = 1.0
    D_e: float = 0.5
    l_s: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            object.__setattr__(self, f.name, float(getattr(self, f.name)))
        problems = []
        for name, ok, rule in [
            ("D", self.D > 0, "> 0"),
            ("g", self.g >= 0, ">= 0"),
            ("l_c", self.l_c > 0, "> 0"),
            ("r_g", self.r_g > 0, "> 0"),
            ("c_inf", self.c_inf > 0, "> 0"),
            ("D_e", self.D_e >= 0, ">= 0"),
            ("l_s", self.l_s > 0, "> 0"),
        ]:
            value = getattr(self, name)
            if not np.isfinite(value) or not ok:
                problems.append(f"{name} must be {rule} (got {value!r})")
        for name in ("a", "r_g_tilde"):
            if not np.isfinite(getattr(self, name)):
                problems.append(f"{name} must be finite")
        if problems:
            raise ParameterError(problems)

    def admits_domain_bound(self, l_bar: float) -> bool:
        """Admissibility of the domain bound: D / (4 l_bar) >= a."""
        return self.D / (4.0 * l_bar) >= self.a

    def replace(self, **changes) -> "PhysicalParams":
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values.update(changes)
        return PhysicalParams(**values)

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass(frozen=True)
class SteadyState:
    lambda_plus: float
    lambda_minus: float
    K_plus: float
    K_minus: float
    q_s_star: float
    c_inf: float
    l_s: float

    def c_eq(self, x, deriv: int = 0):
        """Equilibrium profile (or its ``deriv``-th derivative) at ``x``.

        Defined by the closed form for any x, including x > l_s.
        """
        x = np.asarray(x, dtype=float)
        lp, lm = self.lambda_plus, self.lambda_minus
        return self.c_inf * (
            self.K_plus * lp**deriv * np.exp(lp * (x - self.l_s))
            + self.K_minus * lm**deriv * np.exp(lm * (x - self.l_s))
        )

    @property
    def k_n(self) -> float:
        # |K| rather than K: the bound must also hold when one weight is negative
        return max(
            self.c_inf * abs(self.K_plus) * self.lambda_plus**2,
            self.c_inf * abs(self.K_minus) * self.lambda_minus**2,
        )

    def h_n(self, r_g: float) -> float:
        return max(
            2 * self.c_inf * r_g**2 * self.K_plus**2 * self.lambda_plus**4,
            2 * self.c_inf * r_g**2 * self.K_minus**2 * self.lambda_minus**4,
        )


def compute_steady_state(p: PhysicalParams) -> SteadyState:
    """Equilibrium of the plant at the target length ``p.l_s``.

    Returns the spatial eigenvalues, their mode weights and the soma flux
    ``q_s_star`` that holds the axon at ``l_s``.
    """
    disc = np.sqrt(p.a**2 + 4.0 * p.D * p.g)
    # the root without cancellation first, the other from lp * lm = -g/D
    if p.a >= 0:
        lp = (p.a + disc) / (2.0 * p.D)
        lm = -2.0 * p.g / (p.a + disc) if p.a + disc > 0 else 0.0
    else:
        lm = (p.a - disc) / (2.0 * p.D)
        lp = -2.0 * p.g / (p.a - disc)
    if disc == 0.0:
        # only reachable with a = g = 0, where the numerator vanishes too
        kp = km = 0.5
    else:
        kp = 0.5 + (p.a - 2.0 * p.g * p.l_c) / (2.0 * disc)
        km = 0.5 - (p.a - 2.0 * p.g * p.l_c) / (2.0 * disc)
    q_star = -p.c_inf * (kp * lp * np.exp(-lp * p.l_s) + km * lm * np.exp(-lm * p.l_s))
    return SteadyState(float(lp), float(lm), float(kp), float(km), float(q_star),
                       p.c_inf, p.l_s)


@dataclass(frozen=True)
class SystemMatrices:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    a_tilde: float
    beta: float
    kappa: float


def system_matrices(p: PhysicalParams) -> SystemMatrices:
    a_tilde = (p.a - p.r_g * p.c_inf) / p.l_c - p.g - p.r_g_tilde
    beta = p.D / p.l_c
    kappa = p.r_g / p.l_c
    A = np.array([[a_tilde, 0.0], [p.r_g, 0.0]])
    B = np.array([-beta, 0.0])
    C = np.array([1.0, -(p.a - p.g * p.l_c) * p.c_inf / p.D])
    for m in (A, B, C):
        m.setflags(write=False)
    return SystemMatrices(A, B, C, a_tilde, beta, kappa)


def error_coordinates(c_profile, x, c_c, l, q_s_delayed, ss: SteadyState):
    """Map physical state to reference-error coordinates.

    Parameters
    ----------
    c_profile : array
        Concentration sampled at the nodes ``x``.
    x : array
        Spatial nodes, all inside ``[0, l]``.
    c_c, l : float
        Growth-cone concentration and axon length.
    q_s_delayed : float
        Soma flux currently acting on the plant.

    Returns
    -------
    u : array
        ``c - c_eq`` on the nodes.
    X : array, shape (2,)
        ``[c_c - c_inf, l - l_s]``.
    U_delayed : float
        ``-(q_s - q_s_star)``.
    """
    x = np.asarray(x, dtype=float)
    if x.size and (x.min() < -1e-12 * max(l, 1.0) or x.max() > l * (1 + 1e-12)):
        raise ValueError(f"profile grid [{x.min()}, {x.max()}] exceeds domain [0, {l}]")
    u = np.asarray(c_profile, dtype=float) - ss.c_eq(x)
    X = np.array([c_c - ss.c_inf, l - ss.l_s])
    U = -(q_s_delayed - ss.q_s_star)
    return u, X, U


def physical_coordinates(u, x, X, U_delayed, ss: SteadyState):
    """Inverse of :func:`error_coordinates`: returns (c, c_c, l, q_s)."""
    c = np.asarray(u, dtype=float) + ss.c_eq(x)
    return c, X[0] + ss.c_inf, X[1] + ss.l_s, ss.q_s_star - U_delayed


def h_tilde(z2, ss: SteadyState):
    """Cone-boundary offset ``u(l) - z1`` caused by evaluating c_eq off l_s."""
    z2 = np.asarray(z2, dtype=float)
    return ss.c_inf * (1.0 - ss.K_plus * np.exp(ss.lambda_plus * z2)
                       - ss.K_minus * np.exp(ss.lambda_minus * z2))


def h_bar(X, ss: SteadyState, C):
    """Nonlinear remainder of the Dirichlet condition, ``z1 + h~(z2) - C.X``."""
    X = np.asarray(X, dtype=float)
    return X[0] + h_tilde(X[1], ss) - np.tensordot(C, X, axes=1)


def h_bar_expanded(z2, ss: SteadyState):
    """Same quantity as :func:`h_bar`, written as a sum of ``1 + s - e^s`` terms.

    Only depends on z2; agrees with :func:`h_bar` because the mode weights
    satisfy (a - g l_c)/D = K+ lambda+ + K- lambda-.
    """
    z2 = np.asarray(z2, dtype=float)
    sp, sm = ss.lambda_plus * z2, ss.lambda_minus * z2
    # -expm1(s) + s keeps precision for tiny s
    return ss.c_inf * (ss.K_plus * (sp - np.expm1(sp)) + ss.K_minus * (sm - np.expm1(sm)))


def h_bar_rate(X, ss: SteadyState, r_g: float):
    """Time derivative of h_bar along the length dynamics dz2/dt = r_g z1."""
    X = np.asarray(X, dtype=float)
    z1, z2 = X[0], X[1]
    dh = -ss.c_inf * (ss.K_plus * ss.lambda_plus * np.expm1(ss.lambda_plus * z2)
                      + ss.K_minus * ss.lambda_minus * np.expm1(ss.lambda_minus * z2))
    return dh * r_g * z1


def f_nonlinear(X, kappa: float):
    X = np.asarray(X, dtype=float)
    return np.array([-kappa * X[0] ** 2, 0.0])


def local_z2_radius(ss: SteadyState) -> float:
    """Largest |z2| for which the quadratic h_bar bound is valid."""
    lam = max(abs(ss.lambda_plus), abs(ss.lambda_minus))
    return np.inf if lam == 0 else 1.79 / lam
