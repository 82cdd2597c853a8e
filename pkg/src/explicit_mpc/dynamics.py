"""Plant models: discrete LTI systems and the nonisothermal CSTR.

The CSTR is integrated internally in nondimensional variables
(concentration / 10 mol/L, temperature (T - 300 K) / 100 K); dimensional
quantities are converted at the boundary with :class:`NondimMap`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_discrete_lyapunov
from scipy.optimize import brentq

from . import _kernels
from ._io import write_matrix_csv

DEFAULT_DT = 0.05
DEFAULT_SUBSTEPS = 10
STABILITY_THRESHOLD = -1e-9


class DivergenceError(RuntimeError):
    """Raised when integration produces a non-finite state."""


@dataclass(frozen=True)
class LinearSystem:
    """Discrete LTI system ``x+ = A x + B u``, ``y = C x``."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray | None = None

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        B = np.asarray(self.B, dtype=float)
        if B.ndim == 1:
            B = B[:, None]
        if A.shape[0] != A.shape[1]:
            raise ValueError(f"A must be square, got shape {A.shape}")
        if B.shape[0] != A.shape[0]:
            raise ValueError(f"B has {B.shape[0]} rows, A has dimension {A.shape[0]}")
        C = np.eye(A.shape[0]) if self.C is None else np.atleast_2d(np.asarray(self.C, dtype=float))
        if C.shape[1] != A.shape[0]:
            raise ValueError(f"C has {C.shape[1]} columns, A has dimension {A.shape[0]}")
        for name, M in (("A", A), ("B", B), ("C", C)):
            if not np.all(np.isfinite(M)):
                raise ValueError(f"{name} has non-finite entries")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "C", C)

    @property
    def n_states(self) -> int:
        return self.A.shape[0]

    @property
    def n_inputs(self) -> int:
        return self.B.shape[1]


SINGULAR_SYSTEM = LinearSystem(
    A=[[0.4079, 0.4031], [0.4157, 0.4109]],
    B=[[0.7071], [0.7071]],
)

BEMPORAD_SYSTEM = LinearSystem(
    A=[[0.7326, -0.0861], [0.1722, 0.9909]],
    B=[[0.0609], [0.0064]],
)


def step_linear(sys: LinearSystem, x, u) -> np.ndarray:
    x = np.asarray(x, dtype=float).reshape(-1)
    u = np.atleast_1d(np.asarray(u, dtype=float)).reshape(-1)
    if x.size != sys.n_states or u.size != sys.n_inputs:
        raise ValueError(
            f"dimension mismatch: x has {x.size} (expected {sys.n_states}), "
            f"u has {u.size} (expected {sys.n_inputs})"
        )
    return sys.A @ x + sys.B @ u


def linear_diagnostics(sys: LinearSystem) -> tuple[np.ndarray, np.ndarray]:
    """Eigenvalues of ``A`` and Hankel singular values, both sorted descending.

    Hankel values are ``sqrt(eig(Wc Wo))`` with the Gramians solved from
    ``A Wc A' - Wc + B B' = 0`` and ``A' Wo A - Wo + C' C = 0``.
    """
    eig = np.linalg.eigvals(sys.A)
    eig = eig[np.argsort(-np.abs(eig))]
    rho = np.max(np.abs(eig))
    if rho >= 1.0:
        raise ValueError(
            f"Hankel singular values need a Schur-stable A; spectral radius is {rho:.6g}"
        )
    wc = solve_discrete_lyapunov(sys.A, sys.B @ sys.B.T)
    wo = solve_discrete_lyapunov(sys.A.T, sys.C.T @ sys.C)
    hsv = np.sqrt(np.abs(np.linalg.eigvals(wc @ wo).real))
    if np.all(np.abs(eig.imag) < 1e-14):
        eig = eig.real
    return eig, np.sort(hsv)[::-1]


# --------------------------------------------------------------------------
# CSTR


@dataclass(frozen=True)
class CstrParams:
    e_over_r: float = 6000.0
    k0: float = float(np.exp(17.5))
    dh_rhocp: float = -16.0
    ua_rhocpv: float = 0.3
    q_over_v: float = 1.0
    ca0: float = 10.0
    t0: float = 300.0

    def __post_init__(self):
        for name in ("e_over_r", "k0", "ua_rhocpv", "q_over_v", "ca0", "t0"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.dh_rhocp > 0:
            raise ValueError("dh_rhocp must be negative for an exothermic reaction")


@dataclass(frozen=True)
class NondimMap:
    conc_scale: float = 10.0
    temp_offset: float = 300.0
    temp_scale: float = 100.0

    def conc_hat(self, c):
        return np.asarray(c) / self.conc_scale

    def conc(self, c_hat):
        return np.asarray(c_hat) * self.conc_scale

    def temp_hat(self, t):
        return (np.asarray(t) - self.temp_offset) / self.temp_scale

    def temp(self, t_hat):
        return np.asarray(t_hat) * self.temp_scale + self.temp_offset


NONDIM = NondimMap()


@dataclass(frozen=True)
class CstrState:
    """Nondimensional reactor state."""

    ca_hat: float
    tr_hat: float
    ca0_hat: float = field(default=1.0, compare=False)

    @property
    def cb_hat(self) -> float:
        return self.ca0_hat - self.ca_hat

    def as_array(self) -> np.ndarray:
        return np.array([self.ca_hat, self.tr_hat])


def param_vector(p: CstrParams, nd: NondimMap = NONDIM) -> np.ndarray:
    return np.array([
        p.e_over_r, p.k0, p.dh_rhocp, p.ua_rhocpv, p.q_over_v, p.ca0, p.t0,
        nd.conc_scale, nd.temp_offset, nd.temp_scale,
    ])


def ca0_hat(p: CstrParams, nd: NondimMap = NONDIM) -> float:
    return p.ca0 / nd.conc_scale


def rate_constant(p: CstrParams, tr):
    return p.k0 * np.exp(-p.e_over_r / np.asarray(tr, dtype=float))


def cstr_rhs(p: CstrParams, ca: float, tr: float, tc: float) -> tuple[float, float]:
    """Dimensional time derivatives ``(dCA/dt [mol/L/s], dTr/dt [K/s])``."""
    if tr <= 0 or tc <= 0:
        raise ValueError(f"absolute temperatures must be positive (tr={tr}, tc={tc})")
    k = p.k0 * np.exp(-p.e_over_r / tr)
    dca = p.q_over_v * (p.ca0 - ca) - k * ca
    dtr = p.q_over_v * (p.t0 - tr) - p.dh_rhocp * k * ca + p.ua_rhocpv * (tc - tr)
    return float(dca), float(dtr)


def cstr_rhs_hat(p: CstrParams, x_hat, u_hat, nd: NondimMap = NONDIM) -> np.ndarray:
    c, t = x_hat
    return np.array(_kernels.rhs_hat(param_vector(p, nd), float(c), float(t), float(u_hat)))


def cstr_jacobian_hat(p: CstrParams, x_hat, u_hat, nd: NondimMap = NONDIM) -> np.ndarray:
    """Continuous-time state Jacobian of the nondimensional RHS (2x2)."""
    c, t = x_hat
    j = _kernels.jac_hat(param_vector(p, nd), float(c), float(t), float(u_hat))
    return np.array([[j[0], j[1]], [j[2], j[3]]])


def integrate_cstr(
    p: CstrParams,
    x_hat,
    u_hat: float,
    dt: float = DEFAULT_DT,
    substeps: int = DEFAULT_SUBSTEPS,
    nd: NondimMap = NONDIM,
) -> np.ndarray:
    """Advance the nondimensional state one sample with constant coolant input."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    x_hat = np.asarray(x_hat.as_array() if isinstance(x_hat, CstrState) else x_hat, dtype=float)
    c, t = _kernels.rk4_step(param_vector(p, nd), x_hat[0], x_hat[1], float(u_hat), dt, int(substeps))
    out = np.array([c, t])
    if not np.all(np.isfinite(out)):
        raise DivergenceError(f"non-finite state after integration from {x_hat} with u={u_hat}")
    return out


# --------------------------------------------------------------------------
# steady states and bifurcation scan


def _steady_tc_of_tr(p: CstrParams, tr):
    """Coolant temperature (K) that makes ``tr`` (K) a steady state."""
    k = rate_constant(p, tr)
    ca = p.q_over_v * p.ca0 / (p.q_over_v + k)
    return tr - (p.q_over_v * (p.t0 - tr) - p.dh_rhocp * k * ca) / p.ua_rhocpv


def steady_input_hat(p: CstrParams, x_hat, nd: NondimMap = NONDIM) -> float:
    """Nondimensional coolant temperature holding the reactor at temperature ``x_hat[1]``."""
    return float(nd.temp_hat(_steady_tc_of_tr(p, nd.temp(x_hat[1]))))


@dataclass
class SteadyStates:
    tc_hat: float
    states: list[np.ndarray]
    stable: list[bool]


def compute_steady_states(
    p: CstrParams,
    tc_hat_grid,
    nd: NondimMap = NONDIM,
    n_bracket: int = 4000,
) -> list[SteadyStates]:
    """All real steady states for each nondimensional coolant temperature.

    The two steady-state equations reduce to a scalar equation in the
    reactor temperature, whose roots are bracketed on a grid and refined
    with Brent's method.
    """
    tc_hat_grid = np.asarray(tc_hat_grid, dtype=float)
    if np.any(np.diff(tc_hat_grid) < 0):
        raise ValueError("tc grid must be sorted")
    qv, ua = p.q_over_v, p.ua_rhocpv
    out = []
    for tc_hat in tc_hat_grid:
        tc = float(nd.temp(tc_hat))

        def g(tr):
            return _steady_tc_of_tr(p, tr) - tc

        # steady temperatures lie between the no-reaction and full-conversion values
        lo = (qv * p.t0 + ua * tc) / (qv + ua)
        hi = lo - p.dh_rhocp * p.ca0 * qv / (qv + ua)
        grid = np.linspace(lo - 1.0, hi + 1.0, n_bracket)
        vals = g(grid)
        roots = []
        for i in np.nonzero(np.sign(vals[:-1]) * np.sign(vals[1:]) <= 0)[0]:
            if vals[i] == 0.0:
                r = grid[i]
            elif vals[i + 1] == 0.0:
                continue
            else:
                r = brentq(g, grid[i], grid[i + 1], xtol=1e-14, rtol=1e-15, maxiter=200)
            roots.append(r)
        states, stable = [], []
        for tr in roots:
            k = rate_constant(p, tr)
            ca = qv * p.ca0 / (qv + k)
            x_hat = np.array([float(nd.conc_hat(ca)), float(nd.temp_hat(tr))])
            ev = np.linalg.eigvals(cstr_jacobian_hat(p, x_hat, tc_hat, nd))
            states.append(x_hat)
            stable.append(bool(np.all(ev.real < STABILITY_THRESHOLD)))
        out.append(SteadyStates(float(tc_hat), states, stable))
    return out


def fold_points(p: CstrParams, nd: NondimMap = NONDIM, tr_range=(250.0, 800.0), n: int = 20001):
    """Saddle-node points: local extrema of the steady coolant temperature along the branch.

    Returns a list of ``(tc_hat, x_hat)``.
    """
    trs = np.linspace(*tr_range, n)
    tcs = _steady_tc_of_tr(p, trs)
    d = np.diff(tcs)
    folds = []
    for i in np.nonzero(np.sign(d[:-1]) != np.sign(d[1:]))[0]:
        # refine the extremum on the bracketing interval by root-finding on the slope
        def slope(tr, h=1e-6):
            return (_steady_tc_of_tr(p, tr + h) - _steady_tc_of_tr(p, tr - h)) / (2 * h)

        tr = brentq(slope, trs[i], trs[i + 2], xtol=1e-12)
        k = rate_constant(p, tr)
        ca = p.q_over_v * p.ca0 / (p.q_over_v + k)
        folds.append((float(nd.temp_hat(_steady_tc_of_tr(p, tr))),
                      np.array([float(nd.conc_hat(ca)), float(nd.temp_hat(tr))])))
    return folds


def write_bifurcation_csv(path, scan: list[SteadyStates], p: CstrParams, nd: NondimMap = NONDIM,
                          header: dict | None = None):
    c0 = ca0_hat(p, nd)
    rows = [[row.tc_hat, float(x[0]), float(c0 - x[0]), int(s)]
            for row in scan for x, s in zip(row.states, row.stable)]
    write_matrix_csv(path, ["tc_hat", "ca_hat", "cb_hat", "stable"], np.array(rows).reshape(-1, 4), header)
