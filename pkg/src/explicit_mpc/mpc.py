"""Implicit MPC solvers.

Linear problems are condensed (states eliminated) into a small dense box
QP solved by a primal active-set method. The quadratic input constraint
``u_0^2 <= x'x`` only touches the first input, so it is folded into the
box as ``|u_0| <= min(u_max, ||x||)``.

The CSTR controller is a 20-variable NLP with box and rate constraints,
solved with SLSQP on an exact discrete-adjoint gradient from several
starting points.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize, nnls

from . import _kernels
from .dynamics import (
    DEFAULT_DT,
    DEFAULT_SUBSTEPS,
    NONDIM,
    CstrParams,
    CstrState,
    LinearSystem,
    NondimMap,
    param_vector,
    ca0_hat,
)

KKT_TOL = 1e-6
FEAS_TOL = 1e-8


class SolverError(RuntimeError):
    """Raised when no start converges; ``policy`` holds the best effort."""

    def __init__(self, message, policy=None):
        super().__init__(message)
        self.policy = policy


@dataclass(frozen=True)
class ControlPolicy:
    u: np.ndarray
    objective: float
    kkt: dict = field(default_factory=dict, compare=False)

    @property
    def horizon(self) -> int:
        return len(self.u)

    @property
    def first(self) -> float:
        return float(self.u[0])


def terminal_cost(A, Q, tol: float = 1e-13, max_terms: int = 100_000) -> np.ndarray:
    """Solve ``Qt = A' Qt A + Q`` by summing ``sum_k (A')^k Q A^k``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    rho = np.max(np.abs(np.linalg.eigvals(A)))
    if rho >= 1.0:
        raise ValueError(f"terminal cost needs a Schur-stable A; spectral radius is {rho:.6g}")
    Qt = Q.copy()
    term = Q.copy()
    for _ in range(max_terms):
        term = A.T @ term @ A
        Qt += term
        if np.linalg.norm(term) <= tol * np.linalg.norm(Qt):
            break
    return 0.5 * (Qt + Qt.T)


# --------------------------------------------------------------------------
# linear MPC


@dataclass(frozen=True)
class LinearMpcProblem:
    sys: LinearSystem
    N: int
    Q: np.ndarray
    R: float
    Qt: np.ndarray
    u_min: float
    u_max: float
    quad_constraint: bool = False

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("horizon N must be >= 1")
        Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        Qt = np.atleast_2d(np.asarray(self.Qt, dtype=float))
        for name, M in (("Q", Q), ("Qt", Qt)):
            if not np.allclose(M, M.T):
                raise ValueError(f"{name} must be symmetric")
            if np.min(np.linalg.eigvalsh(M)) < -1e-12:
                raise ValueError(f"{name} must be positive semidefinite")
        if np.min(np.linalg.eigvalsh(np.atleast_2d(self.R))) <= 0:
            raise ValueError("R must be positive definite")
        if self.u_min > self.u_max:
            raise ValueError("u_min > u_max")
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "Qt", Qt)

    @classmethod
    def with_lyapunov_terminal(cls, sys, N, R, u_bound, Q=None, quad_constraint=False):
        Q = np.eye(sys.n_states) if Q is None else Q
        return cls(sys, N, Q, R, terminal_cost(sys.A, Q), -u_bound, u_bound, quad_constraint)

    def condensed(self):
        """Matrices of the condensed cost ``0.5 u'Hu + x'F'u + 0.5 x'Yx``."""
        return _condense(self)

    def bounds(self, x) -> tuple[np.ndarray, np.ndarray]:
        lo = np.full(self.N, float(self.u_min))
        hi = np.full(self.N, float(self.u_max))
        if self.quad_constraint:
            r = float(np.sqrt(np.dot(x, x)))
            lo[0] = max(lo[0], -r)
            hi[0] = min(hi[0], r)
        return lo, hi


def singular_problem(N: int = 5) -> LinearMpcProblem:
    from .dynamics import SINGULAR_SYSTEM

    return LinearMpcProblem.with_lyapunov_terminal(SINGULAR_SYSTEM, N, R=0.01, u_bound=0.5)


def bemporad_problem(N: int = 10) -> LinearMpcProblem:
    from .dynamics import BEMPORAD_SYSTEM

    return LinearMpcProblem.with_lyapunov_terminal(BEMPORAD_SYSTEM, N, R=0.01, u_bound=2.0)


def quadcon_problem(N: int = 6) -> LinearMpcProblem:
    from .dynamics import BEMPORAD_SYSTEM

    return LinearMpcProblem.with_lyapunov_terminal(
        BEMPORAD_SYSTEM, N, R=0.01, u_bound=2.0, quad_constraint=True
    )


def _condense(prob: LinearMpcProblem):
    A, B, N = prob.sys.A, prob.sys.B, prob.N
    n, m = prob.sys.n_states, prob.sys.n_inputs
    if m != 1:
        raise NotImplementedError("condensed solver handles single-input systems")
    # x_i = Phi_i x + Gam_i u, i = 0..N
    Phi = np.zeros(((N + 1) * n, n))
    Gam = np.zeros(((N + 1) * n, N * m))
    Ak = np.eye(n)
    for i in range(N + 1):
        Phi[i * n:(i + 1) * n] = Ak
        Ak = A @ Ak
    for i in range(1, N + 1):
        for j in range(i):
            Gam[i * n:(i + 1) * n, j * m:(j + 1) * m] = np.linalg.matrix_power(A, i - 1 - j) @ B
    Qbar = np.zeros(((N + 1) * n, (N + 1) * n))
    for i in range(N):
        Qbar[i * n:(i + 1) * n, i * n:(i + 1) * n] = prob.Q
    Qbar[N * n:, N * n:] = prob.Qt
    Rbar = np.kron(np.eye(N), np.atleast_2d(prob.R))
    H = 2.0 * (Gam.T @ Qbar @ Gam + Rbar)
    F = 2.0 * (Gam.T @ Qbar @ Phi)
    Y = 2.0 * (Phi.T @ Qbar @ Phi)
    return 0.5 * (H + H.T), F, Y


def evaluate_cost(prob, x, u) -> float:
    """Roll the model forward under ``u`` and return terminal plus stage costs."""
    if isinstance(prob, CstrMpcProblem):
        return prob.objective(x, u)
    u = np.asarray(u, dtype=float).reshape(-1)
    if u.size != prob.N:
        raise ValueError(f"policy length {u.size} != horizon {prob.N}")
    xi = np.asarray(x, dtype=float).reshape(-1)
    R = np.atleast_2d(prob.R)
    cost = 0.0
    for ui in u:
        uv = np.atleast_1d(ui)
        cost += xi @ prob.Q @ xi + uv @ R @ uv
        xi = prob.sys.A @ xi + prob.sys.B @ uv
    return float(cost + xi @ prob.Qt @ xi)


def solve_box_qp(H, f, lo, hi, max_iter: int = 500):
    """Primal active-set method for ``min 0.5 u'Hu + f'u`` s.t. ``lo <= u <= hi``.

    ``H`` must be positive definite. Returns ``(u, status)`` where status is
    +1/-1/0 per variable for upper-bound/lower-bound/free.
    """
    n = len(f)
    u = np.clip(np.zeros(n), lo, hi)
    # working set: fixed variables and the bound they sit at
    status = np.zeros(n, dtype=int)
    status[u == lo] = -1
    status[u == hi] = 1
    status[lo == hi] = 1
    for _ in range(max_iter):
        free = status == 0
        u_target = u.copy()
        if np.any(free):
            fixed = ~free
            rhs = -(f[free] + H[np.ix_(free, fixed)] @ u[fixed])
            u_target[free] = np.linalg.solve(H[np.ix_(free, free)], rhs)
        step = u_target - u
        # ratio test against the bounds of free variables
        alpha, block = 1.0, -1
        for i in np.nonzero(free)[0]:
            if step[i] > 0 and u_target[i] > hi[i]:
                a = (hi[i] - u[i]) / step[i]
            elif step[i] < 0 and u_target[i] < lo[i]:
                a = (lo[i] - u[i]) / step[i]
            else:
                continue
            if a < alpha:
                alpha, block = a, i
        u = u + alpha * step
        if block >= 0:
            status[block] = 1 if step[block] > 0 else -1
            u[block] = hi[block] if status[block] == 1 else lo[block]
            continue
        g = H @ u + f
        # multiplier sign: lower-bound needs g >= 0, upper-bound needs g <= 0
        mult = np.where(status == -1, g, np.where(status == 1, -g, np.inf))
        mult[lo == hi] = np.inf
        j = int(np.argmin(mult))
        if mult[j] >= -1e-12:
            return u, status
        status[j] = 0
    raise SolverError("active-set iteration limit reached", policy=u)


def box_kkt(H, f, lo, hi, u) -> dict:
    """Stationarity, feasibility and complementarity residuals of a box QP."""
    g = H @ u + f
    at_lo = np.isclose(u, lo, atol=1e-12, rtol=0)
    at_hi = np.isclose(u, hi, atol=1e-12, rtol=0)
    mu_lo = np.where(at_lo, np.maximum(g, 0.0), 0.0)
    mu_hi = np.where(at_hi & ~at_lo, np.maximum(-g, 0.0), 0.0)
    both = at_lo & at_hi
    mu_lo[both] = np.maximum(g[both], 0.0)
    mu_hi[both] = np.maximum(-g[both], 0.0)
    stat = g - mu_lo + mu_hi
    feas = np.maximum(np.maximum(lo - u, u - hi), 0.0)
    comp = np.abs(mu_lo * (u - lo)) + np.abs(mu_hi * (hi - u))
    return {
        "stationarity": float(np.max(np.abs(stat))),
        "feasibility": float(np.max(feas)),
        "complementarity": float(np.max(comp)),
    }


def _solve_condensed(prob: LinearMpcProblem, x) -> ControlPolicy:
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.size != prob.sys.n_states:
        raise ValueError(f"state has {x.size} entries, system has {prob.sys.n_states}")
    H, F, _ = prob.condensed()
    f = F @ x
    lo, hi = prob.bounds(x)
    u, _ = solve_box_qp(H, f, lo, hi)
    kkt = box_kkt(H, f, lo, hi, u)
    return ControlPolicy(u=u, objective=evaluate_cost(prob, x, u), kkt=kkt)


def solve_linear_mpc(prob: LinearMpcProblem, x) -> ControlPolicy:
    if prob.quad_constraint:
        return solve_quadratic_constrained_mpc(prob, x)
    return _solve_condensed(prob, x)


def solve_quadratic_constrained_mpc(prob: LinearMpcProblem, x) -> ControlPolicy:
    """Box problem plus ``u_0^2 <= x'x``.

    With a scalar input the quadratic constraint is the interval
    ``|u_0| <= ||x||``, so the feasible set stays a box and the active-set
    certificate applies unchanged.
    """
    if not prob.quad_constraint:
        prob = LinearMpcProblem(prob.sys, prob.N, prob.Q, prob.R, prob.Qt,
                                prob.u_min, prob.u_max, quad_constraint=True)
    return _solve_condensed(prob, x)


def unconstrained_policy(prob: LinearMpcProblem, x) -> np.ndarray:
    H, F, _ = prob.condensed()
    return np.linalg.solve(H, -F @ np.asarray(x, dtype=float))


# --------------------------------------------------------------------------
# CSTR MPC


@dataclass(frozen=True)
class CstrMpcProblem:
    params: CstrParams = field(default_factory=CstrParams)
    r0: float = 0.5
    N: int = 20
    u_min: float = -2.0
    u_max: float = 2.0
    rate_bound: float = 0.5
    dt: float = DEFAULT_DT
    substeps: int = DEFAULT_SUBSTEPS
    nondim: NondimMap = NONDIM

    def with_reference(self, r0: float) -> "CstrMpcProblem":
        return CstrMpcProblem(self.params, float(r0), self.N, self.u_min, self.u_max,
                              self.rate_bound, self.dt, self.substeps, self.nondim)

    @property
    def pvec(self) -> np.ndarray:
        return param_vector(self.params, self.nondim)

    def _x(self, x):
        x = x.as_array() if isinstance(x, CstrState) else np.asarray(x, dtype=float)
        return float(x[0]), float(x[1])

    def objective(self, x, u) -> float:
        u = np.ascontiguousarray(u, dtype=float)
        if u.size != self.N:
            raise ValueError(f"policy length {u.size} != horizon {self.N}")
        c, t = self._x(x)
        return float(_kernels.tracking_cost(self.pvec, c, t, u, self.r0, self.dt, self.substeps))

    def objective_grad(self, x, u):
        c, t = self._x(x)
        val, g = _kernels.tracking_cost_grad(
            self.pvec, c, t, np.ascontiguousarray(u, dtype=float), self.r0, self.dt, self.substeps)
        return float(val), g

    def predicted_outputs(self, x, u) -> np.ndarray:
        """Predicted ``cb_hat`` at steps 0..N."""
        c, t = self._x(x)
        traj = _kernels.rollout(self.pvec, c, t, np.ascontiguousarray(u, dtype=float),
                                self.dt, self.substeps)
        return ca0_hat(self.params, self.nondim) - traj[:, 0]

    def constraint_matrix(self):
        """Rows ``G`` and bounds with ``G u <= h`` for the rate constraints."""
        n = self.N
        D = np.zeros((n - 1, n))
        D[np.arange(n - 1), np.arange(n - 1)] = 1.0
        D[np.arange(n - 1), np.arange(1, n)] = -1.0
        return D

    def is_feasible(self, u, tol: float = FEAS_TOL) -> bool:
        u = np.asarray(u)
        return bool(
            np.all(u >= self.u_min - tol)
            and np.all(u <= self.u_max + tol)
            and np.all(np.abs(np.diff(u)) <= self.rate_bound + tol)
        )


def project_feasible(u, u_min, u_max, rate_bound) -> np.ndarray:
    """Box clip followed by a forward rate-limit pass; the result is always feasible."""
    u = np.clip(np.asarray(u, dtype=float), u_min, u_max)
    out = u.copy()
    for i in range(1, len(out)):
        out[i] = np.clip(out[i], out[i - 1] - rate_bound, out[i - 1] + rate_bound)
    return np.clip(out, u_min, u_max)


def nlp_kkt(prob: CstrMpcProblem, x, u, active_tol: float = 1e-7) -> dict:
    """Projected-gradient norm at ``u``: gradient residual after the best
    nonnegative combination of active constraint normals."""
    _, g = prob.objective_grad(x, u)
    D = prob.constraint_matrix()
    rate = D @ u
    normals = []
    for i in range(prob.N):
        if u[i] >= prob.u_max - active_tol:
            e = np.zeros(prob.N); e[i] = 1.0; normals.append(e)
        if u[i] <= prob.u_min + active_tol:
            e = np.zeros(prob.N); e[i] = -1.0; normals.append(e)
    for i, r in enumerate(rate):
        if r >= prob.rate_bound - active_tol:
            normals.append(D[i])
        if r <= -prob.rate_bound + active_tol:
            normals.append(-D[i])
    if normals:
        Nm = np.array(normals).T
        _, res = nnls(Nm, -g)
    else:
        res = float(np.linalg.norm(g))
    feas = max(
        float(np.max(np.maximum(u - prob.u_max, 0.0))),
        float(np.max(np.maximum(prob.u_min - u, 0.0))),
        float(np.max(np.maximum(np.abs(rate) - prob.rate_bound, 0.0))),
    )
    return {"stationarity": float(res), "feasibility": feas}


def _tie_break(prob: CstrMpcProblem, u) -> np.ndarray:
    # the last input never reaches the cost; pick its smallest-norm feasible value
    u = u.copy()
    if prob.N >= 2:
        lo = max(prob.u_min, u[-2] - prob.rate_bound)
        hi = min(prob.u_max, u[-2] + prob.rate_bound)
        u[-1] = min(max(0.0, lo), hi)
    return u


def _slsqp(prob: CstrMpcProblem, x, u0, maxiter: int, ftol: float):
    D = prob.constraint_matrix()
    rb = prob.rate_bound
    cons = [
        {"type": "ineq", "fun": lambda u: rb - D @ u, "jac": lambda u: -D},
        {"type": "ineq", "fun": lambda u: rb + D @ u, "jac": lambda u: D},
    ]
    res = minimize(
        lambda u: prob.objective_grad(x, u),
        u0,
        jac=True,
        method="SLSQP",
        bounds=[(prob.u_min, prob.u_max)] * prob.N,
        constraints=cons,
        options={"maxiter": maxiter, "ftol": ftol},
    )
    u = np.clip(res.x, prob.u_min, prob.u_max)
    return u, bool(res.success)


def solve_cstr_mpc(
    prob: CstrMpcProblem,
    x,
    warm_start=None,
    kkt_tol: float = 1e-5,
    maxiter: int = 300,
    ftol: float = 1e-14,
    max_polish: int = 3,
) -> ControlPolicy:
    """Multi-start SLSQP; keeps the best converged start.

    Starts: the warm start (if given, e.g. the previous policy shifted by
    one), constant zero, and constant saturation at each bound.
    """
    x = prob._x(x)
    starts = []
    if warm_start is not None:
        starts.append(project_feasible(warm_start, prob.u_min, prob.u_max, prob.rate_bound))
    starts += [np.zeros(prob.N), np.full(prob.N, prob.u_max), np.full(prob.N, prob.u_min)]
    best, best_val, best_kkt = None, np.inf, None
    fallback, fallback_val = None, np.inf
    for u0 in starts:
        u, _ = _slsqp(prob, x, u0, maxiter, ftol)
        kkt = nlp_kkt(prob, x, u)
        polish = 0
        # restarting resets the quasi-Newton model, which usually clears a stalled run
        while kkt["stationarity"] > kkt_tol and polish < max_polish:
            u, _ = _slsqp(prob, x, u, maxiter, ftol)
            kkt = nlp_kkt(prob, x, u)
            polish += 1
        u = project_feasible(u, prob.u_min, prob.u_max, prob.rate_bound)
        val = prob.objective(x, u)
        kkt = nlp_kkt(prob, x, u)
        if val < fallback_val:
            fallback, fallback_val = u, val
        if kkt["stationarity"] <= kkt_tol and val < best_val - 1e-14:
            best, best_val, best_kkt = u, val, kkt
    if best is None:
        pol = ControlPolicy(_tie_break(prob, fallback), fallback_val, nlp_kkt(prob, x, fallback))
        raise SolverError(f"no start reached stationarity {kkt_tol:g} from state {x}", policy=pol)
    u = _tie_break(prob, best)
    return ControlPolicy(u=u, objective=prob.objective(x, u), kkt=best_kkt)


def is_saturated(u, u_min: float = -2.0, u_max: float = 2.0, tol: float = 1e-3) -> bool:
    u = np.asarray(u)
    return bool(np.any(u >= u_max - tol) or np.any(u <= u_min + tol))


def _warn(msg):
    warnings.warn(msg, RuntimeWarning, stacklevel=3)
