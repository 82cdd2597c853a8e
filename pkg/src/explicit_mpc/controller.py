"""Explicit controllers built from fitted maps, the inverse observer, and
closed-loop simulation of the CSTR."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._io import write_matrix_csv
from .approx import ClampWarning, Model, load_model
from .dynamics import NONDIM, CstrParams, DivergenceError, ca0_hat, integrate_cstr, steady_input_hat
from .mpc import ControlPolicy, CstrMpcProblem, SolverError, is_saturated, project_feasible, solve_cstr_mpc
from .sampling import PARAMETRIZATIONS, augment

AUG_DIMS = {"alpha": 3, "beta": 3, "gamma": 5}
DEFAULT_SCHEDULE = ((0, 0.5), (60, 0.3), (120, 0.7))


@dataclass(frozen=True)
class ExplicitController:
    """Two-stage map ``x* -> phi -> u*`` with feasibility repair.

    ``state_to_manifold`` predicts intrinsic coordinates from the augmented
    state; ``manifold_to_policy`` predicts the full input sequence from
    them. A ``None`` first stage makes the second stage act directly on
    ``x*`` (the direct baseline).
    """

    state_to_manifold: Model | None
    manifold_to_policy: Model
    tag: str = "alpha"
    u_min: float = -2.0
    u_max: float = 2.0
    rate_bound: float = 0.5
    horizon: int = 20

    def __post_init__(self):
        if self.tag not in PARAMETRIZATIONS:
            raise ValueError(f"unknown parametrization {self.tag!r}")

    def raw_policies(self, X_star) -> np.ndarray:
        """Unrepaired stage-2 predictions for a batch of augmented states."""
        X_star = np.atleast_2d(np.asarray(X_star, dtype=float))
        if X_star.shape[1] != AUG_DIMS[self.tag]:
            raise ValueError(f"{self.tag} states have {AUG_DIMS[self.tag]} columns, got {X_star.shape[1]}")
        phi = X_star if self.state_to_manifold is None else self.state_to_manifold.predict(X_star)
        U = self.manifold_to_policy.predict(phi)
        if U.shape[1] != self.horizon:
            raise ValueError(f"stage-2 model emits {U.shape[1]} steps, expected {self.horizon}")
        return U

    def policies(self, X_star) -> np.ndarray:
        U = self.raw_policies(X_star)
        return np.array([project_feasible(u, self.u_min, self.u_max, self.rate_bound) for u in U])

    def save(self, directory):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        if self.state_to_manifold is not None:
            self.state_to_manifold.save(d / "stage1.json")
        self.manifold_to_policy.save(d / "stage2.json")
        meta = {"tag": self.tag, "u_min": self.u_min, "u_max": self.u_max,
                "rate_bound": self.rate_bound, "horizon": self.horizon,
                "two_stage": self.state_to_manifold is not None}
        (d / "controller.json").write_text(json.dumps(meta, indent=2))

    @classmethod
    def load(cls, directory) -> "ExplicitController":
        d = Path(directory)
        meta = json.loads((d / "controller.json").read_text())
        s1 = load_model(d / "stage1.json") if meta.pop("two_stage") else None
        return cls(s1, load_model(d / "stage2.json"), **meta)


def predict_policy(c: ExplicitController, x_star) -> ControlPolicy:
    """Feasible full-horizon policy for one augmented state."""
    u = c.policies(np.asarray(x_star, dtype=float)[None, :])[0]
    return ControlPolicy(u=u, objective=float("nan"), kkt={})


def control_law(c: ExplicitController, x_star) -> float:
    return predict_policy(c, x_star).first


@dataclass(frozen=True)
class ImplicitController:
    """On-line NLP controller exposing the same surface as the explicit one."""

    problem: CstrMpcProblem = field(default_factory=CstrMpcProblem)
    tag: str = "alpha"

    def solve(self, state, r0: float, warm_start=None) -> ControlPolicy:
        p = self.problem.with_reference(r0)
        try:
            return solve_cstr_mpc(p, state, warm_start=warm_start)
        except SolverError as exc:
            # a slightly suboptimal feasible policy is still a valid action on-line
            warnings.warn(str(exc), RuntimeWarning, stacklevel=2)
            return exc.policy


@dataclass(frozen=True)
class InverseObserver:
    """Two-stage inverse map ``u* -> phi -> x*`` with a saturation guard."""

    policy_to_manifold: Model | None
    manifold_to_state: Model
    u_min: float = -2.0
    u_max: float = 2.0
    tol: float = 1e-3

    def estimate(self, U) -> np.ndarray:
        U = np.atleast_2d(np.asarray(U, dtype=float))
        phi = U if self.policy_to_manifold is None else self.policy_to_manifold.predict(U)
        return self.manifold_to_state.predict(phi)

    def saturated(self, U) -> np.ndarray:
        U = np.atleast_2d(np.asarray(U, dtype=float))
        return np.array([is_saturated(u, self.u_min, self.u_max, self.tol) for u in U])

    def save(self, directory):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        if self.policy_to_manifold is not None:
            self.policy_to_manifold.save(d / "stage1.json")
        self.manifold_to_state.save(d / "stage2.json")
        meta = {"u_min": self.u_min, "u_max": self.u_max, "tol": self.tol,
                "two_stage": self.policy_to_manifold is not None}
        (d / "observer.json").write_text(json.dumps(meta, indent=2))

    @classmethod
    def load(cls, directory) -> "InverseObserver":
        d = Path(directory)
        meta = json.loads((d / "observer.json").read_text())
        s1 = load_model(d / "stage1.json") if meta.pop("two_stage") else None
        return cls(s1, load_model(d / "stage2.json"), **meta)


def observe_state(o: InverseObserver, policy):
    """Estimated augmented state and whether it can be trusted.

    The flag is ``False`` whenever any policy element lies within ``tol`` of
    a box bound: the policy-to-state map is not invertible there.
    """
    u = policy.u if isinstance(policy, ControlPolicy) else np.asarray(policy, dtype=float)
    return o.estimate(u)[0], not bool(o.saturated(u)[0])


# --------------------------------------------------------------------------
# closed loop


def steady_state_for_output(params: CstrParams, cb_hat: float, nd=NONDIM):
    """Steady state ``[ca_hat, tr_hat]`` and input with product concentration ``cb_hat``."""
    a0 = ca0_hat(params, nd)
    if not 0.0 < cb_hat < a0:
        raise ValueError(f"cb_hat must lie in (0, {a0})")
    ca = nd.conc(a0 - cb_hat)
    k = params.q_over_v * (params.ca0 - ca) / ca
    tr = params.e_over_r / np.log(params.k0 / k)
    x = np.array([float(nd.conc_hat(ca)), float(nd.temp_hat(tr))])
    return x, steady_input_hat(params, x, nd)


def reference_at(schedule, step: int) -> float:
    """Piecewise-constant reference; ``schedule`` is ``((start_step, r0), ...)`` sorted by start."""
    r = schedule[0][1]
    for start, val in schedule:
        if step >= start:
            r = val
    return float(r)


@dataclass
class ClosedLoopTrace:
    t: np.ndarray
    states: np.ndarray
    cb_hat: np.ndarray
    r0: np.ndarray
    u: np.ndarray
    u_implicit: np.ndarray
    noise: np.ndarray
    sigma: float
    seed: int
    diverged: bool = False
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.t)

    def to_csv(self, path, header: dict | None = None):
        M = np.column_stack([self.t, self.cb_hat, self.r0, self.u, self.u_implicit, self.noise])
        write_matrix_csv(path, ["t", "cb_hat", "r0", "u_explicit", "u_implicit", "noise_ca", "noise_tr"],
                         M, {**(header or {}), "sigma": self.sigma, "seed": self.seed,
                             "diverged": self.diverged})


def simulate_closed_loop(
    plant: CstrParams,
    controller,
    schedule=DEFAULT_SCHEDULE,
    sigma: float = 0.01,
    steps: int = 180,
    seed: int = 0,
    x0=None,
    shadow: ImplicitController | None = None,
    dt: float = 0.05,
    substeps: int = 10,
    noise_mode: str = "disturbance",
) -> ClosedLoopTrace:
    """Receding-horizon simulation with Gaussian state disturbances.

    At each sample the disturbance ``w ~ N(0, sigma^2 I)`` is added to the
    nondimensional plant state, the controller sees the disturbed state,
    and the plant integrates one sample under the first action. With
    ``noise_mode="measurement"`` the noise only corrupts what the controller
    sees and the plant state is left untouched. ``shadow``
    records what the implicit controller would have done at each visited
    state. Divergence truncates the trace and sets ``diverged``.
    """
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    if noise_mode not in ("disturbance", "measurement"):
        raise ValueError(f"unknown noise_mode {noise_mode!r}")
    rng = np.random.default_rng(seed)
    x = steady_state_for_output(plant, reference_at(schedule, 0))[0] if x0 is None else np.array(x0, float)
    a0 = ca0_hat(plant)
    tag = controller.tag
    rows = []
    warm = shadow_warm = None
    diverged = False
    n_clamped = 0
    for k in range(steps):
        w = rng.normal(0.0, sigma, 2) if sigma > 0 else np.zeros(2)
        if noise_mode == "disturbance":
            x = x + w
            seen = x
        else:
            seen = x + w
        r0 = reference_at(schedule, k)
        if isinstance(controller, ImplicitController):
            pol = controller.solve(seen, r0, warm)
            warm = np.r_[pol.u[1:], pol.u[-1]]
            u = pol.first
        else:
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always", ClampWarning)
                u = control_law(controller, augment(seen, r0, tag, plant))
            n_clamped += sum(issubclass(c.category, ClampWarning) for c in caught)
        u_imp = np.nan
        if shadow is not None:
            sp = shadow.solve(seen, r0, shadow_warm)
            shadow_warm = np.r_[sp.u[1:], sp.u[-1]]
            u_imp = sp.first
        rows.append((k * dt, x.copy(), a0 - x[0], r0, u, u_imp, w))
        try:
            x = integrate_cstr(plant, x, u, dt, substeps)
        except DivergenceError:
            diverged = True
            break
        if not np.all(np.abs(x) < 1e3):
            diverged = True
            break
    t, X, cb, r, U, Ui, W = (np.array(c) for c in zip(*rows))
    return ClosedLoopTrace(t, X, cb, r, U, Ui, W, sigma, seed, diverged, {"clamped_inputs": n_clamped})


def settled_mask(trace: ClosedLoopTrace, transient: int = 20) -> np.ndarray:
    """Samples at least ``transient`` steps after the most recent reference change."""
    mask = np.zeros(len(trace), dtype=bool)
    last = 0
    for i in range(len(trace)):
        if i > 0 and trace.r0[i] != trace.r0[i - 1]:
            last = i
        mask[i] = i - last >= transient
    return mask


def tracking_mse(trace: ClosedLoopTrace) -> float:
    return float(np.mean((trace.cb_hat - trace.r0) ** 2))


def compare_controllers(trace_explicit: ClosedLoopTrace, trace_implicit: ClosedLoopTrace,
                        transient: int = 20, tail: int = 10) -> dict:
    """Action deviation and tracking metrics for two runs under the same noise and schedule.

    Per reference segment the report holds the final error, the largest
    error after ``transient`` steps and the largest error over the last
    ``tail`` steps.
    """
    if len(trace_explicit) != len(trace_implicit):
        raise ValueError("traces differ in length")
    if trace_explicit.seed != trace_implicit.seed or trace_explicit.sigma != trace_implicit.sigma:
        raise ValueError("traces use different noise settings")
    if not np.array_equal(trace_explicit.r0, trace_implicit.r0):
        raise ValueError("traces follow different reference schedules")
    du = trace_explicit.u - trace_implicit.u
    mse_e, mse_i = tracking_mse(trace_explicit), tracking_mse(trace_implicit)
    out = {
        "action_deviation": du.tolist(),
        "max_action_deviation": float(np.max(np.abs(du))),
        "rms_action_deviation": float(np.sqrt(np.mean(du ** 2))),
        "tracking_mse_explicit": mse_e,
        "tracking_mse_implicit": mse_i,
        "tracking_mse_gap": mse_e - mse_i,
        "tracking_mse_ratio": mse_e / mse_i if mse_i > 0 else (1.0 if mse_e == 0 else float("inf")),
        "max_output_deviation": float(np.max(np.abs(trace_explicit.cb_hat - trace_implicit.cb_hat))),
    }
    for name, tr in (("explicit", trace_explicit), ("implicit", trace_implicit)):
        m = settled_mask(tr, transient)
        err = np.abs(tr.cb_hat - tr.r0)
        out[f"settled_max_error_{name}"] = float(np.max(err[m])) if m.any() else float("nan")
        segments = []
        for start in np.flatnonzero(np.r_[True, np.diff(tr.r0) != 0]):
            end = start + 1
            while end < len(tr) and tr.r0[end] == tr.r0[start]:
                end += 1
            seg = slice(start, end)
            segments.append({"start": int(start), "r0": float(tr.r0[start]),
                             "final_error": float(err[end - 1]),
                             "tail_max_error": float(np.max(err[max(start, end - tail):end])),
                             "settled_max_error": float(np.max(err[seg][m[seg]])) if m[seg].any() else None})
        out[f"segments_{name}"] = segments
    return out
