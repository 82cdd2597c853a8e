"""Off-line policy datasets: grids for the linear problems, receding-horizon
rollouts for the CSTR, augmented-state parametrizations and splits."""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from joblib import Parallel, delayed

from ._io import read_matrix_csv, write_matrix_csv
from .dynamics import NONDIM, CstrParams, CstrState, DivergenceError, integrate_cstr, rate_constant
from .mpc import CstrMpcProblem, LinearMpcProblem, SolverError, solve_cstr_mpc, solve_linear_mpc

log = logging.getLogger(__name__)

DATASET_FORMAT_VERSION = 1
PARAMETRIZATIONS = ("alpha", "beta", "gamma")


@dataclass
class PolicyDataset:
    X_star: np.ndarray
    U_star: np.ndarray
    x_columns: list[str]
    objectives: np.ndarray | None = None
    train_idx: np.ndarray | None = None
    test_idx: np.ndarray | None = None
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X_star = np.atleast_2d(np.asarray(self.X_star, dtype=float))
        self.U_star = np.atleast_2d(np.asarray(self.U_star, dtype=float))
        if self.X_star.shape[0] != self.U_star.shape[0]:
            raise ValueError("X_star and U_star row counts differ")

    def __len__(self):
        return self.X_star.shape[0]

    @property
    def horizon(self) -> int:
        return self.U_star.shape[1]

    def save(self, csv_path, json_path=None, header: dict | None = None):
        """CSV of ``x* | u*`` rows plus a JSON sidecar; ``header`` entries go to both."""
        csv_path = Path(csv_path)
        json_path = Path(json_path) if json_path else csv_path.with_suffix(".json")
        cols = self.x_columns + [f"u_{i}" for i in range(self.horizon)]
        write_matrix_csv(csv_path, cols, np.hstack([self.X_star, self.U_star]), header)
        side = {
            **(header or {}),
            "format_version": DATASET_FORMAT_VERSION,
            "seed": self.seed,
            "n_rows": len(self),
            "x_columns": self.x_columns,
            "objectives": None if self.objectives is None else [float(v) for v in self.objectives],
            "train_idx": None if self.train_idx is None else [int(i) for i in self.train_idx],
            "test_idx": None if self.test_idx is None else [int(i) for i in self.test_idx],
            "meta": self.meta,
        }
        json_path.write_text(json.dumps(side, indent=2, sort_keys=True))
        return csv_path, json_path

    @classmethod
    def load(cls, csv_path, json_path=None) -> "PolicyDataset":
        csv_path = Path(csv_path)
        json_path = Path(json_path) if json_path else csv_path.with_suffix(".json")
        side = json.loads(json_path.read_text())
        if side.get("format_version") != DATASET_FORMAT_VERSION:
            raise ValueError(f"unsupported dataset format version {side.get('format_version')}")
        _, data, _ = read_matrix_csv(csv_path)
        nx = len(side["x_columns"])

        def opt(k):
            return None if side.get(k) is None else np.array(side[k])

        return cls(data[:, :nx], data[:, nx:], side["x_columns"], opt("objectives"),
                   opt("train_idx"), opt("test_idx"), side["seed"], side.get("meta", {}))


def grid_sample(bounds, counts) -> np.ndarray:
    """Cartesian product of per-dimension linspaces; the last dimension varies fastest."""
    if len(bounds) != len(counts):
        raise ValueError("bounds and counts differ in length")
    if any(c < 2 for c in counts):
        raise ValueError("each count must be >= 2")
    axes = [np.linspace(lo, hi, c) for (lo, hi), c in zip(bounds, counts)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def generate_linear_dataset(prob: LinearMpcProblem, grid) -> PolicyDataset:
    grid = np.atleast_2d(np.asarray(grid, dtype=float))
    if grid.shape[0] == 0:
        raise ValueError("empty grid")
    U = np.empty((len(grid), prob.N))
    obj = np.empty(len(grid))
    kkt = []
    for i, x in enumerate(grid):
        try:
            pol = solve_linear_mpc(prob, x)
        except SolverError as exc:
            raise SolverError(f"row {i}: {exc}", policy=exc.policy) from exc
        U[i] = pol.u
        obj[i] = pol.objective
        kkt.append(pol.kkt)
    cols = [f"x_{j + 1}" for j in range(grid.shape[1])]
    meta = {"max_kkt_stationarity": max(k["stationarity"] for k in kkt),
            "max_kkt_complementarity": max(k["complementarity"] for k in kkt)}
    return PolicyDataset(grid, U, cols, obj, meta=meta)


# --------------------------------------------------------------------------
# CSTR


def augment(state, r0: float, tag: str, params: CstrParams = CstrParams()) -> np.ndarray:
    """Augmented state in one of three parametrizations.

    ``alpha``: ``[ca_hat, tr_hat, r0]``; ``beta``: nondimensional reaction
    rate and heating rate, then ``r0``; ``gamma``: alpha and beta states
    concatenated, then ``r0``. Accepts a single state or an (n, 2) array.
    """
    if tag not in PARAMETRIZATIONS:
        raise ValueError(f"unknown parametrization {tag!r}; expected one of {PARAMETRIZATIONS}")
    x = state.as_array() if isinstance(state, CstrState) else np.asarray(state, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    r0 = np.broadcast_to(np.asarray(r0, dtype=float), (x.shape[0],))
    alpha = x
    if tag == "alpha":
        out = np.column_stack([alpha, r0])
    else:
        beta = beta_state(x, params)
        out = np.column_stack([beta, r0]) if tag == "beta" else np.column_stack([alpha, beta, r0])
    return out[0] if single else out


def beta_state(x_hat, params: CstrParams = CstrParams(), nd=NONDIM) -> np.ndarray:
    """Reaction rate ``k C_A`` and heating rate ``q/V (T0 - Tr) - dH/(rho Cp) k C_A`` in nondimensional units."""
    x_hat = np.atleast_2d(x_hat)
    ca = nd.conc(x_hat[:, 0])
    tr = nd.temp(x_hat[:, 1])
    rate = rate_constant(params, tr) * ca
    heat = params.q_over_v * (params.t0 - tr) - params.dh_rhocp * rate
    return np.column_stack([rate / nd.conc_scale, heat / nd.temp_scale])


def augment_dataset(ds: PolicyDataset, tag: str, params: CstrParams = CstrParams()) -> np.ndarray:
    """Augmented matrix for a CSTR dataset stored as ``[ca_hat, tr_hat, r0]`` rows."""
    return augment(ds.X_star[:, :2], ds.X_star[:, 2], tag, params)


@dataclass(frozen=True)
class CstrSamplingConfig:
    n_init: int = 200
    rollout: int = 20
    ca_range: tuple = (0.1, 0.9)
    tr_range: tuple = (0.0, 0.55)
    r0_range: tuple = (0.1, 0.9)
    seed: int = 0
    kkt_tol: float = 1e-5

    def to_dict(self):
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}


def _run_rollout(prob: CstrMpcProblem, cfg: CstrSamplingConfig, seed_seq):
    rng = np.random.default_rng(seed_seq)
    x = np.array([rng.uniform(*cfg.ca_range), rng.uniform(*cfg.tr_range)])
    r0 = float(rng.uniform(*cfg.r0_range))
    p = prob.with_reference(r0)
    rows = []
    warm = None
    for step in range(cfg.rollout):
        ok = True
        try:
            pol = solve_cstr_mpc(p, x, warm_start=warm, kkt_tol=cfg.kkt_tol)
        except SolverError as exc:
            pol, ok = exc.policy, False
        rows.append((x.copy(), r0, pol.u.copy(), pol.objective, pol.kkt.get("stationarity", np.nan), ok))
        warm = np.r_[pol.u[1:], pol.u[-1]]
        try:
            x = integrate_cstr(p.params, x, pol.u[0], p.dt, p.substeps, p.nondim)
        except DivergenceError:
            break
    return rows


def generate_cstr_dataset(
    cfg: CstrSamplingConfig = CstrSamplingConfig(),
    prob: CstrMpcProblem = CstrMpcProblem(),
    n_jobs: int = 1,
) -> PolicyDataset:
    """Receding-horizon rollouts from random initial states and references.

    Rollout ``i`` draws from the ``i``-th child of ``SeedSequence(seed)``, so
    the output does not depend on scheduling. Rows whose solve failed are
    excluded and counted.
    """
    children = np.random.SeedSequence(cfg.seed).spawn(cfg.n_init)
    if n_jobs == 1:
        results = [_run_rollout(prob, cfg, s) for s in children]
    else:
        results = Parallel(n_jobs=n_jobs)(delayed(_run_rollout)(prob, cfg, s) for s in children)
    X, U, obj, kkt = [], [], [], []
    rollout_id, step_id = [], []
    excluded = 0
    for ri, rows in enumerate(results):
        for si, (x, r0, u, val, stat, ok) in enumerate(rows):
            if not ok:
                excluded += 1
                continue
            X.append([x[0], x[1], r0])
            U.append(u)
            obj.append(val)
            kkt.append(stat)
            rollout_id.append(ri)
            step_id.append(si)
    if excluded:
        warnings.warn(f"{excluded} CSTR solves failed and were excluded", RuntimeWarning, stacklevel=2)
    meta = {
        "experiment": "cstr",
        "sampling": cfg.to_dict(),
        "problem": {"N": prob.N, "u_min": prob.u_min, "u_max": prob.u_max,
                    "rate_bound": prob.rate_bound, "dt": prob.dt, "substeps": prob.substeps},
        "excluded": excluded,
        "max_kkt_stationarity": float(np.max(kkt)) if kkt else None,
        "rollout_id": rollout_id,
        "step": step_id,
    }
    return PolicyDataset(np.array(X), np.array(U), ["ca_hat", "tr_hat", "r0"], np.array(obj),
                         seed=cfg.seed, meta=meta)


def split(ds: PolicyDataset, n_train: int = 3000, seed: int = 0):
    """Random disjoint train/test index arrays; also stored on ``ds``."""
    n = len(ds)
    if not 0 < n_train < n:
        raise ValueError(f"n_train must be in (0, {n}), got {n_train}")
    perm = np.random.default_rng(seed).permutation(n)
    ds.train_idx = np.sort(perm[:n_train])
    ds.test_idx = np.sort(perm[n_train:])
    return ds.train_idx, ds.test_idx
