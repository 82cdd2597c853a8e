"""End-to-end experiment drivers shared by the CLI and the acceptance suite."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .approx import ClampWarning, fit_gp, fit_poly
from .manifold import InformedMetricConfig, dmaps, llr_residuals, pca, tune_scales
from .mpc import CstrMpcProblem, bemporad_problem, quadcon_problem, singular_problem
from .sampling import CstrSamplingConfig, PolicyDataset, generate_linear_dataset, grid_sample

LINEAR_PROBLEMS = {
    "linear-singular": singular_problem,
    "linear-bemporad": bemporad_problem,
    "linear-quadcon": quadcon_problem,
}


def leading_nonredundant(residuals, count: int, threshold: float) -> list[int]:
    """First ``count`` eigenvector indices ranked as nonredundant.

    Eigenvectors at or above ``threshold`` come first in index order; if
    fewer than ``count`` pass, the remainder are filled by descending
    residual.
    """
    R = np.asarray(residuals)
    chosen = [i for i in range(len(R)) if R[i] >= threshold][:count]
    rest = [i for i in np.argsort(-R, kind="stable") if i not in chosen]
    chosen += rest[: count - len(chosen)]
    return sorted(chosen)


def _rmse(a, b) -> float:
    return float(np.sqrt(np.mean((np.asarray(a) - np.asarray(b)) ** 2)))


def holdout_rmse(X, y, kind: str, train_fraction: float = 0.75, seed: int = 0) -> float:
    """RMSE of a GP (``kind="gp"``) or cubic polynomial (``"poly"``) on a held-out split."""
    X = np.asarray(X, dtype=float)
    X = X[:, None] if X.ndim == 1 else X
    perm = np.random.default_rng(seed).permutation(len(y))
    n_tr = int(round(train_fraction * len(y)))
    tr, te = perm[:n_tr], perm[n_tr:]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ClampWarning)
        model = fit_gp(X[tr], y[tr], seed=seed) if kind == "gp" else fit_poly(X[tr], y[tr], 3)
        return _rmse(model.predict(X[te])[:, 0], y[te])


@dataclass
class LinearExperimentResult:
    name: str
    dataset: PolicyDataset
    eigenvalues: np.ndarray
    phi: np.ndarray
    llr: np.ndarray
    pca_scores: np.ndarray
    pca_evr: np.ndarray
    dmaps_2d: list[int]
    input_range: float
    metrics: dict = field(default_factory=dict)


def run_linear_experiment(
    name: str,
    horizon: int | None = None,
    extent: float = 2.0,
    n_grid: int = 20,
    policy_prefix: int = 5,
    c_in: float = 0.1,
    c_fn: float = 10.0,
    n_eigs: int = 10,
    llr_threshold: float = 0.2,
    alpha: float = 1.0,
    train_fraction: float = 0.75,
    seed: int = 0,
) -> LinearExperimentResult:
    """Grid policies, informed DMAPS, PCA baseline and reduced-law fits.

    Fits of ``u_k`` are scored on the grid points left out of a random
    ``train_fraction`` split, as RMSE relative to the input range. The
    ``gp_*`` entries test whether the law *is* a function of the given
    coordinates; the ``cubic_*`` entries measure how simple that law is.
    The 2-D DMAPS fit uses the first two nonredundant eigenvectors.
    """
    if name not in LINEAR_PROBLEMS:
        raise ValueError(f"unknown linear experiment {name!r}")
    prob = LINEAR_PROBLEMS[name]() if horizon is None else LINEAR_PROBLEMS[name](horizon)
    grid = grid_sample([(-extent, extent)] * prob.sys.n_states, [n_grid] * prob.sys.n_states)
    ds = generate_linear_dataset(prob, grid)
    F = ds.U_star[:, :policy_prefix]
    eps, xi = tune_scales(ds.X_star, F, c_in, c_fn, seed=seed)
    emb = dmaps(ds.X_star, F, InformedMetricConfig(eps, xi, policy_prefix), alpha=alpha, n_eigs=n_eigs)
    rep = llr_residuals(emb, n_eigs, threshold=llr_threshold)
    pc = pca(np.hstack([ds.X_star, ds.U_star]))
    two = leading_nonredundant(rep.residuals, 2, llr_threshold)
    u = ds.U_star[:, 0]
    span = prob.u_max - prob.u_min
    phi = emb.eigenvectors
    def fit(X, kind):
        return holdout_rmse(X, u, kind, train_fraction, seed) / span

    m = {
        "gp_dmaps_1d": fit(phi[:, 0], "gp"),
        "gp_dmaps_2d": fit(phi[:, two], "gp"),
        "gp_pca_1d": fit(pc.scores[:, 0], "gp"),
        "gp_pca_2d": fit(pc.scores[:, :2], "gp"),
        "cubic_dmaps_1d": fit(phi[:, 0], "poly"),
        "cubic_pca_1d": fit(pc.scores[:, 0], "poly"),
        "epsilon": eps,
        "xi": xi,
        "max_kkt_stationarity": ds.meta["max_kkt_stationarity"],
    }
    return LinearExperimentResult(name, ds, emb.eigenvalues, phi, rep.residuals, pc.scores,
                                  pc.explained_variance_ratio, two, span, m)


def linear_from_config(cfg: dict) -> LinearExperimentResult:
    e, g = cfg["embedding"], cfg["grid"]
    return run_linear_experiment(
        cfg["experiment"], horizon=cfg["problem"]["horizon"], extent=g["extent"], n_grid=g["n"],
        policy_prefix=e["policy_prefix"], c_in=e["c_in"], c_fn=e["c_fn"], n_eigs=e["n_eigs"],
        llr_threshold=e["llr_threshold"], alpha=e["alpha"], train_fraction=cfg["fit"]["train_fraction"],
        seed=cfg["seed"])


def cstr_problem_from_config(cfg: dict) -> CstrMpcProblem:
    p = cfg["problem"]
    return CstrMpcProblem(N=p["horizon"], u_min=p["u_min"], u_max=p["u_max"], rate_bound=p["rate_bound"],
                          dt=p["dt"], substeps=p["substeps"])


def cstr_sampling_from_config(cfg: dict) -> CstrSamplingConfig:
    s = cfg["sampling"]
    return CstrSamplingConfig(n_init=s["n_init"], rollout=s["rollout"], ca_range=tuple(s["ca_range"]),
                              tr_range=tuple(s["tr_range"]), r0_range=tuple(s["r0_range"]),
                              seed=cfg["seed"], kkt_tol=cfg["problem"]["kkt_tol"])
