"""Diffusion maps with an input/function ("informed") metric, harmonic
detection by local linear regression, and a PCA baseline."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import eigh
from scipy.spatial.distance import cdist, pdist

from ._io import read_matrix_csv, write_matrix_csv

DEFAULT_LLR_THRESHOLD = 0.2


@dataclass(frozen=True)
class InformedMetricConfig:
    epsilon: float
    xi: float
    policy_prefix: int | None = None

    def __post_init__(self):
        if not (self.epsilon > 0 and self.xi > 0):
            raise ValueError("epsilon and xi must be positive")


def default_policy_prefix(dim_x_star: int, horizon: int) -> int:
    return min(2 * dim_x_star + 1, horizon)


def informed_distance(z_i, z_j, f_i, f_j, cfg: InformedMetricConfig) -> float:
    z_i, z_j, f_i, f_j = (np.atleast_1d(np.asarray(a, dtype=float)) for a in (z_i, z_j, f_i, f_j))
    if z_i.shape != z_j.shape or f_i.shape != f_j.shape:
        raise ValueError("dimension mismatch")
    return float(np.sum((z_i - z_j) ** 2) / cfg.epsilon + np.sum((f_i - f_j) ** 2) / cfg.xi)


def informed_distance_matrix(Z, F, cfg: InformedMetricConfig) -> np.ndarray:
    Z = _as_2d(Z)
    d = cdist(Z, Z, "sqeuclidean") / cfg.epsilon
    if F is not None:
        F = _as_2d(F)
        d += cdist(F, F, "sqeuclidean") / cfg.xi
    return d


def _as_2d(a):
    a = np.asarray(a, dtype=float)
    return a[:, None] if a.ndim == 1 else a


def _median_sq_dist(X, max_pairs, rng):
    n = X.shape[0]
    if n * (n - 1) // 2 <= max_pairs:
        return float(np.median(pdist(X, "sqeuclidean")))
    i = rng.integers(0, n, size=max_pairs)
    j = rng.integers(0, n, size=max_pairs)
    keep = i != j
    return float(np.median(np.sum((X[i[keep]] - X[j[keep]]) ** 2, axis=1)))


def tune_scales(Z, F, c_in: float = 0.1, c_fn: float = 10.0, max_pairs: int = 1_000_000, seed: int = 0):
    """Scales putting the median input term at ``c_in`` and the median function term at ``c_fn``.

    With the defaults the function-space term dominates by a factor of 100.
    """
    Z, F = _as_2d(Z), _as_2d(F)
    if Z.shape[0] < 2:
        raise ValueError("need at least two rows")
    rng = np.random.default_rng(seed)
    mz = _median_sq_dist(Z, max_pairs, rng)
    mf = _median_sq_dist(F, max_pairs, rng)
    if mz <= 0 or mf <= 0:
        raise ValueError(
            f"degenerate data: median squared distance is zero (input {mz:g}, function {mf:g})"
        )
    return mz / c_in, mf / c_fn


@dataclass
class ManifoldEmbedding:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    config: InformedMetricConfig
    alpha: float = 1.0
    scaling_k: int = 0
    kept: list[int] = field(default_factory=list)
    trivial_eigenvalue: float = 1.0

    @property
    def n_points(self) -> int:
        return self.eigenvectors.shape[0]

    def coordinates(self, indices=None, scaling_k: int | None = None) -> np.ndarray:
        """Columns ``phi_i * lambda_i**k`` for the given (0-based) indices; kept set by default."""
        idx = self.kept if indices is None else list(indices)
        if not idx:
            idx = list(range(self.eigenvectors.shape[1]))
        k = self.scaling_k if scaling_k is None else scaling_k
        return self.eigenvectors[:, idx] * self.eigenvalues[idx] ** k

    def save(self, csv_path, json_path, extra: dict | None = None):
        """Per-point coordinates as CSV, spectrum and metric settings as JSON.

        ``extra`` entries are written into both files (e.g. a config hash).
        """
        m = self.eigenvectors.shape[1]
        write_matrix_csv(csv_path, [f"phi_{i + 1}" for i in range(m)], self.eigenvectors, extra)
        meta = {
            "format_version": 1,
            "eigenvalues": self.eigenvalues.tolist(),
            "trivial_eigenvalue": self.trivial_eigenvalue,
            "kept": [int(i) for i in self.kept],
            "epsilon": self.config.epsilon,
            "xi": self.config.xi,
            "policy_prefix": self.config.policy_prefix,
            "alpha": self.alpha,
            "scaling_k": self.scaling_k,
        }
        meta.update(extra or {})
        Path(json_path).write_text(json.dumps(meta, indent=2))

    @classmethod
    def load(cls, csv_path, json_path) -> "ManifoldEmbedding":
        meta = json.loads(Path(json_path).read_text())
        if meta.get("format_version") != 1:
            raise ValueError(f"unsupported embedding format version {meta.get('format_version')}")
        _, vecs, _ = read_matrix_csv(csv_path)
        cfg = InformedMetricConfig(meta["epsilon"], meta["xi"], meta["policy_prefix"])
        return cls(np.array(meta["eigenvalues"]), vecs, cfg, meta["alpha"], meta["scaling_k"], meta["kept"],
                   meta.get("trivial_eigenvalue", 1.0))


def markov_matrix(d: np.ndarray, alpha: float = 1.0):
    """Kernel, density normalization and row normalization.

    Returns ``(A, W_tilde, row_sums)`` with ``A = D^-1 W_tilde``.
    """
    W = np.exp(-d)
    P = W.sum(axis=1)
    Wt = W / np.outer(P ** alpha, P ** alpha)
    Dg = Wt.sum(axis=1)
    return Wt / Dg[:, None], Wt, Dg


def dmaps(Z, F, cfg: InformedMetricConfig, alpha: float = 1.0, n_eigs: int = 10, scaling_k: int = 0):
    """Diffusion-map embedding under the informed metric.

    ``F`` may be ``None`` for a plain Euclidean kernel scaled by ``epsilon``.
    The constant eigenvector (eigenvalue 1) is dropped; the remaining
    ``n_eigs`` are returned by descending eigenvalue.
    """
    Z = _as_2d(Z)
    n = Z.shape[0]
    if n < 10:
        raise ValueError("dmaps needs at least 10 points")
    if F is not None and cfg.policy_prefix is not None:
        F = _as_2d(F)[:, : cfg.policy_prefix]
    d = informed_distance_matrix(Z, F, cfg)
    W = np.exp(-d)
    P = W.sum(axis=1)
    Wt = W / np.outer(P ** alpha, P ** alpha)
    Dg = Wt.sum(axis=1)
    s = 1.0 / np.sqrt(Dg)
    S = Wt * np.outer(s, s)
    S = 0.5 * (S + S.T)
    m = min(n_eigs + 1, n)
    try:
        lam, V = eigh(S, subset_by_index=[n - m, n - 1])
    except np.linalg.LinAlgError as exc:
        raise RuntimeError(f"eigensolver failed on {n}x{n} conjugate Markov matrix: {exc}") from exc
    order = np.argsort(-lam)
    lam, V = lam[order], V[:, order]
    phi = V * s[:, None]
    phi /= np.linalg.norm(phi, axis=0)
    trivial = float(lam[0])
    lam, phi = lam[1:], phi[:, 1:]
    flip = np.sign(phi[np.argmax(np.abs(phi), axis=0), np.arange(phi.shape[1])])
    phi = phi * flip
    return ManifoldEmbedding(lam, phi, cfg, alpha, scaling_k, trivial_eigenvalue=trivial)


# --------------------------------------------------------------------------
# local linear regression


def local_linear_loo(X, y, bandwidth: float | None = None, bandwidth_scale: float = 3.0) -> np.ndarray:
    """Leave-one-out local linear predictions of ``y`` from ``X``.

    Gaussian weights ``exp(-|xi - xj|^2 / h^2)`` with ``h`` defaulting to
    the median pairwise distance divided by ``bandwidth_scale``.
    """
    X = _as_2d(X)
    y = np.asarray(y, dtype=float)
    n, p = X.shape
    dist2 = cdist(X, X, "sqeuclidean")
    if bandwidth is None:
        bandwidth = np.median(np.sqrt(dist2[np.triu_indices(n, 1)])) / bandwidth_scale
    W = np.exp(-dist2 / bandwidth ** 2)
    np.fill_diagonal(W, 0.0)
    Xt = np.hstack([np.ones((n, 1)), X])
    outer = (Xt[:, :, None] * Xt[:, None, :]).reshape(n, -1)
    M = (W @ outer).reshape(n, p + 1, p + 1)
    # pseudo-inverse copes with rank-deficient neighbourhoods
    Minv = np.linalg.pinv(M, rcond=1e-12, hermitian=True)
    ys = y[:, None] if y.ndim == 1 else y
    out = np.empty_like(ys)
    for col in range(ys.shape[1]):
        b = W @ (Xt * ys[:, col:col + 1])
        beta = np.einsum("nij,nj->ni", Minv, b)
        out[:, col] = np.sum(beta * Xt, axis=1)
    # points with no effective neighbours take their nearest neighbour's value
    lonely = W.sum(axis=1) < 1e-300
    if lonely.any():
        d = dist2[lonely].copy()
        d[np.arange(d.shape[0]), np.flatnonzero(lonely)] = np.inf
        out[lonely] = ys[np.argmin(d, axis=1)]
    return out[:, 0] if y.ndim == 1 else out


@dataclass
class LlrReport:
    residuals: np.ndarray
    threshold: float
    selected: list[int]


def llr_residuals(embedding, n_eigs: int = 10, threshold: float = DEFAULT_LLR_THRESHOLD,
                  bandwidth_scale: float = 3.0) -> LlrReport:
    """Relative leave-one-out residual of each eigenvector regressed on its predecessors.

    Indices are 0-based into the nontrivial eigenvectors; the first has
    residual 1 by convention. Eigenvectors with residual >= ``threshold``
    are selected as nonredundant.
    """
    phi = embedding.eigenvectors if isinstance(embedding, ManifoldEmbedding) else np.asarray(embedding)
    if n_eigs > phi.shape[1]:
        raise ValueError(f"requested {n_eigs} eigenvectors, only {phi.shape[1]} available")
    R = np.ones(n_eigs)
    for k in range(1, n_eigs):
        pred = local_linear_loo(phi[:, :k], phi[:, k], bandwidth_scale=bandwidth_scale)
        R[k] = np.sqrt(np.sum((phi[:, k] - pred) ** 2) / np.sum(phi[:, k] ** 2))
    selected = [int(k) for k in range(n_eigs) if R[k] >= threshold]
    if isinstance(embedding, ManifoldEmbedding):
        embedding.kept = selected
    return LlrReport(R, threshold, selected)


# --------------------------------------------------------------------------
# PCA


@dataclass
class PcaResult:
    scores: np.ndarray
    components: np.ndarray
    singular_values: np.ndarray
    mean: np.ndarray

    @property
    def explained_variance_ratio(self) -> np.ndarray:
        v = self.singular_values ** 2
        return v / v.sum()

    def reconstruct(self, n_components: int | None = None) -> np.ndarray:
        k = len(self.singular_values) if n_components is None else n_components
        return self.scores[:, :k] @ self.components[:k] + self.mean


def pca(X) -> PcaResult:
    X = _as_2d(X)
    mean = X.mean(axis=0)
    U, s, Vt = np.linalg.svd(X - mean, full_matrices=False)
    # deterministic signs: largest loading of each component positive
    sign = np.sign(Vt[np.arange(len(s)), np.argmax(np.abs(Vt), axis=1)])
    sign[sign == 0] = 1.0
    Vt = Vt * sign[:, None]
    U = U * sign
    return PcaResult(U * s, Vt, s, mean)


# --------------------------------------------------------------------------
# demonstration on a synthetic function


def demo_function(p):
    p = np.asarray(p, dtype=float)
    return 10.0 * np.sin(np.sqrt(p[:, 0] ** 2 + p[:, 1] ** 2)) + p[:, 1]


def poly_fit_r2(X, y, degree: int = 3) -> tuple[float, float]:
    """(R^2, residual sum of squares) of a least-squares fit in per-coordinate powers up to ``degree``."""
    from .approx import poly_features

    X = _as_2d(X)
    Phi = poly_features(X, degree)
    coef, *_ = np.linalg.lstsq(Phi, y, rcond=None)
    rss = float(np.sum((y - Phi @ coef) ** 2))
    return 1.0 - rss / float(np.sum((y - y.mean()) ** 2)), rss


def demo_informed_reparametrization(n_grid: int = 40, extent: float = 10.0, c_in: float = 0.1,
                                    c_fn: float = 10.0, degree: int = 3) -> dict:
    """Informed DMAPS on a regular grid colored by ``10 sin(|p|) + p_2``.

    Reports how well ``q`` is captured by a polynomial in the first
    diffusion coordinate versus the same degree in the raw grid
    coordinates.
    """
    g = np.linspace(-extent, extent, n_grid)
    P = np.array([(a, b) for a in g for b in g])
    q = demo_function(P)
    eps, xi = tune_scales(P, q, c_in=c_in, c_fn=c_fn)
    emb = dmaps(P, q, InformedMetricConfig(eps, xi), n_eigs=4)
    phi1 = emb.eigenvectors[:, 0]
    r2_phi, rss_phi = poly_fit_r2(phi1, q, degree)
    r2_p, rss_p = poly_fit_r2(P, q, degree)
    return {
        "points": P,
        "q": q,
        "phi": emb.eigenvectors,
        "eigenvalues": emb.eigenvalues,
        "epsilon": eps,
        "xi": xi,
        "r2_phi1": r2_phi,
        "rss_phi1": rss_phi,
        "r2_p": r2_p,
        "rss_p": rss_p,
    }
