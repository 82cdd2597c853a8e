import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import spearmanr

from explicit_mpc.manifold import (
    InformedMetricConfig,
    ManifoldEmbedding,
    default_policy_prefix,
    demo_function,
    demo_informed_reparametrization,
    dmaps,
    informed_distance,
    informed_distance_matrix,
    llr_residuals,
    local_linear_loo,
    markov_matrix,
    pca,
    tune_scales,
)


def _cloud(rng, n=120):
    Z = rng.uniform(-1, 1, (n, 2))
    F = np.column_stack([np.sin(3 * Z[:, 0]), Z[:, 1] ** 2])
    return Z, F


# -- metric -----------------------------------------------------------------


def test_informed_distance_values():
    cfg = InformedMetricConfig(1.0, 1.0)
    assert informed_distance([1, 2], [1, 2], [3], [3], cfg) == 0.0
    assert informed_distance([0, 0], [2, 0], [0], [3], cfg) == 13.0
    cfg = InformedMetricConfig(2.0, 0.5)
    assert informed_distance([0, 0], [2, 0], [0], [3], cfg) == pytest.approx(4 / 2 + 9 / 0.5)


@settings(max_examples=50)
@given(st.lists(st.floats(-10, 10), min_size=6, max_size=6))
def test_informed_distance_symmetric(v):
    cfg = InformedMetricConfig(0.3, 7.0)
    a, b, fa, fb = v[:2], v[2:4], v[4:5], v[5:]
    assert informed_distance(a, b, fa, fb, cfg) == informed_distance(b, a, fb, fa, cfg)


def test_metric_config_validation():
    with pytest.raises(ValueError):
        InformedMetricConfig(0.0, 1.0)
    assert default_policy_prefix(3, 20) == 7
    assert default_policy_prefix(5, 6) == 6


def test_tune_scales_ratio_and_homogeneity(rng):
    Z, F = _cloud(rng)
    eps, xi = tune_scales(Z, F)
    D = informed_distance_matrix(Z, None, InformedMetricConfig(eps, 1.0))
    iu = np.triu_indices(len(Z), 1)
    med_in = np.median(D[iu])
    med_fn = np.median(((F[:, None, :] - F[None, :, :]) ** 2).sum(-1)[iu]) / xi
    assert med_fn / med_in == pytest.approx(100.0, rel=1e-12)
    eps2, xi2 = tune_scales(2 * Z, F)
    assert eps2 == pytest.approx(4 * eps, rel=1e-12) and xi2 == xi


def test_tune_scales_subsampled_medians(rng):
    Z, F = _cloud(rng, 400)
    full = tune_scales(Z, F)
    sub = tune_scales(Z, F, max_pairs=20000, seed=1)
    np.testing.assert_allclose(sub, full, rtol=0.05)


def test_tune_scales_degenerate():
    with pytest.raises(ValueError, match="degenerate"):
        tune_scales(np.ones((5, 2)), np.arange(5.0))
    with pytest.raises(ValueError):
        tune_scales(np.ones((1, 2)), np.ones(1))


# -- diffusion maps ---------------------------------------------------------


def test_markov_rows_and_spectrum(rng):
    Z, F = _cloud(rng)
    cfg = InformedMetricConfig(*tune_scales(Z, F))
    A, _, _ = markov_matrix(informed_distance_matrix(Z, F, cfg))
    assert np.max(np.abs(A.sum(axis=1) - 1.0)) < 1e-12
    lam = np.linalg.eigvals(A)
    assert np.max(np.abs(lam.imag)) < 1e-10
    assert np.max(np.abs(lam)) <= 1 + 1e-10
    emb = dmaps(Z, F, cfg, n_eigs=8)
    assert np.all(np.abs(emb.eigenvalues) <= 1 + 1e-10)
    assert np.all(np.diff(emb.eigenvalues) <= 0)
    assert emb.eigenvalues[0] < 1.0
    assert emb.trivial_eigenvalue == pytest.approx(1.0, abs=1e-10)
    np.testing.assert_allclose(np.linalg.norm(emb.eigenvectors, axis=0), 1.0)
    # eigenpairs of the Markov matrix itself
    for j in range(3):
        v = emb.eigenvectors[:, j]
        np.testing.assert_allclose(A @ v, emb.eigenvalues[j] * v, atol=1e-10)


def test_curve_first_coordinate_monotone():
    s = np.linspace(0, 1, 200)
    Z = np.column_stack([np.cos(2.5 * s), np.sin(2.5 * s)]) * (1 + s)[:, None]
    eps = np.median(np.diff(Z, axis=0) ** 2) * 50
    emb = dmaps(Z, None, InformedMetricConfig(eps, 1.0), n_eigs=3)
    assert abs(spearmanr(s, emb.eigenvectors[:, 0])[0]) > 0.99


def test_duplicated_data_keeps_spectrum(rng):
    Z, F = _cloud(rng, 80)
    cfg = InformedMetricConfig(*tune_scales(Z, F))
    a = dmaps(Z, F, cfg, n_eigs=6).eigenvalues
    b = dmaps(np.vstack([Z, Z]), np.vstack([F, F]), cfg, n_eigs=6).eigenvalues
    np.testing.assert_allclose(a, b, atol=1e-6)


def test_permutation_invariance(rng):
    Z, F = _cloud(rng, 100)
    cfg = InformedMetricConfig(*tune_scales(Z, F))
    a = dmaps(Z, F, cfg, n_eigs=4)
    perm = rng.permutation(len(Z))
    b = dmaps(Z[perm], F[perm], cfg, n_eigs=4)
    np.testing.assert_allclose(a.eigenvalues, b.eigenvalues, atol=1e-10)
    for j in range(4):
        assert abs(a.eigenvectors[perm, j] @ b.eigenvectors[:, j]) == pytest.approx(1.0, abs=1e-6)


def test_sign_convention(rng):
    Z, F = _cloud(rng)
    emb = dmaps(Z, F, InformedMetricConfig(*tune_scales(Z, F)), n_eigs=5)
    V = emb.eigenvectors
    assert np.all(V[np.argmax(np.abs(V), axis=0), np.arange(V.shape[1])] > 0)


def test_dmaps_needs_ten_points():
    with pytest.raises(ValueError):
        dmaps(np.zeros((5, 2)), None, InformedMetricConfig(1.0, 1.0))


def test_embedding_round_trip(tmp_path, rng):
    Z, F = _cloud(rng, 50)
    emb = dmaps(Z, F, InformedMetricConfig(*tune_scales(Z, F), policy_prefix=2), n_eigs=5)
    llr_residuals(emb, 5)
    emb.save(tmp_path / "e.csv", tmp_path / "e.json", {"config_hash": "abc"})
    back = ManifoldEmbedding.load(tmp_path / "e.csv", tmp_path / "e.json")
    assert np.array_equal(back.eigenvectors, emb.eigenvectors)
    assert np.array_equal(back.eigenvalues, emb.eigenvalues)
    assert back.kept == emb.kept and back.config == emb.config


# -- local linear regression ------------------------------------------------


def test_local_linear_reproduces_linear_functions(rng):
    X = rng.uniform(-1, 1, (60, 2))
    y = 3 * X[:, 0] - 2 * X[:, 1] + 0.5
    np.testing.assert_allclose(local_linear_loo(X, y), y, atol=1e-8)


def _strip(aspect, n=600, seed=0):
    r = np.random.default_rng(seed)
    return np.column_stack([r.uniform(0, aspect, n), r.uniform(0, 1, n)])


def test_llr_detects_harmonic_on_strip():
    Z = _strip(5.0)
    emb = dmaps(Z, None, InformedMetricConfig(0.1, 1.0), n_eigs=4)
    rep = llr_residuals(emb, 4)
    assert rep.residuals[0] == 1.0
    assert rep.residuals[1] < 0.2
    assert 1 not in rep.selected


def test_llr_keeps_new_direction_on_square():
    Z = _strip(1.0)
    emb = dmaps(Z, None, InformedMetricConfig(0.05, 1.0), n_eigs=3)
    rep = llr_residuals(emb, 3)
    assert rep.residuals[1] > 0.5
    assert rep.selected[:2] == [0, 1]


def test_llr_selection_ignores_scaling_exponent():
    Z = _strip(3.0, 400)
    base = dmaps(Z, None, InformedMetricConfig(0.1, 1.0), n_eigs=5)
    sel = llr_residuals(base.coordinates(range(5), scaling_k=0), 5).selected
    for k in (1, 3):
        assert llr_residuals(base.coordinates(range(5), scaling_k=k), 5).selected == sel


def test_llr_rejects_too_many():
    with pytest.raises(ValueError):
        llr_residuals(np.zeros((20, 3)), 5)


# -- PCA --------------------------------------------------------------------


def test_pca_isotropic(rng):
    X = rng.normal(size=(20000, 3))
    np.testing.assert_allclose(pca(X).explained_variance_ratio, 1 / 3, atol=0.01)


def test_pca_plane_rank_and_reconstruction(rng):
    B = rng.normal(size=(2, 5))
    X = rng.normal(size=(100, 2)) @ B + 3.0
    p = pca(X)
    assert p.singular_values[2] < 1e-10
    np.testing.assert_allclose(p.reconstruct(), X, atol=1e-10)
    np.testing.assert_allclose(p.reconstruct(2), X, atol=1e-10)
    assert np.all(np.diff(p.singular_values) <= 0)


# -- synthetic demonstration ------------------------------------------------


def test_demo_reparametrization():
    r = demo_informed_reparametrization(n_grid=30)
    assert r["r2_phi1"] >= 0.95
    assert r["rss_p"] > r["rss_phi1"]
    g = np.linspace(-10, 10, 30)
    P = np.array([(a, b) for a in g for b in g])
    # the embedding never reorders points or alters q
    np.testing.assert_array_equal(r["points"], P)
    np.testing.assert_array_equal(r["q"], demo_function(P))
    np.testing.assert_allclose(r["q"], 10 * np.sin(np.hypot(P[:, 0], P[:, 1])) + P[:, 1], rtol=1e-12, atol=1e-12)
