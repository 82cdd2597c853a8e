import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from explicit_mpc.approx import (
    ClampWarning,
    GpModel,
    MlpModel,
    PolyModel,
    Scaler,
    fit_gp,
    fit_mlp,
    fit_model,
    fit_poly,
    gp_nlml,
    init_mlp,
    load_model,
    matern_kernel,
    matern_matrix,
    mlp_loss_grad,
    poly_features,
    predict_gp,
    predict_mlp,
    predict_poly,
)

# -- scaler -----------------------------------------------------------------


@settings(max_examples=50)
@given(arrays(float, (12, 3), elements=st.floats(-1e3, 1e3)))
def test_scaler_round_trip(X):
    s = Scaler.fit(X)
    T = s.transform(X)
    assert np.all((T >= -1e-12) & (T <= 1 + 1e-12))
    np.testing.assert_allclose(s.inverse(T), X, rtol=1e-12, atol=1e-12 * (1 + np.abs(X).max()))


def test_scaler_clamps_with_counted_warning():
    s = Scaler.fit(np.array([[0.0, 0.0], [1.0, 2.0]]))
    with pytest.warns(ClampWarning, match="clamped 2"):
        T = s.transform(np.array([[-1.0, 1.0], [0.5, 5.0]]), clamp=True)
    assert T.tolist() == [[0.0, 0.5], [0.5, 1.0]]


# -- Matern kernel ----------------------------------------------------------


def test_matern_values():
    assert matern_kernel([0.3, 0.1], [0.3, 0.1], [2.0, 5.0], 1.7) == 1.7
    # r = 1: (1 + sqrt 3) exp(-sqrt 3) = 0.483358
    assert matern_kernel([0.0], [1.0], [1.0]) == pytest.approx((1 + np.sqrt(3)) * np.exp(-np.sqrt(3)), rel=1e-14)
    assert matern_kernel([0.0], [1.0], [1.0]) == pytest.approx(0.483358, abs=1e-6)
    # ARD: distance sqrt(sum theta_d^2 (a_d - b_d)^2) = sqrt(0.36 + 0.64)
    assert matern_kernel([0.0, 0.0], [0.6, 0.4], [1.0, 2.0]) == pytest.approx(0.483358, abs=1e-6)
    with pytest.raises(ValueError):
        matern_kernel([0.0], [1.0], [0.0])


@settings(max_examples=50)
@given(arrays(float, 3, elements=st.floats(-5, 5)), arrays(float, 3, elements=st.floats(-5, 5)))
def test_matern_symmetric(a, b):
    th = np.array([0.5, 1.0, 2.0])
    assert matern_kernel(a, b, th) == matern_kernel(b, a, th)
    assert matern_matrix(a[None], b[None], th, 1.0)[0, 0] == pytest.approx(matern_kernel(a, b, th), rel=1e-12)


# -- polynomial regression --------------------------------------------------


def test_poly_features_per_dimension_powers():
    F = poly_features(np.array([[2.0, 3.0]]), 3)
    assert F.tolist() == [[1, 2, 3, 4, 9, 8, 27]]


def test_poly_recovers_exact_cubic(rng):
    x = rng.uniform(-2, 2, 40)
    y = 0.5 - 1.5 * x + 0.25 * x ** 2 + 2.0 * x ** 3
    m = fit_poly(x, y, 3)
    xt = np.linspace(x.min(), x.max(), 17)
    np.testing.assert_allclose(predict_poly(m, xt)[:, 0], 0.5 - 1.5 * xt + 0.25 * xt ** 2 + 2.0 * xt ** 3,
                               atol=1e-8)
    # coefficients in the scaled variable s = (x - lo) / span, expanded by hand
    lo, span = m.x_scaler.lo[0], m.x_scaler.span[0]
    s = np.polynomial.Polynomial([lo, span])
    ref = (0.5 - 1.5 * s + 0.25 * s ** 2 + 2.0 * s ** 3 - m.y_scaler.lo[0]) / m.y_scaler.span[0]
    np.testing.assert_allclose(m.coef[:, 0], ref.coef, atol=1e-8)


def test_poly_constant_targets(rng):
    X = rng.normal(size=(20, 2))
    m = fit_poly(X, np.full(20, 3.25))
    np.testing.assert_allclose(m.predict(rng.normal(size=(5, 2)) * 0.1), 3.25, atol=1e-12)


def test_poly_residual_orthogonality(rng):
    X = rng.uniform(size=(50, 2))
    Y = np.column_stack([np.sin(5 * X[:, 0]), np.exp(X[:, 1])])
    m = fit_poly(X, Y, 3)
    Phi = poly_features(m.x_scaler.transform(X), 3)
    R = m.y_scaler.transform(Y) - Phi @ m.coef
    assert np.max(np.abs(Phi.T @ R)) < 1e-8


def test_poly_rank_deficient_falls_back_to_ridge(rng):
    X = np.column_stack([rng.uniform(size=30), np.ones(30)])
    with pytest.warns(RuntimeWarning, match="ridge"):
        m = fit_poly(X, X[:, 0] ** 2)
    assert np.all(np.isfinite(m.coef))
    with pytest.raises(ValueError):
        fit_poly(np.zeros((3, 2)), np.zeros(3))


# -- Gaussian process -------------------------------------------------------


def test_gp_interpolates_training_points(rng):
    X = rng.uniform(-1, 1, (25, 2))
    y = np.sin(3 * X[:, 0]) + X[:, 1] ** 2
    m = fit_gp(X, y, noise_bounds=(1e-10, 1e-8))
    mean, var = predict_gp(m, X[:3])
    np.testing.assert_allclose(mean[:, 0], y[:3], atol=1e-6)
    assert np.all(var <= 1e-6)


def test_gp_nlml_gradient(rng):
    X = rng.uniform(size=(15, 3))
    y = rng.normal(size=15)
    p = np.log(np.array([1.5, 0.7, 3.0, 0.8, 0.05]))
    _, g = gp_nlml(p, X, y)
    h = 1e-6
    fd = np.array([(gp_nlml(p + h * e, X, y)[0] - gp_nlml(p - h * e, X, y)[0]) / (2 * h) for e in np.eye(5)])
    np.testing.assert_allclose(g, fd, rtol=1e-4)


def test_gp_ard_relevance(rng):
    X = rng.uniform(size=(120, 3))
    y = np.sin(6 * X[:, 0])
    m = fit_gp(X, y, seed=1)
    th = m.outputs[0].theta
    assert th[0] >= 10 * th[1] and th[0] >= 10 * th[2]


def test_gp_variance_nonnegative(rng):
    X = rng.uniform(size=(30, 2))
    m = fit_gp(X, X[:, 0] * X[:, 1])
    _, var = m.predict_with_variance(rng.uniform(-0.5, 1.5, (200, 2)))
    assert np.all(var >= 0)


def test_gp_vector_output_is_independent(rng):
    X = rng.uniform(size=(30, 2))
    Y = np.column_stack([X[:, 0], np.cos(4 * X[:, 1])])
    both = fit_gp(X, Y, seed=0)
    assert len(both.outputs) == 2
    assert both.outputs[0].theta[0] != both.outputs[1].theta[0]


# -- multilayer perceptron --------------------------------------------------


@pytest.mark.parametrize("output_activation", ["relu", "linear"])
def test_mlp_backprop_matches_finite_differences(output_activation):
    r = np.random.default_rng(3)
    W, b = init_mlp([2, 3, 1], r)
    X = r.uniform(size=(7, 2))
    Y = r.uniform(size=(7, 1))
    _, gW, gb = mlp_loss_grad(W, b, X, Y, output_activation)
    h = 1e-6
    for params, grads in ((W, gW), (b, gb)):
        for P, G in zip(params, grads):
            for idx in np.ndindex(P.shape):
                old = P[idx]
                P[idx] = old + h
                lp = mlp_loss_grad(W, b, X, Y, output_activation)[0]
                P[idx] = old - h
                lm = mlp_loss_grad(W, b, X, Y, output_activation)[0]
                P[idx] = old
                fd = (lp - lm) / (2 * h)
                assert G[idx] == pytest.approx(fd, rel=1e-5, abs=1e-10)


def test_mlp_learns_relu():
    x = np.linspace(-1, 1, 201)
    m = fit_mlp(x, np.maximum(0, x), hidden=(20, 20), epochs=1500, batch_size=32, seed=0)
    assert np.mean((predict_mlp(m, x)[:, 0] - np.maximum(0, x)) ** 2) < 1e-4


def test_mlp_default_architecture_and_determinism(rng):
    X = rng.uniform(size=(40, 3))
    Y = X[:, :2] ** 2
    a = fit_mlp(X, Y, epochs=5, seed=4)
    b = fit_mlp(X, Y, epochs=5, seed=4)
    assert a.layer_sizes == [3] + [20] * 8 + [2]
    assert all(np.array_equal(u, v) for u, v in zip(a.weights, b.weights))
    assert len(a.history["train_loss"]) == 5 and len(a.history["val_loss"]) == 5


def test_mlp_restores_best_validation_epoch(rng):
    X = rng.uniform(size=(60, 2))
    m = fit_mlp(X, X.sum(axis=1, keepdims=True), hidden=(8, 8), epochs=60, seed=0)
    v = m.history["val_loss"]
    assert m.history["best_epoch"] == int(np.argmin(v))


def test_mlp_divergence_raises(rng):
    X = rng.uniform(size=(40, 2))
    with pytest.raises(FloatingPointError, match="lower learning rate"):
        with np.errstate(all="ignore"):
            fit_mlp(X, X, hidden=(20, 20), epochs=20, lr=1e150, output_activation="linear")


# -- common contract --------------------------------------------------------


def _fit_all(rng):
    X = rng.uniform(size=(40, 2))
    Y = np.column_stack([X[:, 0] ** 2, X[:, 1] - X[:, 0]])
    return X, {k: fit_model(k, X, Y, **kw) for k, kw in
               (("poly", {}), ("gp", {"seed": 0}), ("mlp", {"epochs": 20, "hidden": (10,) * 3}))}


def test_models_share_contract_and_round_trip(tmp_path, rng):
    X, models = _fit_all(rng)
    for kind, m in models.items():
        assert m.predict(X).shape == (40, 2)
        m.save(tmp_path / f"{kind}.json")
        back = load_model(tmp_path / f"{kind}.json")
        assert type(back) is type(m)
        np.testing.assert_allclose(back.predict(X), m.predict(X), rtol=1e-12, atol=1e-12)
    assert isinstance(models["poly"], PolyModel)
    assert isinstance(models["gp"], GpModel)
    assert isinstance(models["mlp"], MlpModel)
    with pytest.raises(ValueError):
        fit_model("svm", X, X)


def test_models_clamp_out_of_range_inputs(rng):
    X, models = _fit_all(rng)
    for m in models.values():
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            far = m.predict(np.array([[5.0, -5.0]]))
        assert any(issubclass(c.category, ClampWarning) for c in caught)
        edge = m.predict(np.array([[X[:, 0].max(), X[:, 1].min()]]))
        np.testing.assert_allclose(far, edge, rtol=1e-12)
