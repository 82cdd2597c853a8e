"""Function approximators with a shared fit/predict contract.

Every model rescales inputs and outputs to [0, 1] with a :class:`Scaler`
fitted on the training data; inputs outside the training box are clamped
at predict time.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular
from scipy.optimize import minimize
from scipy.spatial.distance import cdist

FORMAT_VERSION = 1
SQRT3 = np.sqrt(3.0)


def _as_2d(a):
    a = np.asarray(a, dtype=float)
    return a[:, None] if a.ndim == 1 else a


class ClampWarning(UserWarning):
    pass


@dataclass
class Scaler:
    """Per-column affine map of the training range onto [0, 1]."""

    lo: np.ndarray
    hi: np.ndarray

    @classmethod
    def fit(cls, X) -> "Scaler":
        X = _as_2d(X)
        return cls(X.min(axis=0), X.max(axis=0))

    @property
    def span(self) -> np.ndarray:
        s = self.hi - self.lo
        return np.where(s > 0, s, 1.0)

    def transform(self, X, clamp: bool = False) -> np.ndarray:
        X = _as_2d(X)
        if clamp:
            n_out = int(np.sum((X < self.lo) | (X > self.hi)))
            if n_out:
                warnings.warn(f"clamped {n_out} input entries to the training range", ClampWarning,
                              stacklevel=3)
                X = np.clip(X, self.lo, self.hi)
        return (X - self.lo) / self.span

    def inverse(self, Xs) -> np.ndarray:
        return _as_2d(Xs) * self.span + self.lo

    def to_dict(self):
        return {"lo": self.lo.tolist(), "hi": self.hi.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["lo"], dtype=float), np.array(d["hi"], dtype=float))


class Model:
    """Common fit/predict surface over (n, d_in) -> (n, d_out) matrices."""

    kind = "model"
    x_scaler: Scaler
    y_scaler: Scaler

    def predict(self, X) -> np.ndarray:
        X = _as_2d(X)
        Ys = self._predict_scaled(self.x_scaler.transform(X, clamp=True))
        return self.y_scaler.inverse(Ys)

    def _predict_scaled(self, Xs):
        raise NotImplementedError

    def to_dict(self) -> dict:
        raise NotImplementedError

    def save(self, path):
        Path(path).write_text(json.dumps(
            {"format_version": FORMAT_VERSION, "kind": self.kind, **self.to_dict()}))


def load_model(path) -> Model:
    d = json.loads(Path(path).read_text())
    if d.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported model format version {d.get('format_version')}")
    return _KINDS[d["kind"]].from_dict(d)


# --------------------------------------------------------------------------
# polynomial regression


def poly_features(X, degree: int) -> np.ndarray:
    """``[1, x, x^2, ..., x^degree]`` per input column (no cross terms)."""
    X = _as_2d(X)
    cols = [np.ones((X.shape[0], 1))]
    for p in range(1, degree + 1):
        cols.append(X ** p)
    return np.hstack(cols)


@dataclass
class PolyModel(Model):
    degree: int
    coef: np.ndarray
    x_scaler: Scaler
    y_scaler: Scaler
    kind = "poly"

    def _predict_scaled(self, Xs):
        return poly_features(Xs, self.degree) @ self.coef

    def to_dict(self):
        return {"degree": self.degree, "coef": self.coef.tolist(),
                "x_scaler": self.x_scaler.to_dict(), "y_scaler": self.y_scaler.to_dict()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["degree"], np.array(d["coef"]), Scaler.from_dict(d["x_scaler"]),
                   Scaler.from_dict(d["y_scaler"]))


def fit_poly(X, Y, degree: int = 3, ridge: float = 1e-10) -> PolyModel:
    """Least squares via QR; falls back to a tiny ridge if the features are rank deficient."""
    X, Y = _as_2d(X), _as_2d(Y)
    xs, ys = Scaler.fit(X), Scaler.fit(Y)
    Phi = poly_features(xs.transform(X), degree)
    if Phi.shape[0] < Phi.shape[1]:
        raise ValueError(f"{Phi.shape[0]} rows cannot determine {Phi.shape[1]} coefficients")
    Yt = ys.transform(Y)
    Qm, Rm = np.linalg.qr(Phi)
    diag = np.abs(np.diag(Rm))
    if diag.min() <= 1e-12 * diag.max():
        warnings.warn(f"rank-deficient polynomial features; using ridge {ridge:g}", RuntimeWarning,
                      stacklevel=2)
        coef = np.linalg.solve(Phi.T @ Phi + ridge * np.eye(Phi.shape[1]), Phi.T @ Yt)
    else:
        coef = solve_triangular(Rm, Qm.T @ Yt)
    return PolyModel(degree, coef, xs, ys)


def predict_poly(model: PolyModel, X) -> np.ndarray:
    return model.predict(X)


# --------------------------------------------------------------------------
# Gaussian process regression


def matern_kernel(a, b, theta, sigma2: float = 1.0) -> float:
    """Matern 3/2 with ARD inverse lengthscales ``theta``."""
    a, b, theta = (np.atleast_1d(np.asarray(v, dtype=float)) for v in (a, b, theta))
    if np.any(theta <= 0):
        raise ValueError("lengthscale weights must be positive")
    r = np.sqrt(np.sum(theta ** 2 * (a - b) ** 2))
    return float(sigma2 * (1.0 + SQRT3 * r) * np.exp(-SQRT3 * r))


def matern_matrix(A, B, theta, sigma2):
    r = cdist(_as_2d(A) * theta, _as_2d(B) * theta)
    return sigma2 * (1.0 + SQRT3 * r) * np.exp(-SQRT3 * r)


def _chol(K, jitter0=0.0, max_tries=8):
    jitter = jitter0
    scale = np.mean(np.diag(K))
    for _ in range(max_tries):
        try:
            return cho_factor(K + jitter * np.eye(len(K)), lower=True), jitter
        except np.linalg.LinAlgError:
            jitter = scale * 1e-10 if jitter == 0 else jitter * 10
    raise np.linalg.LinAlgError(f"kernel matrix not positive definite after jitter {jitter:g}")


def gp_nlml(log_params, X, y):
    """Negative log marginal likelihood and its gradient in log-parameters
    ``[log theta_1..d, log sigma2, log noise]``."""
    d = X.shape[1]
    theta = np.exp(log_params[:d])
    sigma2 = np.exp(log_params[d])
    noise = np.exp(log_params[d + 1])
    n = len(y)
    r = cdist(X * theta, X * theta)
    e = np.exp(-SQRT3 * r)
    Kf = sigma2 * (1.0 + SQRT3 * r) * e
    K = Kf + noise * np.eye(n)
    (L, lower), _ = _chol(K)
    alpha = cho_solve((L, lower), y)
    val = 0.5 * y @ alpha + np.sum(np.log(np.diag(L))) + 0.5 * n * np.log(2 * np.pi)
    Kinv = cho_solve((L, lower), np.eye(n))
    Wm = np.outer(alpha, alpha) - Kinv
    grad = np.empty(d + 2)
    base = -3.0 * sigma2 * e
    for j in range(d):
        diff2 = (X[:, j:j + 1] - X[:, j:j + 1].T) ** 2
        dK = base * theta[j] ** 2 * diff2
        grad[j] = -0.5 * np.sum(Wm * dK)
    grad[d] = -0.5 * np.sum(Wm * Kf)
    grad[d + 1] = -0.5 * noise * np.trace(Wm)
    return float(val), grad


@dataclass
class GpOutput:
    theta: np.ndarray
    sigma2: float
    noise: float
    alpha: np.ndarray
    y_mean: float
    jitter: float = 0.0


@dataclass
class GpModel(Model):
    X: np.ndarray
    outputs: list[GpOutput]
    x_scaler: Scaler
    y_scaler: Scaler
    _chols: list = field(default_factory=list, repr=False, compare=False)
    kind = "gp"

    def _factor(self, i):
        while len(self._chols) <= i:
            o = self.outputs[len(self._chols)]
            K = matern_matrix(self.X, self.X, o.theta, o.sigma2) + (o.noise + o.jitter) * np.eye(len(self.X))
            self._chols.append(cho_factor(K, lower=True))
        return self._chols[i]

    def _predict_scaled(self, Xs):
        out = np.empty((Xs.shape[0], len(self.outputs)))
        for i, o in enumerate(self.outputs):
            Ks = matern_matrix(Xs, self.X, o.theta, o.sigma2)
            out[:, i] = Ks @ o.alpha + o.y_mean
        return out

    def predict_with_variance(self, X):
        """Mean and latent (noise-free) predictive variance in original units."""
        Xs = self.x_scaler.transform(X, clamp=True)
        mean = self.y_scaler.inverse(self._predict_scaled(Xs))
        var = np.empty_like(mean)
        for i, o in enumerate(self.outputs):
            Ks = matern_matrix(Xs, self.X, o.theta, o.sigma2)
            L, lower = self._factor(i)
            v = solve_triangular(L, Ks.T, lower=True)
            var[:, i] = np.maximum(o.sigma2 - np.sum(v ** 2, axis=0), 0.0) * self.y_scaler.span[i] ** 2
        return mean, var

    def to_dict(self):
        return {
            "X": self.X.tolist(),
            "outputs": [{"theta": o.theta.tolist(), "sigma2": o.sigma2, "noise": o.noise,
                         "alpha": o.alpha.tolist(), "y_mean": o.y_mean, "jitter": o.jitter}
                        for o in self.outputs],
            "x_scaler": self.x_scaler.to_dict(),
            "y_scaler": self.y_scaler.to_dict(),
        }

    @classmethod
    def from_dict(cls, d):
        outs = [GpOutput(np.array(o["theta"]), o["sigma2"], o["noise"], np.array(o["alpha"]),
                         o["y_mean"], o["jitter"]) for o in d["outputs"]]
        return cls(np.array(d["X"]), outs, Scaler.from_dict(d["x_scaler"]), Scaler.from_dict(d["y_scaler"]))


def _fit_gp_output(Xs, y, restarts, rng, n_opt_max, noise_bounds):
    n, d = Xs.shape
    y_mean = float(y.mean())
    yc = y - y_mean
    idx = np.arange(n)
    if n > n_opt_max:
        idx = np.sort(rng.choice(n, n_opt_max, replace=False))
    Xo, yo = Xs[idx], yc[idx]
    var = max(float(np.var(yc)), 1e-12)
    bounds = [(np.log(1e-3), np.log(1e3))] * d + [(np.log(var * 1e-3), np.log(var * 1e3)),
                                                  (np.log(noise_bounds[0]), np.log(noise_bounds[1]))]
    best = None
    for r in range(restarts):
        if r == 0:
            x0 = np.r_[np.zeros(d), np.log(var), np.log(var * 1e-2)]
        else:
            x0 = np.array([rng.uniform(lo, hi) for lo, hi in bounds])
            x0[: d] = rng.uniform(np.log(0.3), np.log(10.0), d)
        try:
            res = minimize(gp_nlml, x0, args=(Xo, yo), jac=True, method="L-BFGS-B", bounds=bounds)
        except np.linalg.LinAlgError:
            continue
        if best is None or res.fun < best.fun:
            best = res
    if best is None:
        raise np.linalg.LinAlgError("all GP restarts failed to factorize the kernel")
    p = best.x
    theta, sigma2, noise = np.exp(p[:d]), float(np.exp(p[d])), float(np.exp(p[d + 1]))
    K = matern_matrix(Xs, Xs, theta, sigma2) + noise * np.eye(n)
    cf, jitter = _chol(K)
    alpha = cho_solve(cf, yc)
    return GpOutput(theta, sigma2, noise, alpha, y_mean, jitter), cf


def fit_gp(X, Y, restarts: int = 3, seed: int = 0, n_opt_max: int = 600,
           noise_bounds=(1e-10, 1e-1)) -> GpModel:
    """Independent Matern-ARD GP per output column.

    Hyperparameters minimize the negative log marginal likelihood on at
    most ``n_opt_max`` training rows (L-BFGS, ``restarts`` starts); the
    posterior then conditions on all rows. Noise bounds are in scaled
    target units.
    """
    X, Y = _as_2d(X), _as_2d(Y)
    xs, ys = Scaler.fit(X), Scaler.fit(Y)
    Xs, Ys = xs.transform(X), ys.transform(Y)
    rng = np.random.default_rng(seed)
    outs, chols = [], []
    for j in range(Ys.shape[1]):
        o, cf = _fit_gp_output(Xs, Ys[:, j], restarts, rng, n_opt_max, noise_bounds)
        outs.append(o)
        chols.append(cf)
    return GpModel(Xs, outs, xs, ys, chols)


def predict_gp(model: GpModel, X):
    return model.predict_with_variance(X)


# --------------------------------------------------------------------------
# multilayer perceptron


def _relu(x):
    return np.maximum(x, 0.0)


@dataclass
class MlpModel(Model):
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    x_scaler: Scaler
    y_scaler: Scaler
    output_activation: str = "relu"
    history: dict = field(default_factory=dict, compare=False)
    kind = "mlp"

    @property
    def layer_sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [W.shape[1] for W in self.weights]

    def _predict_scaled(self, Xs):
        return mlp_forward(self.weights, self.biases, Xs, self.output_activation)[0][-1]

    def to_dict(self):
        return {"weights": [W.tolist() for W in self.weights], "biases": [b.tolist() for b in self.biases],
                "output_activation": self.output_activation,
                "x_scaler": self.x_scaler.to_dict(), "y_scaler": self.y_scaler.to_dict()}

    @classmethod
    def from_dict(cls, d):
        return cls([np.array(W) for W in d["weights"]], [np.array(b) for b in d["biases"]],
                   Scaler.from_dict(d["x_scaler"]), Scaler.from_dict(d["y_scaler"]), d["output_activation"])


def mlp_forward(weights, biases, X, output_activation="relu"):
    """Returns (activations per layer incl. input, pre-activations per layer)."""
    acts, pre = [X], []
    last = len(weights) - 1
    for i, (W, b) in enumerate(zip(weights, biases)):
        z = acts[-1] @ W + b
        pre.append(z)
        acts.append(z if (i == last and output_activation == "linear") else _relu(z))
    return acts, pre


def mlp_loss_grad(weights, biases, X, Y, output_activation="relu"):
    """Mean squared error (averaged over rows and outputs) and its gradients."""
    acts, pre = mlp_forward(weights, biases, X, output_activation)
    n, m = Y.shape
    diff = acts[-1] - Y
    loss = float(np.mean(diff ** 2))
    delta = 2.0 * diff / (n * m)
    gW, gb = [None] * len(weights), [None] * len(weights)
    for i in range(len(weights) - 1, -1, -1):
        if not (i == len(weights) - 1 and output_activation == "linear"):
            delta = delta * (pre[i] > 0)
        gW[i] = acts[i].T @ delta
        gb[i] = delta.sum(axis=0)
        if i:
            delta = delta @ weights[i].T
    return loss, gW, gb


def init_mlp(sizes, rng, output_bias: float = 0.5):
    weights, biases = [], []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound = np.sqrt(6.0 / a)
        weights.append(rng.uniform(-bound, bound, size=(a, b)))
        biases.append(np.full(b, output_bias if i == len(sizes) - 2 else 0.0))
    return weights, biases


def fit_mlp(X, Y, hidden=(20,) * 8, epochs: int = 2000, lr: float = 1e-3, batch_size: int = 128,
            seed: int = 0, val_fraction: float = 0.1, output_activation: str = "relu",
            beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
            restore_best: bool = True) -> MlpModel:
    """Minibatch Adam on mean squared error in [0, 1]-scaled units.

    A ``val_fraction`` of the rows is held out; with ``restore_best`` the
    returned weights are those of the epoch with the lowest validation loss.
    """
    X, Y = _as_2d(X), _as_2d(Y)
    xs, ys = Scaler.fit(X), Scaler.fit(Y)
    Xs, Ys = xs.transform(X), ys.transform(Y)
    rng = np.random.default_rng(seed)
    n = len(Xs)
    perm = rng.permutation(n)
    n_val = int(round(val_fraction * n)) if n > 10 else 0
    val_idx, tr_idx = perm[:n_val], perm[n_val:]
    sizes = [X.shape[1], *hidden, Y.shape[1]]
    W, b = init_mlp(sizes, rng)
    mW = [np.zeros_like(w) for w in W]
    vW = [np.zeros_like(w) for w in W]
    mb = [np.zeros_like(v) for v in b]
    vb = [np.zeros_like(v) for v in b]
    step = 0
    train_curve, val_curve = [], []
    best_val, best = np.inf, None
    for epoch in range(epochs):
        order = rng.permutation(tr_idx)
        tot = 0.0
        for s in range(0, len(order), batch_size):
            bi = order[s:s + batch_size]
            loss, gW, gb = mlp_loss_grad(W, b, Xs[bi], Ys[bi], output_activation)
            if not np.isfinite(loss):
                raise FloatingPointError(f"MLP training diverged (loss {loss}); try a lower learning rate")
            tot += loss * len(bi)
            step += 1
            c1 = 1.0 - beta1 ** step
            c2 = 1.0 - beta2 ** step
            for params, grads, m, v in ((W, gW, mW, vW), (b, gb, mb, vb)):
                for i in range(len(params)):
                    m[i] = beta1 * m[i] + (1 - beta1) * grads[i]
                    v[i] = beta2 * v[i] + (1 - beta2) * grads[i] ** 2
                    params[i] = params[i] - lr * (m[i] / c1) / (np.sqrt(v[i] / c2) + eps)
        train_curve.append(tot / len(order))
        if n_val:
            val_curve.append(float(np.mean((mlp_forward(W, b, Xs[val_idx], output_activation)[0][-1]
                                            - Ys[val_idx]) ** 2)))
            if restore_best and val_curve[-1] < best_val:
                best_val, best = val_curve[-1], ([w.copy() for w in W], [v.copy() for v in b], epoch)
    best_epoch = epochs - 1
    if best is not None:
        W, b, best_epoch = best
    model = MlpModel(W, b, xs, ys, output_activation)
    model.history = {"train_loss": train_curve, "val_loss": val_curve, "best_epoch": best_epoch}
    return model


def predict_mlp(model: MlpModel, X) -> np.ndarray:
    return model.predict(X)


_KINDS = {"poly": PolyModel, "gp": GpModel, "mlp": MlpModel}


def fit_model(kind: str, X, Y, **kwargs) -> Model:
    if kind == "poly":
        return fit_poly(X, Y, **kwargs)
    if kind == "gp":
        return fit_gp(X, Y, **kwargs)
    if kind == "mlp":
        return fit_mlp(X, Y, **kwargs)
    raise ValueError(f"unknown model kind {kind!r}")
