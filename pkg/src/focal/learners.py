"""Nuisance and final-stage learners.

* :func:`fit_propensity` -- ridge logistic regression solved by IRLS.
* :func:`fit_fos_ridge` -- pointwise ridge function-on-scalar regression.
* :func:`fit_fos_mlp` -- small multi-output ReLU network, full-batch training.
* :func:`fit_cov_knn` -- k-nearest-neighbour conditional covariance of curves.

Every learner sees covariates through a :class:`FeatureMap`, which is how the
misspecified simulation scenarios are injected.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.spatial import cKDTree
from scipy.special import expit

from .errors import NumericalError
from .funcdata import CurveSet, Grid
from .rng import STREAM_MLP, stream

log = logging.getLogger(__name__)

def _c_frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=float, order="C")
    arr.setflags(write=False)
    return arr


# ---------------------------------------------------------------------------
# Feature maps


def z_transform(X) -> np.ndarray:
    """Nonlinear distortion of the four simulation covariates."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != 4:
        raise ValueError(f"z_transform needs an n x 4 matrix, got shape {X.shape}")
    x1, x2, x3, x4 = X.T
    return np.column_stack([
        np.exp(x1 / 2),
        x2 / (1 + np.exp(x1)) + 10,
        (x1 * x3 / 25 + 0.6) ** 3,
        (x2 + x4 + 20) ** 2,
    ])


@dataclass(frozen=True)
class FeatureMap:
    kind: str = "identity"

    def __post_init__(self):
        if self.kind not in ("identity", "z"):
            raise ValueError(f"unknown feature map {self.kind!r}")

    def __call__(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return X if self.kind == "identity" else z_transform(X)


IDENTITY = FeatureMap("identity")
MISSPECIFIED = FeatureMap("z")

# ---------------------------------------------------------------------------
# Propensity


@dataclass(frozen=True)
class PropensityModel:
    weights: np.ndarray  # intercept first
    clip: float = 0.01
    lam: float = 0.0
    features: FeatureMap = IDENTITY
    n_iter: int = 0

    def predict(self, X) -> np.ndarray:
        F = self.features(X)
        eta = self.weights[0] + F @ self.weights[1:]
        return np.clip(expit(eta), self.clip, 1 - self.clip)

    def to_dict(self) -> dict:
        return {"kind": "logistic", "weights": self.weights.tolist(), "clip": self.clip,
                "lam": self.lam, "features": self.features.kind}

    @classmethod
    def from_dict(cls, d: dict) -> "PropensityModel":
        return cls(np.asarray(d["weights"], dtype=float), d["clip"], d["lam"], FeatureMap(d["features"]))


def _logistic_loss(w, D, a, lam):
    eta = D @ w
    # mean negative log-likelihood, numerically stable
    nll = np.mean(np.logaddexp(0.0, eta) - a * eta)
    return nll + 0.5 * lam * float(w[1:] @ w[1:])


def fit_propensity(X, A, lam: float = 0.0, clip: float = 0.01, features: FeatureMap = IDENTITY,
                   tol: float = 1e-8, max_iter: int = 100) -> PropensityModel:
    """Ridge-penalized logistic regression by IRLS (damped Newton).

    Minimizes mean negative log-likelihood plus ``lam/2 * ||w[1:]||^2``; the
    intercept is not penalized. Stops when the gradient norm is at most ``tol``.
    """
    if not 0 < clip < 0.5:
        raise ValueError("clip must lie in (0, 0.5)")
    if lam < 0:
        raise ValueError("lam must be non-negative")
    F = features(X)
    a = np.asarray(A, dtype=float).ravel()
    n, p = F.shape
    if a.size != n:
        raise ValueError("X and A disagree on the number of rows")
    if not (np.any(a == 1) and np.any(a == 0)):
        raise ValueError("both classes must be present")
    if n <= p:
        raise ValueError(f"need n > p, got n={n}, p={p}")

    D = np.column_stack([np.ones(n), F])
    pen = np.full(p + 1, lam)
    pen[0] = 0.0
    abar = a.mean()
    w = np.zeros(p + 1)
    w[0] = np.log(abar / (1 - abar))
    loss = _logistic_loss(w, D, a, lam)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        mu = expit(D @ w)
        grad = D.T @ (mu - a) / n + pen * w
        if np.linalg.norm(grad) <= tol:
            converged = True
            break
        s = mu * (1 - mu)
        H = (D.T * s) @ D / n + np.diag(pen)
        try:
            step = linalg.solve(H, grad, assume_a="pos")
        except (linalg.LinAlgError, ValueError):
            step = np.linalg.lstsq(H, grad, rcond=None)[0]
        t = 1.0
        while True:
            w_new = w - t * step
            new_loss = _logistic_loss(w_new, D, a, lam)
            if new_loss <= loss + 1e-4 * t * float(grad @ -step) or t < 1e-10:
                break
            t /= 2
        w, loss = w_new, new_loss
    else:
        mu = expit(D @ w)
        grad = D.T @ (mu - a) / n + pen * w
        converged = np.linalg.norm(grad) <= tol

    separated = lam == 0 and np.all((2 * a - 1) * (D @ w) > 0)
    if separated or not converged:
        hint = " (classes look perfectly separated)" if separated else ""
        raise NumericalError(
            f"logistic IRLS did not converge after {it} iterations{hint}; use a ridge penalty lam > 0"
        )
    w.setflags(write=False)
    return PropensityModel(w, clip, lam, features, it)


# ---------------------------------------------------------------------------
# Function-on-scalar regression


class FosModel:
    """Covariate row(s) -> curve(s) on the training grid."""

    kind: str = "abstract"
    grid: Grid
    features: FeatureMap

    def predict_values(self, X) -> np.ndarray:
        raise NotImplementedError

    def predict(self, X) -> CurveSet:
        return CurveSet(self.grid, self.predict_values(X))

    def to_dict(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class RidgeFos(FosModel):
    grid: Grid
    intercept: np.ndarray  # (T,)
    coef: np.ndarray  # (p, T)
    lam: float
    features: FeatureMap = IDENTITY
    kind: str = field(default="ridge", init=False)

    def __post_init__(self):
        # fixed memory layout keeps predictions bit-identical after a JSON round trip
        object.__setattr__(self, "coef", _c_frozen(self.coef))
        object.__setattr__(self, "intercept", _c_frozen(self.intercept))

    def predict_values(self, X) -> np.ndarray:
        F = self.features(X)
        if F.shape[1] != self.coef.shape[0]:
            raise ValueError(f"expected {self.coef.shape[0]} features, got {F.shape[1]}")
        return self.intercept + F @ self.coef

    def to_dict(self) -> dict:
        return {"kind": "ridge", "grid": self.grid.points.tolist(), "intercept": self.intercept.tolist(),
                "coef": self.coef.tolist(), "lam": self.lam, "features": self.features.kind}

    @classmethod
    def from_dict(cls, d: dict) -> "RidgeFos":
        coef = np.asarray(d["coef"], dtype=float).reshape(-1, len(d["grid"]))
        return cls(Grid(d["grid"]), np.asarray(d["intercept"], dtype=float), coef, d["lam"],
                   FeatureMap(d["features"]))


def fit_fos_ridge(X, Y: CurveSet, lam: float = 0.0, features: FeatureMap = IDENTITY) -> RidgeFos:
    """Pointwise ridge regression of every grid value on the features.

    Minimizes ``mean ||Y_i - b0 - F_i b||^2 + lam * ||b||^2`` independently per
    grid point. Columns are centred so the intercept is unpenalized; all T
    problems share one Cholesky factorization.
    """
    if lam < 0:
        raise ValueError("lam must be non-negative")
    F = features(X)
    Yv = Y.values
    n, p = F.shape
    if Yv.shape[0] != n:
        raise ValueError("X and Y disagree on the number of rows")
    fbar = F.mean(axis=0)
    ybar = Yv.mean(axis=0)
    Fc = F - fbar
    G = Fc.T @ Fc / n + lam * np.eye(p)
    if lam == 0 and (n <= p or np.linalg.matrix_rank(Fc) < p):
        raise NumericalError("rank-deficient design; use lam > 0")
    try:
        cf = linalg.cho_factor(G, lower=True)
    except linalg.LinAlgError as exc:
        raise NumericalError("ridge normal equations are singular; use lam > 0") from exc
    coef = linalg.cho_solve(cf, Fc.T @ (Yv - ybar) / n)
    intercept = ybar - fbar @ coef
    coef.setflags(write=False)
    intercept.setflags(write=False)
    return RidgeFos(Y.grid, intercept, coef, float(lam), features)


@dataclass(frozen=True)
class MlpConfig:
    hidden: tuple[int, ...] = (10, 10)
    activation: str = "relu"
    alpha: float = 1e-3  # ridge penalty on weights
    max_iter: int = 2000
    learning_rate: float = 1e-2
    schedule: str = "adaptive"
    batch_size: int | None = None  # None = full batch
    tol: float = 1e-10
    init: str = "he"  # or "zeros"

    def __post_init__(self):
        if self.activation != "relu":
            raise ValueError("only relu activation is supported")
        if self.schedule != "adaptive":
            raise ValueError("only the adaptive schedule is supported")
        if any(h < 1 for h in self.hidden) or self.max_iter < 1 or self.alpha < 0:
            raise ValueError("invalid MLP configuration")
        if self.init not in ("he", "zeros"):
            raise ValueError(f"unknown init {self.init!r}")


def _mlp_forward(params, X):
    acts = [X]
    h = X
    nl = len(params) // 2
    for layer in range(nl):
        W, b = params[2 * layer], params[2 * layer + 1]
        z = h @ W + b
        h = z if layer == nl - 1 else np.maximum(z, 0.0)
        acts.append(h)
    return acts


def mlp_loss_grad(params: list[np.ndarray], X: np.ndarray, Y: np.ndarray, alpha: float):
    """Loss ``mean_i,t (out - Y)^2 / 2 + alpha / (2n) * sum ||W||^2`` and its gradient."""
    n = X.shape[0]
    acts = _mlp_forward(params, X)
    out = acts[-1]
    resid = out - Y
    weights = params[0::2]
    loss = 0.5 * np.mean(resid**2) + alpha / (2 * n) * sum(float(np.sum(W * W)) for W in weights)
    grads = [None] * len(params)
    delta = resid / resid.size
    nl = len(params) // 2
    for layer in reversed(range(nl)):
        W = params[2 * layer]
        h_in = acts[layer]
        grads[2 * layer] = h_in.T @ delta + alpha / n * W
        grads[2 * layer + 1] = delta.sum(axis=0)
        if layer:
            delta = (delta @ W.T) * (acts[layer] > 0)
    return loss, grads


@dataclass(frozen=True)
class MlpFos(FosModel):
    grid: Grid
    params: tuple[np.ndarray, ...]
    x_mean: np.ndarray
    x_scale: np.ndarray
    y_mean: np.ndarray
    y_scale: float
    config: MlpConfig
    features: FeatureMap = IDENTITY
    loss_history: tuple[float, ...] = ()
    kind: str = field(default="mlp", init=False)

    def __post_init__(self):
        object.__setattr__(self, "params", tuple(_c_frozen(p) for p in self.params))

    def predict_values(self, X) -> np.ndarray:
        F = self.features(X)
        if F.shape[1] != self.x_mean.size:
            raise ValueError(f"expected {self.x_mean.size} features, got {F.shape[1]}")
        out = _mlp_forward(list(self.params), (F - self.x_mean) / self.x_scale)[-1]
        return self.y_mean + self.y_scale * out

    def to_dict(self) -> dict:
        cfg = self.config
        return {
            "kind": "mlp", "grid": self.grid.points.tolist(),
            "params": [p.tolist() for p in self.params],
            "x_mean": self.x_mean.tolist(), "x_scale": self.x_scale.tolist(),
            "y_mean": self.y_mean.tolist(), "y_scale": self.y_scale,
            "config": {"hidden": list(cfg.hidden), "activation": cfg.activation, "alpha": cfg.alpha,
                       "max_iter": cfg.max_iter, "learning_rate": cfg.learning_rate,
                       "schedule": cfg.schedule, "batch_size": cfg.batch_size, "tol": cfg.tol,
                       "init": cfg.init},
            "features": self.features.kind,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpFos":
        cfg = dict(d["config"])
        cfg["hidden"] = tuple(cfg["hidden"])
        params = tuple(np.atleast_1d(np.asarray(p, dtype=float)) for p in d["params"])
        widths = [len(d["x_mean"]), *cfg["hidden"], len(d["grid"])]
        params = tuple(p.reshape(widths[i // 2], widths[i // 2 + 1]) if i % 2 == 0 else p
                       for i, p in enumerate(params))
        return cls(Grid(d["grid"]), params, np.asarray(d["x_mean"], dtype=float),
                   np.asarray(d["x_scale"], dtype=float), np.asarray(d["y_mean"], dtype=float),
                   float(d["y_scale"]), MlpConfig(**cfg), FeatureMap(d["features"]))


def init_mlp_params(widths: list[int], rng: np.random.Generator, init: str = "he") -> list[np.ndarray]:
    params = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        if init == "zeros":
            W = np.zeros((fan_in, fan_out))
        else:
            W = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
        params += [W, np.zeros(fan_out)]
    return params


def fit_fos_mlp(X, Y: CurveSet, cfg: MlpConfig = MlpConfig(), rng_seed: int = 0,
                features: FeatureMap = IDENTITY) -> MlpFos:
    """Train a ReLU network with T outputs on standardized inputs and targets.

    Full-batch gradient descent with an accept/reject step size: a step that
    raises the loss is discarded and the rate halved, an accepted step grows
    the rate by 5%. The recorded training loss is therefore non-increasing.
    """
    F = features(X)
    n = F.shape[0]
    if n < 10:
        raise ValueError("fit_fos_mlp needs at least 10 samples")
    Yv = Y.values
    x_mean, x_scale = F.mean(axis=0), F.std(axis=0)
    x_scale = np.where(x_scale > 0, x_scale, 1.0)
    y_mean = Yv.mean(axis=0)
    y_scale = float(np.std(Yv - y_mean)) or 1.0
    Xs = (F - x_mean) / x_scale
    Ys = (Yv - y_mean) / y_scale

    rng = stream(rng_seed, STREAM_MLP)
    widths = [F.shape[1], *cfg.hidden, Yv.shape[1]]
    params = init_mlp_params(widths, rng, cfg.init)

    def batch():
        if cfg.batch_size is None or cfg.batch_size >= n:
            return Xs, Ys
        idx = rng.choice(n, size=cfg.batch_size, replace=False)
        return Xs[idx], Ys[idx]

    lr = cfg.learning_rate
    loss, grads = mlp_loss_grad(params, Xs, Ys, cfg.alpha)
    initial = loss
    history = [loss]
    for _ in range(cfg.max_iter):
        xb, yb = batch()
        if xb is not Xs:
            _, grads = mlp_loss_grad(params, xb, yb, cfg.alpha)
        trial = [p - lr * g for p, g in zip(params, grads)]
        new_loss, new_grads = mlp_loss_grad(trial, Xs, Ys, cfg.alpha)
        if not np.isfinite(new_loss) or new_loss > 1e6 * max(initial, 1e-300):
            if lr < 1e-12:
                raise NumericalError("MLP training diverged")
            lr /= 2
            continue
        if new_loss <= loss:
            improvement = loss - new_loss
            params, loss, grads = trial, new_loss, new_grads
            lr *= 1.05
            history.append(loss)
            if improvement <= cfg.tol * max(loss, 1e-300):
                break
        else:
            lr /= 2
            if lr < 1e-12:
                break
    if not np.isfinite(loss) or loss > 1e6 * max(initial, 1e-300):
        raise NumericalError("MLP training diverged")
    frozen = []
    for p in params:
        p = np.array(p)
        p.setflags(write=False)
        frozen.append(p)
    return MlpFos(Y.grid, tuple(frozen), x_mean, x_scale, y_mean, y_scale, cfg, features, tuple(history))


def fos_from_dict(d: dict) -> FosModel:
    if d["kind"] == "ridge":
        return RidgeFos.from_dict(d)
    if d["kind"] == "mlp":
        return MlpFos.from_dict(d)
    raise ValueError(f"unknown learner kind {d['kind']!r}")


# ---------------------------------------------------------------------------
# Conditional covariance


@dataclass(frozen=True)
class CovModel:
    """k-NN estimate of ``Var[D | X = x]`` for curve-valued ``D``.

    Distances are Euclidean on covariates standardized by their training
    standard deviations.
    """

    k: int
    X: np.ndarray
    residuals: np.ndarray  # D_i - theta_hat(X_i), (n, T)
    scale: np.ndarray
    grid: Grid
    _tree: cKDTree = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self._tree is None:
            object.__setattr__(self, "_tree", cKDTree(self.X / self.scale))

    def neighbours(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float).ravel()
        if x.size != self.X.shape[1]:
            raise ValueError(f"expected {self.X.shape[1]} covariates, got {x.size}")
        _, idx = self._tree.query(x / self.scale, k=self.k)
        return np.sort(np.atleast_1d(idx))

    def sigma(self, x) -> np.ndarray:
        R = self.residuals[self.neighbours(x)]
        S = R.T @ R / R.shape[0]
        S = (S + S.T) / 2
        vals, vecs = np.linalg.eigh(S)
        if vals[0] < 0:
            S = (vecs * np.clip(vals, 0, None)) @ vecs.T
            S = (S + S.T) / 2
        return S

    def to_dict(self) -> dict:
        return {"kind": "knn", "k": self.k, "X": self.X.tolist(), "residuals": self.residuals.tolist(),
                "scale": self.scale.tolist(), "grid": self.grid.points.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "CovModel":
        return cls(int(d["k"]), np.asarray(d["X"], dtype=float), np.asarray(d["residuals"], dtype=float),
                   np.asarray(d["scale"], dtype=float), Grid(d["grid"]))


def default_k(n: int) -> int:
    return min(n, max(50, n // 10))


def fit_cov_knn(X, D: CurveSet, theta_at_X: CurveSet, k: int | None = None) -> CovModel:
    """Store residual curves ``D_i - theta_hat(X_i)`` for neighbourhood averaging."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n = X.shape[0]
    k = default_k(n) if k is None else int(k)
    if not 1 <= k <= n:
        raise ValueError(f"k={k} must lie in [1, n={n}]")
    if D.grid != theta_at_X.grid:
        raise ValueError("D and theta_at_X must share a grid")
    if len(D) != n or len(theta_at_X) != n:
        raise ValueError("X, D and theta_at_X disagree on the number of rows")
    scale = X.std(axis=0)
    scale = np.where(scale > 0, scale, 1.0)
    return CovModel(k, X.copy(), D.values - theta_at_X.values, scale, D.grid)
