"""Cross-fitted doubly robust meta-learner for functional CATE.

Stage 1 fits the outcome regressions and the propensity score out of fold,
stage 2 builds AIPW pseudo-outcome curves for every subject, and stage 3
regresses the pseudo-outcome difference on the covariates within each fold.
The fold-specific regressions are averaged into ``theta_hat(x)``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .errors import DataError
from .funcdata import Curve, CurveSet, Grid
from .learners import (
    IDENTITY,
    CovModel,
    FeatureMap,
    FosModel,
    MlpConfig,
    PropensityModel,
    fit_cov_knn,
    fit_fos_mlp,
    fit_fos_ridge,
    fit_propensity,
    fos_from_dict,
)
from .rng import STREAM_BANDS, STREAM_FOLDS, stream

DUMP_VERSION = 1


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    A: np.ndarray
    Y: CurveSet

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.X, dtype=float))
        A = np.asarray(self.A).ravel()
        if X.shape[0] != A.size or A.size != len(self.Y):
            raise DataError(f"inconsistent sizes: X {X.shape[0]}, A {A.size}, Y {len(self.Y)}")
        if not np.all(np.isin(A, (0, 1))):
            raise DataError("treatment must be binary (0/1)")
        if A.min() == A.max():
            raise DataError("both treatment arms required")
        if not np.all(np.isfinite(X)) or not np.all(np.isfinite(self.Y.values)):
            raise DataError("covariates and curves must be finite")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "A", A.astype(int))

    @property
    def n(self) -> int:
        return self.A.size

    @property
    def grid(self) -> Grid:
        return self.Y.grid


# ---------------------------------------------------------------------------
# Cross-fitting


@dataclass(frozen=True)
class CrossFitPlan:
    J: int
    assignment: np.ndarray
    rng_seed: int

    def fold(self, j: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == j)

    def complement(self, j: int) -> np.ndarray:
        return np.flatnonzero(self.assignment != j)

    def sizes(self) -> list[int]:
        return np.bincount(self.assignment, minlength=self.J).tolist()

    def to_dict(self) -> dict:
        return {"J": self.J, "assignment": self.assignment.tolist(), "rng_seed": self.rng_seed}

    @classmethod
    def from_dict(cls, d: dict) -> "CrossFitPlan":
        return cls(int(d["J"]), np.asarray(d["assignment"], dtype=int), int(d["rng_seed"]))


def make_plan(n: int, J: int, rng_seed: int) -> CrossFitPlan:
    """Random balanced partition of ``range(n)`` into ``J`` folds.

    When ``J`` does not divide ``n`` the remainder is spread so fold sizes
    differ by at most one.
    """
    if J < 1:
        raise ValueError("J must be positive")
    if J > n:
        raise ValueError(f"cannot split {n} observations into {J} folds")
    perm = stream(rng_seed, STREAM_FOLDS).permutation(n)
    assignment = np.empty(n, dtype=int)
    assignment[perm] = np.arange(n) % J
    assignment.setflags(write=False)
    return CrossFitPlan(J, assignment, rng_seed)


# ---------------------------------------------------------------------------
# Learner specifications


@dataclass(frozen=True)
class LearnerSpec:
    """Which function-on-scalar regressor to fit and how."""

    kind: str = "ridge"
    lam: float = 1e-8
    mlp: MlpConfig = field(default_factory=MlpConfig)
    features: FeatureMap = IDENTITY

    def __post_init__(self):
        if self.kind not in ("ridge", "mlp"):
            raise ValueError(f"unknown learner kind {self.kind!r}")

    def fit(self, X, Y: CurveSet, seed: int = 0) -> FosModel:
        if self.kind == "ridge":
            return fit_fos_ridge(X, Y, self.lam, self.features)
        return fit_fos_mlp(X, Y, self.mlp, seed, self.features)


@dataclass(frozen=True)
class PropensitySpec:
    lam: float = 0.0
    clip: float = 0.01
    features: FeatureMap = IDENTITY

    def fit(self, X, A) -> PropensityModel:
        return fit_propensity(X, A, self.lam, self.clip, self.features)


@dataclass(frozen=True)
class FocalSpec:
    mu: LearnerSpec = field(default_factory=LearnerSpec)
    pi: PropensitySpec = field(default_factory=PropensitySpec)
    final: LearnerSpec = field(default_factory=LearnerSpec)
    cov_k: int | None = None  # None: max(50, n // 10)
    seed: int = 0  # MLP initialisation

    def to_dict(self) -> dict:
        def learner(s: LearnerSpec):
            return {"kind": s.kind, "lam": s.lam, "features": s.features.kind,
                    "mlp": {**s.mlp.__dict__, "hidden": list(s.mlp.hidden)}}

        return {"mu": learner(self.mu), "final": learner(self.final),
                "pi": {"lam": self.pi.lam, "clip": self.pi.clip, "features": self.pi.features.kind},
                "cov_k": self.cov_k, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "FocalSpec":
        def learner(x):
            mlp = dict(x.get("mlp", {}))
            if "hidden" in mlp:
                mlp["hidden"] = tuple(mlp["hidden"])
            return LearnerSpec(x.get("kind", "ridge"), x.get("lam", 1e-8), MlpConfig(**mlp),
                               FeatureMap(x.get("features", "identity")))

        pi = d.get("pi", {})
        return cls(learner(d.get("mu", {})),
                   PropensitySpec(pi.get("lam", 0.0), pi.get("clip", 0.01), FeatureMap(pi.get("features", "identity"))),
                   learner(d.get("final", {})), d.get("cov_k"), d.get("seed", 0))


# ---------------------------------------------------------------------------
# Stage 1 and 2


@dataclass(frozen=True)
class FoldNuisance:
    mu0: FosModel
    mu1: FosModel
    pi: PropensityModel
    train_idx: np.ndarray


@dataclass(frozen=True)
class NuisanceFit:
    folds: tuple[FoldNuisance, ...]

    def predict(self, j: int, X):
        """(pi, mu0, mu1) from the models trained without fold ``j``."""
        f = self.folds[j]
        return f.pi.predict(X), f.mu0.predict_values(X), f.mu1.predict_values(X)


def _annotate(exc: Exception, j: int) -> Exception:
    try:
        new = type(exc)(f"fold {j}: {exc}")
    except Exception:
        return exc
    return new


def fit_nuisances(d: Dataset, spec: FocalSpec, plan: CrossFitPlan) -> NuisanceFit:
    if plan.assignment.size != d.n:
        raise ValueError("plan and dataset sizes differ")
    folds = []
    for j in range(plan.J):
        train = plan.complement(j) if plan.J > 1 else plan.fold(j)
        X, A = d.X[train], d.A[train]
        Y = d.Y.subset(train)
        try:
            if A.min() == A.max():
                raise DataError("training folds need both treatment arms")
            mu0 = spec.mu.fit(X[A == 0], Y.subset(A == 0), spec.seed + 2 * j)
            mu1 = spec.mu.fit(X[A == 1], Y.subset(A == 1), spec.seed + 2 * j + 1)
            pi = spec.pi.fit(X, A)
        except Exception as exc:
            raise _annotate(exc, j) from exc
        train = train.copy()
        train.setflags(write=False)
        folds.append(FoldNuisance(mu0, mu1, pi, train))
    return NuisanceFit(tuple(folds))


@dataclass(frozen=True)
class PseudoOutcomes:
    gamma1: CurveSet
    gamma0: CurveSet
    pi_hat: np.ndarray
    mu0_hat: np.ndarray
    mu1_hat: np.ndarray

    @property
    def diff(self) -> CurveSet:
        return CurveSet(self.gamma1.grid, self.gamma1.values - self.gamma0.values)


def aipw_pseudo_outcomes(Y, A, pi, mu0, mu1) -> tuple[np.ndarray, np.ndarray]:
    """AIPW pseudo-outcome curves for both arms.

    ``Y``, ``mu0``, ``mu1`` are (n, T); ``A`` and ``pi`` are length n.
    """
    Y = np.asarray(Y, dtype=float)
    A = np.asarray(A, dtype=float)[:, None]
    pi = np.asarray(pi, dtype=float)[:, None]
    g1 = mu1 + A / pi * (Y - mu1)
    g0 = mu0 + (1 - A) / (1 - pi) * (Y - mu0)
    return g1, g0


def pseudo_outcomes(d: Dataset, nf: NuisanceFit, plan: CrossFitPlan) -> PseudoOutcomes:
    n, T = d.n, len(d.grid)
    pi_hat = np.empty(n)
    mu0_hat = np.empty((n, T))
    mu1_hat = np.empty((n, T))
    for j in range(plan.J):
        idx = plan.fold(j)
        if plan.J > 1 and np.intersect1d(idx, nf.folds[j].train_idx).size:
            raise AssertionError(f"fold {j} nuisances were trained on evaluation subjects")
        pi_hat[idx], mu0_hat[idx], mu1_hat[idx] = nf.predict(j, d.X[idx])
    g1, g0 = aipw_pseudo_outcomes(d.Y.values, d.A, pi_hat, mu0_hat, mu1_hat)
    return PseudoOutcomes(CurveSet(d.grid, g1), CurveSet(d.grid, g0), pi_hat, mu0_hat, mu1_hat)


# ---------------------------------------------------------------------------
# Stage 3


@dataclass(frozen=True)
class FcateModel:
    final: tuple[FosModel, ...]
    cov: CovModel | None
    plan: CrossFitPlan
    spec: FocalSpec
    grid: Grid
    n_features: int
    nuisance: NuisanceFit | None = None
    pseudo: PseudoOutcomes | None = None

    @property
    def n(self) -> int:
        return self.plan.assignment.size

    def predict_values(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} covariates, got {X.shape[1]}")
        preds = np.stack([m.predict_values(X) for m in self.final])
        # elementwise sort first so the average does not depend on fold labels
        return np.sort(preds, axis=0).sum(axis=0) / len(self.final)

    def to_dict(self) -> dict:
        out = {
            "format": "focal-model", "version": DUMP_VERSION, "package_version": __version__,
            "grid": self.grid.points.tolist(), "n_features": self.n_features,
            "plan": self.plan.to_dict(), "spec": self.spec.to_dict(),
            "final": [m.to_dict() for m in self.final],
            "cov": self.cov.to_dict() if self.cov is not None else None,
        }
        if self.nuisance is not None:
            out["nuisance"] = [{"mu0": f.mu0.to_dict(), "mu1": f.mu1.to_dict(), "pi": f.pi.to_dict()}
                               for f in self.nuisance.folds]
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "FcateModel":
        if d.get("format") != "focal-model":
            raise DataError("not a focal model dump")
        if d.get("version") != DUMP_VERSION:
            raise DataError(f"unsupported model dump version {d.get('version')}")
        plan = CrossFitPlan.from_dict(d["plan"])
        nuis = None
        if d.get("nuisance"):
            nuis = NuisanceFit(tuple(
                FoldNuisance(fos_from_dict(f["mu0"]), fos_from_dict(f["mu1"]),
                             PropensityModel.from_dict(f["pi"]), plan.complement(j))
                for j, f in enumerate(d["nuisance"])))
        return cls(tuple(fos_from_dict(m) for m in d["final"]),
                   CovModel.from_dict(d["cov"]) if d.get("cov") else None,
                   plan, FocalSpec.from_dict(d["spec"]), Grid(d["grid"]), int(d["n_features"]), nuis)


def fit_fcate(d: Dataset, spec: FocalSpec = FocalSpec(), plan: CrossFitPlan | None = None,
              rng_seed: int = 0, J: int = 5, with_cov: bool = True) -> FcateModel:
    """Fit the three stages and the covariance model used for bands."""
    plan = plan or make_plan(d.n, J, rng_seed)
    nf = fit_nuisances(d, spec, plan)
    po = pseudo_outcomes(d, nf, plan)
    diff = po.diff
    final = []
    for j in range(plan.J):
        idx = plan.fold(j)
        try:
            final.append(spec.final.fit(d.X[idx], diff.subset(idx), spec.seed + 1000 + j))
        except Exception as exc:
            raise _annotate(exc, j) from exc
    model = FcateModel(tuple(final), None, plan, spec, d.grid, d.X.shape[1], nf, po)
    cov = None
    if with_cov:
        theta_at_X = CurveSet(d.grid, model.predict_values(d.X))
        cov = fit_cov_knn(d.X, diff, theta_at_X, spec.cov_k)
    return FcateModel(tuple(final), cov, plan, spec, d.grid, d.X.shape[1], nf, po)


def predict_theta(m: FcateModel, x) -> Curve | CurveSet:
    """Cross-fitted F-CATE: the average of the fold-specific regressions."""
    vals = m.predict_values(x)
    if np.ndim(x) == 1:
        return Curve(m.grid, vals[0])
    return CurveSet(m.grid, vals)


def fate(p: PseudoOutcomes | CurveSet, trim_fraction: float = 0.0) -> Curve:
    """Mean pseudo-outcome difference after dropping the largest-norm curves."""
    if not 0 <= trim_fraction < 0.5:
        raise ValueError("trim_fraction must lie in [0, 0.5)")
    diff = p.diff if isinstance(p, PseudoOutcomes) else p
    n = len(diff)
    drop = math.ceil(trim_fraction * n - 1e-9)
    if drop == 0:
        return Curve(diff.grid, diff.values.mean(axis=0))
    keep = np.argsort(diff.norms(), kind="stable")[: n - drop]
    return Curve(diff.grid, diff.values[np.sort(keep)].mean(axis=0))


# ---------------------------------------------------------------------------
# Bands


@dataclass(frozen=True)
class ConfidenceBand:
    center: Curve
    lower: Curve
    upper: Curve
    level: float
    mode: str
    B: int
    n_eff: float

    def contains(self, values, atol: float = 0.0) -> np.ndarray:
        v = np.asarray(values, dtype=float)
        return (v >= self.lower.values - atol) & (v <= self.upper.values + atol)

    @property
    def width(self) -> np.ndarray:
        return self.upper.values - self.lower.values


def gaussian_band(center: Curve, sigma: np.ndarray, n_eff: float, alpha: float = 0.05, B: int = 2000,
                  mode: str = "simultaneous", rng_seed: int = 0) -> ConfidenceBand:
    """Parametric bootstrap band around ``center`` for covariance ``sigma / n_eff``.

    ``pointwise`` takes per-grid-point quantiles of the simulated curves.
    ``simultaneous`` scales the pointwise standard deviation by the (1 - alpha)
    quantile of the studentized sup-statistic; it is never narrower than the
    pointwise band built from the same draws.
    """
    if mode not in ("pointwise", "simultaneous"):
        raise ValueError(f"unknown band mode {mode!r}")
    if B < 200:
        raise ValueError("need at least 200 bootstrap draws")
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    if n_eff <= 0:
        raise ValueError("n_eff must be positive")
    S = np.asarray(sigma, dtype=float)
    T = len(center.grid)
    if S.shape != (T, T):
        raise ValueError(f"covariance shape {S.shape} does not match grid of {T}")
    vals, vecs = np.linalg.eigh((S + S.T) / 2)
    L = vecs * np.sqrt(np.clip(vals, 0, None))
    Z = stream(rng_seed, STREAM_BANDS).standard_normal((B, T)) @ L.T
    scale = 1.0 / math.sqrt(n_eff)
    c = center.values
    lo_pw = np.minimum(c + scale * np.quantile(Z, alpha / 2, axis=0), c)
    hi_pw = np.maximum(c + scale * np.quantile(Z, 1 - alpha / 2, axis=0), c)
    if mode == "pointwise":
        lo, hi = lo_pw, hi_pw
    else:
        sd = np.sqrt(np.clip(np.diag(S), 0, None))
        active = sd > 1e-12 * max(sd.max(), 1e-300)
        if not active.all():
            warnings.warn(f"{int((~active).sum())} grid points with zero variance excluded from the sup",
                          RuntimeWarning, stacklevel=2)
        half = np.zeros(T)
        if active.any():
            sup = np.max(np.abs(Z[:, active]) / sd[active], axis=1)
            q = float(np.quantile(sup, 1 - alpha))
            half[active] = q * sd[active] * scale
        lo, hi = np.minimum(c - half, lo_pw), np.maximum(c + half, hi_pw)
    g = center.grid
    return ConfidenceBand(center, Curve(g, lo), Curve(g, hi), 1 - alpha, mode, B, float(n_eff))


def default_n_eff(m: FcateModel) -> float:
    """Third-stage observations per fold."""
    return m.n / m.plan.J


def confidence_band(m: FcateModel, x, alpha: float = 0.05, B: int = 2000, mode: str = "simultaneous",
                    rng_seed: int = 0, n_eff: float | None = None) -> ConfidenceBand:
    if m.cov is None:
        raise ValueError("model was fitted without a covariance estimator")
    x = np.asarray(x, dtype=float).ravel()
    if x.size != m.n_features:
        raise ValueError(f"expected {m.n_features} covariates, got {x.size}")
    center = Curve(m.grid, m.predict_values(x)[0])
    return gaussian_band(center, m.cov.sigma(x), n_eff or default_n_eff(m), alpha, B, mode, rng_seed)


def fate_band(p: PseudoOutcomes, trim_fraction: float = 0.0, alpha: float = 0.05, B: int = 2000,
              mode: str = "simultaneous", rng_seed: int = 0) -> ConfidenceBand:
    """Band for the FATE from the empirical covariance of the retained difference curves."""
    diff = p.diff
    n = len(diff)
    drop = math.ceil(trim_fraction * n - 1e-9)
    keep = np.sort(np.argsort(diff.norms(), kind="stable")[: n - drop])
    V = diff.values[keep]
    center = Curve(diff.grid, V.mean(axis=0))
    S = np.cov(V, rowvar=False, bias=False) if keep.size > 1 else np.zeros((V.shape[1],) * 2)
    return gaussian_band(center, np.atleast_2d(S), keep.size, alpha, B, mode, rng_seed)


# ---------------------------------------------------------------------------
# Bias diagnostic


def dr_bias_diagnostic(pi_hat, pi_true, mu1_hat, mu1_true, mu0_hat, mu0_true) -> np.ndarray:
    """Product-form conditional bias of the pseudo-outcome difference.

    Scalars/arrays for the propensities (length n or scalar), curves (n, T) or
    (T,) for the regressions. Zero whenever either nuisance is exact.
    """
    pi_hat = np.asarray(pi_hat, dtype=float)
    dpi = pi_hat - np.asarray(pi_true, dtype=float)
    d1 = np.asarray(mu1_hat, dtype=float) - np.asarray(mu1_true, dtype=float)
    d0 = np.asarray(mu0_hat, dtype=float) - np.asarray(mu0_true, dtype=float)
    if d1.ndim == 2:
        dpi, pi_hat = dpi[:, None], pi_hat[:, None]
    return dpi * d1 / pi_hat + dpi * d0 / (1 - pi_hat)


def model_bias(m: FcateModel, X, pi_true, mu0_true, mu1_true) -> np.ndarray:
    """Fold-averaged bias curves at rows of ``X`` given the true nuisances there."""
    if m.nuisance is None:
        raise ValueError("model carries no nuisance fits")
    X = np.atleast_2d(X)
    out = np.zeros_like(np.asarray(mu0_true, dtype=float))
    for j in range(m.plan.J):
        pi, mu0, mu1 = m.nuisance.predict(j, X)
        out += dr_bias_diagnostic(pi, pi_true, mu1, mu1_true, mu0, mu0_true)
    return out / m.plan.J


# ---------------------------------------------------------------------------
# Conditioning surfaces


def surface_points(X, column: int, n_points: int = 50) -> np.ndarray:
    """Rows varying ``column`` over its 1st-99th percentile range, others at mean/mode.

    Binary or otherwise discrete-valued columns (at most two levels) are held at
    their mode and the varied column takes only its observed levels.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    base = np.empty(X.shape[1])
    for k in range(X.shape[1]):
        levels, counts = np.unique(X[:, k], return_counts=True)
        base[k] = levels[np.argmax(counts)] if levels.size <= 2 else X[:, k].mean()
    col_levels = np.unique(X[:, column])
    if col_levels.size <= 2:
        values = col_levels
    else:
        lo, hi = np.percentile(X[:, column], [1, 99])
        values = np.linspace(lo, hi, n_points)
    rows = np.tile(base, (values.size, 1))
    rows[:, column] = values
    return rows


def theta_surface(m: FcateModel, X, column: int, n_points: int = 50) -> tuple[np.ndarray, np.ndarray]:
    rows = surface_points(X, column, n_points)
    return rows[:, column], m.predict_values(rows)


__all__ = [
    "ConfidenceBand", "CrossFitPlan", "Dataset", "FcateModel", "FocalSpec", "LearnerSpec", "NuisanceFit",
    "PropensitySpec", "PseudoOutcomes", "aipw_pseudo_outcomes", "confidence_band", "dr_bias_diagnostic",
    "fate", "fate_band", "fit_fcate", "fit_nuisances", "gaussian_band", "make_plan", "model_bias",
    "predict_theta", "pseudo_outcomes", "surface_points", "theta_surface",
]
