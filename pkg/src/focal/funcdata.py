"""Grid-sampled functional data: curves, L2 norms, B-spline smoothing.

Curves live on a shared grid in [0, 1]. All L2 integrals use the trapezoidal
rule on the observation grid.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import linalg
from scipy.interpolate import BSpline

from .errors import DataError, NumericalError

DEFAULT_LAMBDAS = np.logspace(-8, 2, 50)


def _frozen(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Grid:
    points: np.ndarray

    def __post_init__(self):
        pts = _frozen(self.points).ravel()
        if pts.size < 2:
            raise ValueError("a grid needs at least 2 points")
        if not np.all(np.isfinite(pts)) or np.any(np.diff(pts) <= 0):
            raise ValueError("grid points must be finite and strictly increasing")
        if pts[0] < 0 or pts[-1] > 1:
            raise ValueError("grid must lie inside [0, 1]")
        object.__setattr__(self, "points", pts)

    @classmethod
    def uniform(cls, size: int) -> "Grid":
        return cls(np.linspace(0.0, 1.0, size))

    def __len__(self) -> int:
        return self.points.size

    def __eq__(self, other) -> bool:
        return isinstance(other, Grid) and np.array_equal(self.points, other.points)

    def __hash__(self):
        return hash(self.points.tobytes())

    def weights(self) -> np.ndarray:
        """Trapezoidal quadrature weights."""
        h = np.diff(self.points)
        w = np.zeros(self.points.size)
        w[:-1] += h / 2
        w[1:] += h / 2
        return w


@dataclass(frozen=True)
class Curve:
    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        vals = _frozen(self.values).ravel()
        if vals.size != len(self.grid):
            raise ValueError(f"curve has {vals.size} values for a grid of {len(self.grid)}")
        object.__setattr__(self, "values", vals)

    def norm(self) -> float:
        return l2_norm(self)


@dataclass(frozen=True)
class CurveSet:
    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        vals = _frozen(self.values)
        if vals.ndim == 1:
            vals = _frozen(vals.reshape(1, -1))
        if vals.ndim != 2 or vals.shape[0] < 1 or vals.shape[1] != len(self.grid):
            raise ValueError(f"curve matrix of shape {vals.shape} does not fit grid of {len(self.grid)}")
        object.__setattr__(self, "values", vals)

    def __len__(self) -> int:
        return self.values.shape[0]

    def __getitem__(self, i: int) -> Curve:
        return Curve(self.grid, self.values[i])

    def subset(self, idx) -> "CurveSet":
        return CurveSet(self.grid, self.values[idx])

    def mean(self) -> Curve:
        return Curve(self.grid, self.values.mean(axis=0))

    def norms(self) -> np.ndarray:
        return l2_norms(self.values, self.grid)


def l2_norms(values: np.ndarray, grid: Grid) -> np.ndarray:
    """Row-wise trapezoidal L2 norms of a curve matrix (or a single curve)."""
    v = np.asarray(values, dtype=float)
    return np.sqrt(np.maximum((v * v) @ grid.weights(), 0.0))


def l2_norm(c: Curve) -> float:
    return float(l2_norms(c.values, c.grid))


def resample(c: Curve, target: Grid) -> Curve:
    """Linear interpolation of ``c`` onto ``target``; no extrapolation."""
    src = c.grid.points
    tol = 1e-12
    if target.points[0] < src[0] - tol or target.points[-1] > src[-1] + tol:
        raise ValueError(
            f"target grid [{target.points[0]}, {target.points[-1]}] extends beyond "
            f"source span [{src[0]}, {src[-1]}]"
        )
    return Curve(target, np.interp(target.points, src, c.values))


# ---------------------------------------------------------------------------
# B-splines


@dataclass(frozen=True)
class BSplineBasis:
    """B-spline basis with clamped (multiplicity degree+1) boundary knots."""

    degree: int
    knots: np.ndarray
    _penalty: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        t = _frozen(self.knots)
        k = self.degree
        if k < 0:
            raise ValueError("degree must be non-negative")
        if np.any(np.diff(t) < 0):
            raise ValueError("knots must be non-decreasing")
        if t.size < 2 * (k + 1) or np.any(t[: k + 1] != t[0]) or np.any(t[-k - 1 :] != t[-1]):
            raise ValueError("boundary knots need multiplicity degree + 1")
        object.__setattr__(self, "knots", t)
        object.__setattr__(self, "_penalty", None)

    @classmethod
    def from_breakpoints(cls, breakpoints: Sequence[float], degree: int = 3) -> "BSplineBasis":
        b = np.unique(np.asarray(breakpoints, dtype=float))
        if b.size < 2:
            raise ValueError("need at least two distinct breakpoints")
        knots = np.concatenate([np.repeat(b[0], degree), b, np.repeat(b[-1], degree)])
        return cls(degree, knots)

    @classmethod
    def uniform(cls, n_interior: int, degree: int = 3, lo: float = 0.0, hi: float = 1.0) -> "BSplineBasis":
        return cls.from_breakpoints(np.linspace(lo, hi, n_interior + 2), degree)

    @property
    def K(self) -> int:
        return self.knots.size - self.degree - 1

    @property
    def n_interior(self) -> int:
        return self.K - self.degree - 1

    @property
    def span(self) -> tuple[float, float]:
        return float(self.knots[0]), float(self.knots[-1])

    def _spline(self) -> BSpline:
        return BSpline(self.knots, np.eye(self.K), self.degree, extrapolate=True)

    def design(self, t, deriv: int = 0) -> np.ndarray:
        """Matrix of basis values (or derivatives), shape ``(len(t), K)``."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        lo, hi = self.span
        if np.any(t < lo - 1e-12) or np.any(t > hi + 1e-12):
            raise ValueError("evaluation points outside the knot span")
        return self._spline()(t, nu=deriv)

    def penalty(self) -> np.ndarray:
        """Roughness matrix ``P[j, k] = integral of B_j'' B_k''``.

        Integrated exactly: on each knot interval the integrand is a polynomial
        of degree ``2 * (degree - 2)``, so Gauss-Legendre with ``degree``
        nodes per interval is exact.
        """
        if self._penalty is not None:
            return self._penalty
        K = self.K
        if self.degree < 2:
            P = np.zeros((K, K))
        else:
            nodes, wts = np.polynomial.legendre.leggauss(max(self.degree, 1))
            breaks = np.unique(self.knots)
            a, b = breaks[:-1], breaks[1:]
            half = (b - a)[:, None] / 2
            t = (a[:, None] + half * (nodes[None, :] + 1)).ravel()
            w = (half * wts[None, :]).ravel()
            D2 = self.design(t, deriv=2)
            P = D2.T @ (w[:, None] * D2)
            P = (P + P.T) / 2
        P.setflags(write=False)
        object.__setattr__(self, "_penalty", P)
        return P


@dataclass(frozen=True)
class SmoothedCurve:
    basis: BSplineBasis
    coefficients: np.ndarray
    lam: float
    gcv_score: float

    def __call__(self, t) -> np.ndarray:
        return self.basis.design(t) @ self.coefficients

    def on(self, grid: Grid) -> Curve:
        return Curve(grid, self(grid.points))


def _penalty_root(P) -> np.ndarray:
    """A matrix ``M`` with ``M.T @ M == P`` (P is symmetric PSD)."""
    vals, vecs = np.linalg.eigh(P)
    return np.sqrt(np.clip(vals, 0, None))[:, None] * vecs.T


def _penalized_fit(B, y, M, lam):
    """Solve ``(B'B + lam P) c = B'y`` by QR of the stacked system ``[B; sqrt(lam) M]``.

    Returns the coefficients and ``tr(H)``, with ``H`` the hat matrix on the data rows.
    """
    n = B.shape[0]
    Aug = np.vstack([B, math.sqrt(lam) * M])
    Q, R = linalg.qr(Aug, mode="economic")
    d = np.abs(np.diag(R))
    if d.min() <= 1e-12 * d.max():
        raise NumericalError(f"penalized normal equations are singular at lambda={lam}")
    coef = linalg.solve_triangular(R, Q[:n].T @ y)
    trace = float(np.sum(Q[:n] ** 2))
    return coef, trace


def smooth_gcv(raw: Curve, basis: BSplineBasis, lambda_grid: Sequence[float] = DEFAULT_LAMBDAS) -> SmoothedCurve:
    """Penalized B-spline fit with the roughness weight chosen by GCV.

    Missing (non-finite) values are skipped, so the smoother imputes gaps.
    Ties in the GCV score go to the smaller lambda.
    """
    lams = np.sort(np.asarray(lambda_grid, dtype=float))
    if lams.size == 0:
        raise ValueError("lambda_grid is empty")
    if np.any(lams < 0):
        raise ValueError("lambda values must be non-negative")
    mask = np.isfinite(raw.values)
    t, y = raw.grid.points[mask], raw.values[mask]
    n = t.size
    if n < basis.K:
        raise DataError(f"{n} observed points cannot support {basis.K} basis functions")
    B = basis.design(t)
    M = _penalty_root(basis.penalty())
    if lams[0] == 0 and np.linalg.matrix_rank(B) < basis.K:
        raise NumericalError("design matrix is rank deficient; lambda=0 has no unique solution")

    best = None
    for lam in lams:
        coef, trace = _penalized_fit(B, y, M, lam)
        rss = float(np.sum((y - B @ coef) ** 2))
        dof = n - trace
        if dof <= 1e-10 * n:
            score = 0.0 if rss <= 1e-20 else math.inf
        else:
            score = n * rss / dof**2
        if best is None or score < best[0]:
            best = (score, lam, coef)
    score, lam, coef = best
    coef.setflags(write=False)
    return SmoothedCurve(basis, coef, float(lam), float(score))


# ---------------------------------------------------------------------------
# CSV curve format: header "id,<t_0>,...,<t_{T-1}>", one row per subject,
# empty cell = missing value.


def read_curves_csv(path) -> tuple[list[str], CurveSet]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or len(rows[0]) < 3 or rows[0][0].strip() != "id":
        raise DataError(f"{path}: header must be 'id,t_0,...,t_(T-1)'")
    try:
        grid = Grid([float(h) for h in rows[0][1:]])
    except ValueError as exc:
        raise DataError(f"{path}: bad grid header: {exc}") from exc
    ids, vals = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(grid) + 1:
            raise DataError(f"{path}:{lineno}: expected {len(grid) + 1} cells, got {len(row)}")
        ids.append(row[0])
        try:
            vals.append([float(c) if c.strip() else np.nan for c in row[1:]])
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from exc
    if not ids:
        raise DataError(f"{path}: no curves")
    if len(set(ids)) != len(ids):
        raise DataError(f"{path}: duplicate ids")
    return ids, CurveSet(grid, np.array(vals))


def write_curves_csv(path, ids: Sequence[str], curves: CurveSet) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", *(repr(float(t)) for t in curves.grid.points)])
        for i, row in zip(ids, curves.values):
            w.writerow([i, *("" if not np.isfinite(v) else repr(float(v)) for v in row)])


def smooth_curveset(curves: CurveSet, basis: BSplineBasis, target: Grid | None = None,
                    lambda_grid: Sequence[float] = DEFAULT_LAMBDAS) -> CurveSet:
    """Smooth every row with its own GCV-selected lambda and evaluate on ``target``."""
    target = target or curves.grid
    out = np.empty((len(curves), len(target)))
    for i in range(len(curves)):
        out[i] = smooth_gcv(curves[i], basis, lambda_grid)(target.points)
    return CurveSet(target, out)
