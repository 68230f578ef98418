import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import integrate

from focal.errors import DataError, NumericalError
from focal.funcdata import (
    BSplineBasis,
    Curve,
    CurveSet,
    Grid,
    l2_norm,
    read_curves_csv,
    resample,
    smooth_curveset,
    smooth_gcv,
    write_curves_csv,
)

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


# -- Grid / Curve -------------------------------------------------------------


def test_grid_invariants():
    with pytest.raises(ValueError):
        Grid([0.5])
    with pytest.raises(ValueError):
        Grid([0.0, 0.5, 0.5])
    with pytest.raises(ValueError):
        Grid([-0.1, 0.5])
    with pytest.raises(ValueError):
        Grid([0.2, 1.1])
    g = Grid.uniform(11)
    assert len(g) == 11 and g == Grid(np.linspace(0, 1, 11))
    assert math.isclose(g.weights().sum(), 1.0)


def test_curve_length_must_match_grid():
    with pytest.raises(ValueError):
        Curve(Grid.uniform(5), np.zeros(4))
    with pytest.raises(ValueError):
        CurveSet(Grid.uniform(5), np.zeros((3, 4)))


# -- l2_norm ------------------------------------------------------------------


def test_norm_of_zero_is_zero():
    g = Grid(np.sort(np.random.default_rng(0).uniform(0, 1, 17)))
    assert l2_norm(Curve(g, np.zeros(17))) == 0.0


def test_norm_of_unit_constant():
    assert math.isclose(l2_norm(Curve(Grid.uniform(37), np.ones(37))), 1.0, rel_tol=1e-14)


def test_norm_of_identity_matches_integral():
    g = Grid.uniform(101)
    exact = math.sqrt(integrate.quad(lambda t: t * t, 0, 1)[0])
    assert abs(l2_norm(Curve(g, g.points)) - exact) < 1e-4
    # trapezoid error for t^2 is h^2/6 on [0,1]
    assert abs(l2_norm(Curve(g, g.points)) ** 2 - 1 / 3 - 0.01**2 / 6) < 1e-14


@settings(max_examples=60, deadline=None)
@given(arrays(float, 20, elements=finite), finite)
def test_norm_homogeneity(v, a):
    g = Grid.uniform(20)
    lhs = l2_norm(Curve(g, a * v))
    rhs = abs(a) * l2_norm(Curve(g, v))
    assert abs(lhs - rhs) <= 1e-10 * max(1.0, rhs)


@settings(max_examples=60, deadline=None)
@given(arrays(float, 15, elements=finite), arrays(float, 15, elements=finite))
def test_norm_triangle_inequality(f, h):
    g = Grid.uniform(15)
    scale = max(1.0, l2_norm(Curve(g, f)) + l2_norm(Curve(g, h)))
    assert l2_norm(Curve(g, f + h)) <= l2_norm(Curve(g, f)) + l2_norm(Curve(g, h)) + 1e-10 * scale


# -- resample -----------------------------------------------------------------


def test_resample_identity_grid():
    g = Grid.uniform(9)
    c = Curve(g, np.random.default_rng(1).normal(size=9))
    assert np.array_equal(resample(c, g).values, c.values)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=2, max_size=30, unique=True))
def test_resample_linear_function_exact(pts):
    src = Grid.uniform(13)
    target = Grid(np.sort(pts))
    out = resample(Curve(src, src.points), target)
    assert np.max(np.abs(out.values - target.points)) <= 1e-12


def test_resample_two_point_interpolation():
    c = Curve(Grid([0.0, 1.0]), [0.0, 1.0])
    assert resample(c, Grid([0.25, 0.5])).values[0] == 0.25


def test_resample_rejects_extrapolation():
    c = Curve(Grid([0.2, 0.8]), [1.0, 2.0])
    with pytest.raises(ValueError):
        resample(c, Grid([0.1, 0.5]))


# -- B-spline basis -----------------------------------------------------------


def test_basis_dimension():
    b = BSplineBasis.uniform(7)
    assert b.K == 7 + 3 + 1 and b.n_interior == 7


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 15), st.integers(1, 4))
def test_partition_of_unity(n_interior, degree):
    b = BSplineBasis.uniform(n_interior, degree)
    t = np.linspace(0, 1, 257)[1:-1]
    assert np.max(np.abs(b.design(t).sum(axis=1) - 1)) <= 1e-10


def test_penalty_matches_quadrature_oracle():
    b = BSplineBasis.from_breakpoints([0, 0.1, 0.35, 0.5, 0.8, 1.0])
    P = b.penalty()
    # independent route: adaptive quadrature of B_j'' B_k'' per knot interval
    breaks = np.unique(b.knots)
    for j, k in [(0, 0), (2, 3), (4, 4), (1, 5)]:
        val = sum(integrate.quad(lambda t: b.design(t, 2)[0, j] * b.design(t, 2)[0, k], lo, hi)[0]
                  for lo, hi in zip(breaks[:-1], breaks[1:]))
        assert abs(P[j, k] - val) <= 1e-8 * max(1.0, abs(val))
    assert np.allclose(P, P.T)


def test_penalty_annihilates_linear_functions():
    b = BSplineBasis.uniform(6)
    t = np.linspace(0, 1, 200)
    c_line = np.linalg.lstsq(b.design(t), 3 * t - 1, rcond=None)[0]
    assert abs(c_line @ b.penalty() @ c_line) < 1e-10


# -- smooth_gcv ---------------------------------------------------------------


def test_smooth_constant_for_every_lambda():
    g = Grid.uniform(40)
    raw = Curve(g, np.full(40, 5.0))
    b = BSplineBasis.uniform(8)
    for lam in [0.0, 1e-6, 1.0, 1e3]:
        fit = smooth_gcv(raw, b, [lam])
        assert np.max(np.abs(fit(g.points) - 5.0)) < 1e-8


def test_smooth_reproduces_span_member():
    g = Grid.uniform(60)
    b = BSplineBasis.uniform(10)
    coef = np.random.default_rng(3).normal(size=b.K)
    raw = Curve(g, b.design(g.points) @ coef)
    fit = smooth_gcv(raw, b, [0.0])
    assert np.max(np.abs(fit(g.points) - raw.values)) < 1e-8


def test_gcv_beats_interpolation_on_noisy_sine():
    rng = np.random.default_rng(11)
    g = Grid.uniform(50)
    truth = np.sin(2 * np.pi * g.points)
    b = BSplineBasis.uniform(20)
    mse_gcv, mse_zero = [], []
    for _ in range(100):
        raw = Curve(g, truth + rng.normal(0, 0.25, 50))
        mse_gcv.append(np.mean((smooth_gcv(raw, b)(g.points) - truth) ** 2))
        mse_zero.append(np.mean((smooth_gcv(raw, b, [0.0])(g.points) - truth) ** 2))
    assert np.mean(mse_gcv) < np.mean(mse_zero)


@settings(max_examples=25, deadline=None)
@given(arrays(float, 30, elements=st.floats(-10, 10)), arrays(float, 30, elements=st.floats(-10, 10)),
       st.sampled_from([0.0, 1e-4, 0.1, 10.0]))
def test_smoother_is_linear_for_fixed_lambda(y1, y2, lam):
    g = Grid.uniform(30)
    b = BSplineBasis.uniform(5)
    f = lambda y: smooth_gcv(Curve(g, y), b, [lam])(g.points)  # noqa: E731
    assert np.max(np.abs(f(y1 + y2) - f(y1) - f(y2))) <= 1e-8 * max(1.0, np.abs(y1).max() + np.abs(y2).max())


def test_gcv_score_formula():
    rng = np.random.default_rng(5)
    g = Grid.uniform(25)
    y = np.cos(3 * g.points) + rng.normal(0, 0.1, 25)
    b = BSplineBasis.uniform(4)
    lam = 0.01
    fit = smooth_gcv(Curve(g, y), b, [lam])
    B, P = b.design(g.points), b.penalty()
    H = B @ np.linalg.solve(B.T @ B + lam * P, B.T)
    rss = np.sum((y - H @ y) ** 2)
    assert math.isclose(fit.gcv_score, 25 * rss / (25 - np.trace(H)) ** 2, rel_tol=1e-9)


def test_gcv_tie_goes_to_smaller_lambda():
    g = Grid.uniform(30)
    raw = Curve(g, 2 * g.points + 1)  # in the penalty null space: identical fit for all lambda
    fit = smooth_gcv(raw, BSplineBasis.uniform(4), [1e-3, 1e-1, 10.0])
    assert fit.lam == 1e-3


def test_smooth_skips_missing_values():
    g = Grid.uniform(40)
    y = np.sin(np.pi * g.points)
    y_gap = y.copy()
    y_gap[10:14] = np.nan
    fit = smooth_gcv(Curve(g, y_gap), BSplineBasis.uniform(6))
    assert np.all(np.isfinite(fit(g.points)))
    assert np.max(np.abs(fit(g.points) - y)) < 1e-3


def test_smooth_rank_deficient_at_zero_lambda():
    g = Grid(np.linspace(0, 0.1, 20))  # all points in the first knot interval
    with pytest.raises(NumericalError, match="rank"):
        smooth_gcv(Curve(g, np.ones(20)), BSplineBasis.uniform(8), [0.0])


def test_smooth_needs_enough_points():
    g = Grid.uniform(5)
    with pytest.raises(DataError):
        smooth_gcv(Curve(g, np.ones(5)), BSplineBasis.uniform(8))


# -- CSV ----------------------------------------------------------------------


def test_csv_roundtrip_with_gaps(tmp_path):
    g = Grid.uniform(6)
    vals = np.random.default_rng(2).normal(size=(3, 6))
    vals[1, 2] = np.nan
    path = tmp_path / "c.csv"
    write_curves_csv(path, ["a", "b", "c"], CurveSet(g, vals))
    ids, cs = read_curves_csv(path)
    assert ids == ["a", "b", "c"]
    assert cs.grid == g
    assert np.array_equal(np.isnan(cs.values), np.isnan(vals))
    assert np.array_equal(np.nan_to_num(cs.values), np.nan_to_num(vals))


@pytest.mark.parametrize("text", ["x,0,1\na,1,2\n", "id,0,1\na,1\n", "id,0,1\na,1,2\na,3,4\n", "id,0,1\na,x,2\n"])
def test_csv_rejects_malformed(tmp_path, text):
    p = tmp_path / "bad.csv"
    p.write_text(text)
    with pytest.raises(DataError):
        read_curves_csv(p)


def test_smooth_curveset_onto_new_grid():
    g = Grid.uniform(30)
    cs = CurveSet(g, np.vstack([np.sin(g.points), np.cos(g.points)]))
    out = smooth_curveset(cs, BSplineBasis.uniform(5), Grid.uniform(11))
    assert out.values.shape == (2, 11)
    assert np.max(np.abs(out.values[0] - np.sin(np.linspace(0, 1, 11)))) < 1e-4
