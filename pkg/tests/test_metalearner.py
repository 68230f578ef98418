import json
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from focal.errors import DataError, NumericalError
from focal.funcdata import Curve, CurveSet, Grid, l2_norms
from focal.metalearner import (
    CrossFitPlan,
    Dataset,
    FcateModel,
    FocalSpec,
    LearnerSpec,
    NuisanceFit,
    aipw_pseudo_outcomes,
    confidence_band,
    dr_bias_diagnostic,
    fate,
    fate_band,
    fit_fcate,
    gaussian_band,
    make_plan,
    predict_theta,
    pseudo_outcomes,
    surface_points,
    theta_surface,
)
from focal.simulate import DgpConfig, generate, oracle_pseudo_outcomes

# -- Dataset / plan -------------------------------------------------------------


def test_dataset_requires_both_arms():
    g = Grid.uniform(3)
    with pytest.raises(DataError, match="both treatment arms required"):
        Dataset(np.zeros((4, 1)), np.ones(4), CurveSet(g, np.zeros((4, 3))))
    with pytest.raises(DataError):
        Dataset(np.zeros((4, 1)), [0, 1, 2, 1], CurveSet(g, np.zeros((4, 3))))
    with pytest.raises(DataError):
        Dataset(np.zeros((3, 1)), [0, 1, 1, 0], CurveSet(g, np.zeros((4, 3))))


def test_plan_even_split():
    p = make_plan(10, 5, 0)
    folds = [p.fold(j) for j in range(5)]
    assert [f.size for f in folds] == [2] * 5
    assert np.array_equal(np.sort(np.concatenate(folds)), np.arange(10))


def test_plan_remainder_spread():
    assert sorted(make_plan(7, 3, 1).sizes(), reverse=True) == [3, 2, 2]


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 300), st.integers(2, 12), st.integers(0, 2**63 - 1))
def test_plan_partition_properties(n, J, seed):
    if J > n:
        with pytest.raises(ValueError):
            make_plan(n, J, seed)
        return
    p = make_plan(n, J, seed)
    sizes = p.sizes()
    assert max(sizes) - min(sizes) <= 1 and sum(sizes) == n
    assert np.array_equal(p.assignment, make_plan(n, J, seed).assignment)


def test_plan_seed_matters_and_roundtrips():
    a, b = make_plan(50, 5, 1), make_plan(50, 5, 2)
    assert not np.array_equal(a.assignment, b.assignment)
    assert np.array_equal(CrossFitPlan.from_dict(a.to_dict()).assignment, a.assignment)


# -- pseudo-outcomes ------------------------------------------------------------


def test_control_subject_gamma1_is_regression():
    Y = np.array([[5.0, 6.0]])
    g1, g0 = aipw_pseudo_outcomes(Y, [0], [0.3], np.array([[1.0, 1.0]]), np.array([[2.0, -1.0]]))
    assert np.array_equal(g1, [[2.0, -1.0]])
    assert np.allclose(g0, 1 + (Y - 1) / 0.7)


def test_treated_subject_hand_evaluation():
    g1, _ = aipw_pseudo_outcomes(np.full((1, 4), 2.0), [1], [0.5], np.zeros((1, 4)), np.ones((1, 4)))
    assert np.array_equal(g1, np.full((1, 4), 3.0))


def test_true_nuisances_identify_average_effect():
    truth = generate(DgpConfig(n=20_000, T=40, seed=21), 0)
    g1, g0 = oracle_pseudo_outcomes(truth)
    diff = g1 - g0
    se = diff.std(axis=0, ddof=1) / math.sqrt(diff.shape[0])
    target = truth.betas[5] * truth.X[:, 0].mean()  # sample average of theta*(X_i)
    assert np.all(np.abs(diff.mean(axis=0) - target) <= 3 * se)


def test_lemma_one_at_fixed_covariates():
    # brute force E[gamma1 - gamma0 | X = x] against E[Y1 - Y0 | X = x] = theta*(x)
    truth = generate(DgpConfig(n=10, T=25, seed=3), 0)
    rng = np.random.default_rng(0)
    m = 40_000
    from focal.simulate import _sampler

    noise = _sampler(0.25, 5.5, 10.0, 25)
    # 5 curves x 25 grid points checked at once: Bonferroni at family level 1%
    crit = norm.ppf(1 - 0.01 / (2 * 5 * 25))
    for x in ([0, 0, 0, 0], [1, 0, 0, 0], [-1, 0.5, 0, 0], [0.5, -0.5, 0.5, -0.5], [2, 1, -1, 0]):
        x = np.asarray(x, dtype=float)
        pi = float(truth.propensity(x)[0])
        A = (rng.random(m) < pi).astype(int)
        eps = noise.draw(rng, m)
        mu0, mu1 = truth.mu(0, x)[0], truth.mu(1, x)[0]
        Y = np.where(A[:, None] == 1, mu1, mu0) + eps
        g1, g0 = aipw_pseudo_outcomes(Y, A, np.full(m, pi), np.tile(mu0, (m, 1)), np.tile(mu1, (m, 1)))
        diff = g1 - g0
        se = diff.std(axis=0, ddof=1) / math.sqrt(m)
        assert np.all(np.abs(diff.mean(axis=0) - truth.theta(x)[0]) <= crit * se + 1e-12)


def test_out_of_fold_discipline(small_truth, small_model):
    plan = small_model.plan
    for j, f in enumerate(small_model.nuisance.folds):
        assert np.intersect1d(f.train_idx, plan.fold(j)).size == 0
        assert f.train_idx.size + plan.fold(j).size == plan.assignment.size


def test_pseudo_outcomes_rejects_in_fold_training(small_truth, small_model):
    plan = small_model.plan
    bad = NuisanceFit(tuple(
        type(f)(f.mu0, f.mu1, f.pi, np.arange(plan.assignment.size)) for f in small_model.nuisance.folds))
    with pytest.raises(AssertionError, match="fold 0"):
        pseudo_outcomes(small_truth.dataset(), bad, plan)


def test_pseudo_outcomes_finite(small_model):
    p = small_model.pseudo
    assert np.all(np.isfinite(p.gamma1.values)) and np.all(np.isfinite(p.gamma0.values))
    assert np.all((p.pi_hat >= 0.01) & (p.pi_hat <= 0.99))


# -- fit / predict --------------------------------------------------------------


def test_errors_carry_fold_index():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(60, 2))
    X = np.column_stack([X, X[:, 0]])  # duplicated column: singular at lam=0
    A = np.tile([0, 1], 30)
    d = Dataset(X, A, CurveSet(Grid.uniform(3), rng.normal(size=(60, 3))))
    spec = FocalSpec(mu=LearnerSpec("ridge", 0.0))
    with pytest.raises(NumericalError, match="fold 0"):
        fit_fcate(d, spec, make_plan(60, 3, 0))


def test_zero_effect_fit_stays_near_oracle():
    cfg = DgpConfig(n=3000, T=30, seed=5, effect_amplitude=1e-12)
    truth = generate(cfg, 0)
    d = truth.dataset()
    plan = make_plan(d.n, 5, 1)
    m = fit_fcate(d, plan=plan, with_cov=False)
    # oracle: same third stage on pseudo-outcomes built from the true nuisances
    g1, g0 = oracle_pseudo_outcomes(truth)
    oracle_final = [LearnerSpec().fit(d.X[plan.fold(j)], CurveSet(d.grid, (g1 - g0)[plan.fold(j)]))
                    for j in range(5)]
    xs = np.column_stack([np.linspace(-2, 2, 20), np.zeros((20, 3))])
    est = np.max(l2_norms(m.predict_values(xs), d.grid))
    oracle = np.max(l2_norms(np.mean([f.predict_values(xs) for f in oracle_final], axis=0), d.grid))
    assert est <= 3 * oracle


def test_predict_single_fold_degenerate(small_truth):
    d = small_truth.dataset()
    m = fit_fcate(d, plan=make_plan(d.n, 1, 0), with_cov=False)
    x = np.array([[0.3, -1, 0.2, 0.0]])
    assert np.array_equal(m.predict_values(x), m.final[0].predict_values(x))


def test_predict_identical_folds(small_model):
    same = FcateModel((small_model.final[2],) * 5, None, small_model.plan, small_model.spec,
                      small_model.grid, 4)
    x = np.random.default_rng(2).normal(size=(7, 4))
    assert np.allclose(same.predict_values(x), small_model.final[2].predict_values(x), rtol=0, atol=1e-12)


def test_predict_is_fold_average(small_model):
    x = np.random.default_rng(3).normal(size=(6, 4))
    manual = np.mean([f.predict_values(x) for f in small_model.final], axis=0)
    assert np.allclose(small_model.predict_values(x), manual, rtol=0, atol=1e-12)


def test_predict_invariant_to_fold_relabelling(small_model):
    x = np.random.default_rng(4).normal(size=(9, 4))
    for perm in ([4, 3, 2, 1, 0], [1, 3, 0, 4, 2]):
        relabelled = FcateModel(tuple(small_model.final[j] for j in perm), None, small_model.plan,
                                small_model.spec, small_model.grid, 4)
        assert np.array_equal(relabelled.predict_values(x), small_model.predict_values(x))


def test_predict_symmetric_pair_linearity(small_model):
    xbar = np.array([0.2, -0.4, 1.0, 0.5])
    delta = np.array([0.7, 0.1, -0.3, 0.9])
    pair = (predict_theta(small_model, xbar + delta).values + predict_theta(small_model, xbar - delta).values) / 2
    assert np.allclose(predict_theta(small_model, xbar).values, pair, atol=1e-10)


def test_predict_dimension_mismatch(small_model):
    with pytest.raises(ValueError):
        predict_theta(small_model, [1.0, 2.0])
    assert isinstance(predict_theta(small_model, np.zeros(4)), Curve)
    assert isinstance(predict_theta(small_model, np.zeros((3, 4))), CurveSet)


def test_model_dump_roundtrip_bit_identical(small_model):
    text = json.dumps(small_model.to_dict())
    m2 = FcateModel.from_dict(json.loads(text))
    x = np.random.default_rng(5).normal(size=(11, 4))
    assert np.array_equal(m2.predict_values(x), small_model.predict_values(x))
    assert np.array_equal(m2.cov.sigma(x[0]), small_model.cov.sigma(x[0]))
    b1 = confidence_band(small_model, x[0], B=300, rng_seed=1)
    b2 = confidence_band(m2, x[0], B=300, rng_seed=1)
    assert np.array_equal(b1.upper.values, b2.upper.values)
    with pytest.raises(DataError):
        FcateModel.from_dict({"format": "other"})


def test_mlp_learners_end_to_end(small_truth):
    from focal.learners import MlpConfig

    d = small_truth.dataset()
    spec = FocalSpec(mu=LearnerSpec("mlp", mlp=MlpConfig(max_iter=50)),
                     final=LearnerSpec("mlp", mlp=MlpConfig(max_iter=50)))
    m = fit_fcate(d, spec, make_plan(d.n, 3, 0), with_cov=False)
    m2 = FcateModel.from_dict(json.loads(json.dumps(m.to_dict())))
    x = np.zeros((2, 4))
    assert np.array_equal(m.predict_values(x), m2.predict_values(x))


# -- FATE -----------------------------------------------------------------------


@settings(max_examples=20, deadline=None)
@given(st.floats(0, 0.49))
def test_fate_constant_curves(trim):
    g = Grid.uniform(6)
    c = np.linspace(-1, 2, 6)
    assert np.allclose(fate(CurveSet(g, np.tile(c, (40, 1))), trim).values, c)


def test_fate_trims_outlier():
    g = Grid.uniform(5)
    V = np.zeros((100, 5))
    V[37] = 1000.0
    assert np.all(fate(CurveSet(g, V), 0.01).values == 0)
    assert np.allclose(fate(CurveSet(g, V), 0.0).values, 10.0)


def test_fate_untrimmed_is_column_mean():
    rng = np.random.default_rng(6)
    V = rng.normal(size=(33, 7))
    assert np.array_equal(fate(CurveSet(Grid.uniform(7), V)).values, V.mean(axis=0))


def test_fate_accepts_pseudo_outcomes(small_model):
    assert np.array_equal(fate(small_model.pseudo).values, small_model.pseudo.diff.values.mean(axis=0))
    with pytest.raises(ValueError):
        fate(small_model.pseudo, 0.5)


# -- bands ----------------------------------------------------------------------


def _center(T=20, seed=0):
    return Curve(Grid.uniform(T), np.random.default_rng(seed).normal(size=T))


def test_band_collapses_without_variance():
    c = _center()
    for mode in ("pointwise", "simultaneous"):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            b = gaussian_band(c, np.zeros((20, 20)), 100, mode=mode)
        assert np.array_equal(b.lower.values, c.values) and np.array_equal(b.upper.values, c.values)


def test_pointwise_half_width_gaussian_quantile():
    c = _center(15)
    b = gaussian_band(c, np.eye(15), 400, alpha=0.05, B=200_000, mode="pointwise", rng_seed=3)
    target = norm.ppf(0.975) / math.sqrt(400)
    for half in (b.upper.values - c.values, c.values - b.lower.values):
        assert np.all(np.abs(half / target - 1) <= 0.03)


def test_simultaneous_contains_pointwise():
    rng = np.random.default_rng(7)
    M = rng.normal(size=(25, 25))
    S = M @ M.T / 25
    c = _center(25)
    pw = gaussian_band(c, S, 50, mode="pointwise", rng_seed=9)
    sim = gaussian_band(c, S, 50, mode="simultaneous", rng_seed=9)
    assert np.all(sim.lower.values <= pw.lower.values) and np.all(sim.upper.values >= pw.upper.values)
    assert np.all(sim.width >= pw.width)


def test_simultaneous_band_matches_sup_t_oracle():
    # independent coordinates: sup of |Z_t| over T iid normals has quantile
    # q with (2 Phi(q) - 1)^T = 1 - alpha
    T, alpha = 10, 0.05
    c = _center(T)
    b = gaussian_band(c, np.eye(T), 1.0, alpha=alpha, B=200_000, mode="simultaneous", rng_seed=4)
    q = norm.ppf((1 + (1 - alpha) ** (1 / T)) / 2)
    assert np.allclose((b.upper.values - c.values) / q, 1, atol=0.01)


def test_band_order_and_nesting():
    c = _center()
    S = np.diag(np.linspace(0.5, 2, 20))
    wide = gaussian_band(c, S, 30, alpha=0.05, mode="pointwise", rng_seed=1)
    narrow = gaussian_band(c, S, 30, alpha=0.5, mode="pointwise", rng_seed=1)
    assert np.all(wide.lower.values <= narrow.lower.values) and np.all(narrow.upper.values <= wide.upper.values)
    assert np.all(wide.lower.values <= c.values) and np.all(c.values <= wide.upper.values)


def test_band_deterministic_and_validated():
    c = _center()
    a = gaussian_band(c, np.eye(20), 10, rng_seed=5)
    b = gaussian_band(c, np.eye(20), 10, rng_seed=5)
    assert np.array_equal(a.upper.values, b.upper.values)
    with pytest.raises(ValueError):
        gaussian_band(c, np.eye(20), 10, B=199)
    with pytest.raises(ValueError):
        gaussian_band(c, np.eye(20), 10, mode="both")


def test_zero_variance_points_excluded_with_warning():
    c = _center(6)
    S = np.diag([1, 1, 0, 1, 1, 1.0])
    with pytest.warns(RuntimeWarning, match="zero variance"):
        b = gaussian_band(c, S, 10, mode="simultaneous")
    assert b.width[2] == 0 and np.all(np.delete(b.width, 2) > 0)


def test_model_band_uses_fold_size(small_model):
    b = confidence_band(small_model, np.zeros(4), B=300)
    assert b.n_eff == small_model.n / 5
    assert np.all(b.lower.values <= b.center.values) and np.all(b.center.values <= b.upper.values)
    with pytest.raises(ValueError):
        confidence_band(small_model, np.zeros(3))


def test_fate_band_covers_sample_truth(small_truth, small_model):
    b = fate_band(small_model.pseudo, B=1000, rng_seed=2)
    truth = small_truth.theta(small_truth.X).mean(axis=0)
    assert np.mean(b.contains(truth)) >= 0.9


# -- bias diagnostic ------------------------------------------------------------


def test_bias_zero_with_exact_propensity():
    rng = np.random.default_rng(8)
    pi = rng.uniform(0.1, 0.9, 30)
    b = dr_bias_diagnostic(pi, pi, rng.normal(size=(30, 5)), rng.normal(size=(30, 5)),
                           rng.normal(size=(30, 5)), rng.normal(size=(30, 5)))
    assert np.all(b == 0)


def test_bias_zero_with_exact_regressions():
    rng = np.random.default_rng(9)
    mu1, mu0 = rng.normal(size=(30, 5)), rng.normal(size=(30, 5))
    b = dr_bias_diagnostic(rng.uniform(0.1, 0.9, 30), rng.uniform(0.1, 0.9, 30), mu1, mu1, mu0, mu0)
    assert np.all(b == 0)


def test_bias_hand_value():
    b = dr_bias_diagnostic(0.4, 0.5, np.array([2.0]), np.array([1.0]), np.array([0.0]), np.array([3.0]))
    assert np.allclose(b, (-0.1) * 1 / 0.4 + (-0.1) * (-3) / 0.6)


# -- surfaces -------------------------------------------------------------------


def test_surface_binary_column_two_rows():
    rng = np.random.default_rng(10)
    X = np.column_stack([rng.normal(size=200), rng.integers(0, 2, 200), rng.normal(size=200)])
    rows = surface_points(X, 1)
    assert rows.shape == (2, 3) and list(rows[:, 1]) == [0, 1]
    assert np.allclose(rows[:, 0], X[:, 0].mean()) and np.allclose(rows[:, 2], X[:, 2].mean())


def test_surface_continuous_column():
    rng = np.random.default_rng(11)
    X = np.column_stack([rng.normal(size=500), (rng.random(500) < 0.7).astype(float)])
    rows = surface_points(X, 0, 50)
    lo, hi = np.percentile(X[:, 0], [1, 99])
    assert rows.shape == (50, 2) and rows[0, 0] == lo and rows[-1, 0] == hi
    assert np.all(rows[:, 1] == 1.0)  # binary covariate held at its mode


def test_theta_surface_shape(small_model, small_truth):
    xv, Z = theta_surface(small_model, small_truth.X, 0, 12)
    assert xv.shape == (12,) and Z.shape == (12, 30)
