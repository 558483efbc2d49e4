import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from setid_dml.dataset import DgpSpec, generate
from setid_dml.errors import ConvergenceError, InvalidArgument, MissingCellError, UnsupportedError
from setid_dml.learners import (Kind, LearnerSpec, Penalty, fit, fit_conditional_quantile,
                                fit_lasso, fit_logistic_lasso, fit_memorizing, oracle_learner)


def _data(n=10, p=2, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, p))
    y = 1.0 + x @ np.arange(1, p + 1) + rng.normal(size=n)
    return x, y


def test_zero_penalty_matches_least_squares():
    x, y = _data()
    m = fit_lasso(x, y, LearnerSpec(penalty=Penalty.fixed(0.0), tol=1e-12))
    design = np.column_stack([np.ones(len(y)), x])
    ols = np.linalg.lstsq(design, y, rcond=None)[0]
    np.testing.assert_allclose(m.coefficients, ols[1:], atol=1e-8)
    assert abs(m.intercept - ols[0]) < 1e-8


def test_penalty_above_threshold_zeroes_all_slopes():
    x, y = _data(n=50, p=5)
    lam_max = np.max(np.abs((x - x.mean(0)).T @ (y - y.mean())) / len(y))
    m = fit_lasso(x, y, LearnerSpec(penalty=Penalty.fixed(lam_max)))
    assert np.all(m.coefficients == 0)
    assert m.intercept == pytest.approx(y.mean())


def test_constant_response():
    x, _ = _data(n=30, p=4)
    m = fit_lasso(x, np.full(30, 2.5))
    assert np.all(m.coefficients == 0) and m.intercept == pytest.approx(2.5)


def test_kkt_residuals_at_convergence():
    x, y = _data(n=200, p=30, seed=3)
    spec = LearnerSpec(penalty=Penalty.fixed(0.05), tol=1e-9)
    m = fit_lasso(x, y, spec)
    xc, yc = x - x.mean(0), y - y.mean()
    grad = xc.T @ (yc - xc @ m.coefficients) / len(y)
    active = m.coefficients != 0
    viol = np.where(active, np.abs(grad - 0.05 * np.sign(m.coefficients)),
                    np.maximum(np.abs(grad) - 0.05, 0))
    assert viol.max() <= 10 * spec.tol


def test_refitting_is_deterministic():
    x, y = _data(n=80, p=10)
    a, b = fit_lasso(x, y), fit_lasso(x, y)
    assert np.array_equal(a.coefficients, b.coefficients) and a.intercept == b.intercept


def test_cv_penalty_runs_and_selects_support():
    x, y = _data(n=150, p=8, seed=5)
    m = fit_lasso(x, y, LearnerSpec(penalty=Penalty.cv(3)))
    assert m.lam > 0 and np.count_nonzero(m.coefficients) >= 4


def test_post_selection_removes_shrinkage():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(400, 20))
    y = 2 * x[:, 0] - x[:, 1] + 0.1 * rng.normal(size=400)
    plain = fit_lasso(x, y, LearnerSpec(penalty=Penalty.fixed(0.2)))
    post = fit_lasso(x, y, LearnerSpec(penalty=Penalty.fixed(0.2), post_selection=True))
    assert abs(plain.coefficients[0] - 2) > 0.15
    assert abs(post.coefficients[0] - 2) < 0.02


def test_non_convergence_raises_with_iteration_count():
    x, y = _data(n=100, p=40, seed=2)
    with pytest.raises(ConvergenceError) as err:
        fit_lasso(x, y, LearnerSpec(penalty=Penalty.fixed(1e-4), max_iter=1, tol=1e-14))
    assert err.value.iterations == 1


def test_non_finite_input_rejected():
    x, y = _data()
    y[3] = np.nan
    with pytest.raises(InvalidArgument):
        fit_lasso(x, y)


def test_logistic_huge_penalty_predicts_base_rate():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(60, 3))
    y = (rng.random(60) < 0.3).astype(float)
    m = fit_logistic_lasso(x, y, LearnerSpec(Kind.LOGISTIC_LASSO, Penalty.fixed(1e3)))
    assert np.all(m.coefficients == 0)
    np.testing.assert_allclose(m.predict(x), y.mean(), atol=1e-9)


def test_logistic_symmetric_design_has_zero_intercept():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(50, 2))
    y = (x[:, 0] + 0.5 * rng.normal(size=50) > 0).astype(float)
    xs, ys = np.vstack([x, -x]), np.concatenate([y, 1 - y])
    m = fit_logistic_lasso(xs, ys, LearnerSpec(Kind.LOGISTIC_LASSO, Penalty.fixed(0.01), tol=1e-10))
    assert abs(m.intercept) < 1e-6


def _newton_logistic(x, y, iters=200):
    # slow unpenalized reference fit
    design = np.column_stack([np.ones(len(y)), x])
    b = np.zeros(design.shape[1])
    for _ in range(iters):
        mu = 1 / (1 + np.exp(-design @ b))
        w = mu * (1 - mu) + 1e-12
        b = b + np.linalg.solve(design.T @ (w[:, None] * design), design.T @ (y - mu))
    return b


def test_logistic_zero_penalty_matches_newton_and_is_monotone():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(50, 1))
    y = (x[:, 0] + rng.normal(size=50) > 0).astype(float)
    m = fit_logistic_lasso(x, y, LearnerSpec(Kind.LOGISTIC_LASSO, Penalty.fixed(0.0), tol=1e-12))
    ref = _newton_logistic(x, y)
    np.testing.assert_allclose([m.intercept, m.coefficients[0]], ref, atol=1e-5)

    # strongly separated: a gap of width 2 around zero
    xs = np.sign(x) * (1 + np.abs(x))
    ys = (xs[:, 0] > 0).astype(float)
    ms = fit_logistic_lasso(xs, ys, LearnerSpec(Kind.LOGISTIC_LASSO, Penalty.fixed(0.0),
                                               max_iter=200))
    grid = np.linspace(-3, 3, 41)[:, None]
    pr = ms.predict(grid)
    assert np.all(np.diff(pr) >= 0)
    assert pr.min() >= 1e-6 and pr.max() <= 1 - 1e-6


def test_logistic_rejects_single_class():
    x, _ = _data()
    with pytest.raises(InvalidArgument):
        fit_logistic_lasso(x, np.ones(10))


def test_quantile_examples():
    x = np.zeros((3, 1))
    m = fit_conditional_quantile(x, np.array([3.0, 1.0, 2.0]))
    assert m.quantile(0.5, x[:1])[0] == 2.0
    assert m.quantile(0.0, x[:1])[0] == 1.0 and m.quantile(1.0, x[:1])[0] == 3.0
    m2 = fit_conditional_quantile(np.zeros((2, 1)), np.array([0.0, 10.0]))
    assert m2.quantile(0.25, np.zeros((1, 1)))[0] == pytest.approx(2.5)


def test_quantile_cells_and_missing_cell():
    x = np.array([[0.0], [0.0], [1.0], [1.0]])
    m = fit_conditional_quantile(x, np.array([1.0, 2.0, 10.0, 20.0]), cells=(0,))
    np.testing.assert_allclose(m.quantile(0.5, np.array([[0.0], [1.0]])), [1.5, 15.0])
    with pytest.raises(MissingCellError):
        m.quantile(0.5, np.array([[2.0]]))


@given(st.lists(st.floats(-100, 100), min_size=2, max_size=30),
       st.floats(0, 1), st.floats(0, 1))
def test_quantile_nondecreasing_in_level(values, u1, u2):
    m = fit_conditional_quantile(np.zeros((len(values), 1)), np.array(values))
    lo, hi = sorted((u1, u2))
    x = np.zeros((1, 1))
    assert m.quantile(lo, x)[0] <= m.quantile(hi, x)[0]


def test_jitter_is_seeded():
    x = np.zeros((5, 1))
    y = np.ones(5)
    a = fit_conditional_quantile(x, y, jitter_sd=0.01, seed=3).quantile(0.5, x[:1])
    b = fit_conditional_quantile(x, y, jitter_sd=0.01, seed=3).quantile(0.5, x[:1])
    assert a == b and a[0] != 1.0


def test_memorizing_learner_reproduces_training_labels_partly():
    x, y = _data(n=50, p=3)
    base = fit_lasso(x, y)
    m = fit_memorizing(x, y, LearnerSpec(Kind.MEMORIZING, memorize=0.5))
    np.testing.assert_allclose(m.predict(x), base.predict(x) + 0.5 * (y - base.predict(x)))
    fresh = x + 0.01
    np.testing.assert_allclose(m.predict(fresh), base.predict(fresh))


def test_oracle_learner_returns_truth():
    ds = generate(DgpSpec("PLP", n=30, p=6, sparsity=2, seed=1))
    m = oracle_learner(ds.truth, "m0")
    np.testing.assert_array_equal(m.predict(ds.x), ds.x[:, [0, 1]].sum(axis=1, keepdims=True))
    lee = generate(DgpSpec("LEE", n=30, p=4, sparsity=2, seed=1))
    s0, s1 = oracle_learner(lee.truth, "s0"), oracle_learner(lee.truth, "s1")
    np.testing.assert_array_equal(s0.predict(lee.x) / s1.predict(lee.x), 1.0)
    with pytest.raises(UnsupportedError):
        oracle_learner(None, "m0")


def test_dispatch_rejects_non_regression_kind():
    x, y = _data()
    with pytest.raises(InvalidArgument):
        fit(LearnerSpec(Kind.EMPIRICAL_QUANTILE), x, y)
