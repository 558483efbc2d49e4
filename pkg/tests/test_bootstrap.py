import math

import numpy as np
import pytest

from setid_dml import bootstrap
from setid_dml.bootstrap import (BootstrapRun, ConfidenceRegion, EstimatorKind, RegionKind,
                                 bootstrap_draws, covariance_estimate, critical_value_pointwise,
                                 evaluate, exp_weights, pointwise_region, uniform_band)
from setid_dml.crossfit import crossfit
from setid_dml.dataset import DgpSpec, generate
from setid_dml.errors import DegenerateError, InvalidArgument
from setid_dml.estimators import direction_grid

# Phi^{-1}(sqrt(0.95)), frozen from 200 bisection steps on 0.5 * (1 + erf(x / sqrt(2)))
PHI_INV_SQRT_95 = 1.954508327213991


@pytest.fixture(scope="module")
def plp1():
    ds = generate(DgpSpec("PLP", n=600, p=6, sparsity=2, seed=31))
    return ds, crossfit(ds, "PLP")


@pytest.fixture(scope="module")
def plp2():
    ds = generate(DgpSpec("PLP", n=600, p=6, sparsity=2, beta0=(1.0, 0.5), seed=32))
    return ds, crossfit(ds, "PLP")


def test_identity_weights_reproduce_point_estimate(plp2):
    ds, prof = plp2
    grid = direction_grid(2, 8)
    for kind in (EstimatorKind.PLP_KNOWN_SIGMA, EstimatorKind.PLP_UNKNOWN_SIGMA):
        run = bootstrap_draws(ds, prof, kind, grid, B=5, sigma=np.eye(2), identity_weights=True)
        for row in run.draws:
            assert row.tobytes() == run.point.tobytes()


def test_exp_weights_sum_to_n():
    for b in range(5):
        w = exp_weights(1000, 3, b)
        assert w.sum() == pytest.approx(1000, rel=1e-13)
        assert np.all(w > 0)
    assert not np.array_equal(exp_weights(50, 3, 0), exp_weights(50, 3, 1))
    assert not np.array_equal(exp_weights(50, 3, 0), exp_weights(50, 3, 0, attempt=1))


def test_draws_are_deterministic_across_threads(plp2):
    ds, prof = plp2
    grid = direction_grid(2, 6)
    a = bootstrap_draws(ds, prof, "PLP_UNKNOWN_SIGMA", grid, B=40, seed=9, n_jobs=1)
    b = bootstrap_draws(ds, prof, "PLP_UNKNOWN_SIGMA", grid, B=40, seed=9, n_jobs=3)
    c = bootstrap_draws(ds, prof, "PLP_UNKNOWN_SIGMA", grid, B=40, seed=9)
    assert a.draws.tobytes() == b.draws.tobytes() == c.draws.tobytes()
    d = bootstrap_draws(ds, prof, "PLP_UNKNOWN_SIGMA", grid, B=40, seed=10)
    assert not np.array_equal(a.draws, d.draws)


def test_single_draw_reproduces_its_row(plp2):
    ds, prof = plp2
    grid = direction_grid(2, 6)
    run = bootstrap_draws(ds, prof, "PLP_UNKNOWN_SIGMA", grid, B=12, seed=4)
    est = evaluate("PLP_UNKNOWN_SIGMA", ds, prof, grid, weights=exp_weights(ds.n, 4, 7))
    assert est.values.tobytes() == run.draws[7].tobytes()


def test_grid_order_permutes_draw_columns(plp2):
    ds, prof = plp2
    grid = direction_grid(2, 6)
    perm = np.array([3, 0, 5, 1, 4, 2])
    a = bootstrap_draws(ds, prof, "PLP_UNKNOWN_SIGMA", grid, B=10, seed=2)
    b = bootstrap_draws(ds, prof, "PLP_UNKNOWN_SIGMA", grid[perm], B=10, seed=2)
    np.testing.assert_array_equal(b.draws, a.draws[:, perm])


def test_bootstrap_mean_near_point_estimate(plp2):
    ds, prof = plp2
    run = bootstrap_draws(ds, prof, "PLP_KNOWN_SIGMA", direction_grid(2, 16), B=400, seed=1,
                          sigma=np.eye(2))
    sd = run.draws.std(axis=0, ddof=1)
    assert np.all(np.abs(run.draws.mean(axis=0) - run.point) <= 4 * sd / math.sqrt(run.B))


def test_covariance_is_symmetric_and_scaled(plp2):
    ds, prof = plp2
    run = bootstrap_draws(ds, prof, "PLP_UNKNOWN_SIGMA", direction_grid(2, 5), B=60, seed=0)
    omega = covariance_estimate(run)
    assert np.array_equal(omega, omega.T)
    np.testing.assert_allclose(np.diag(omega), ds.n * run.draws.var(axis=0, ddof=1), rtol=1e-12)
    const = BootstrapRun(np.ones((40, 3)), 40, 0, "EXP1", run.point_estimate)
    assert np.all(covariance_estimate(const) == 0)
    with pytest.raises(InvalidArgument):
        covariance_estimate(BootstrapRun(np.ones((10, 3)), 10, 0, "EXP1", run.point_estimate))


def test_pointwise_critical_value():
    assert critical_value_pointwise(0.05) == pytest.approx(PHI_INV_SQRT_95, abs=1e-9)
    vals = [critical_value_pointwise(a) for a in (0.01, 0.05, 0.1, 0.3)]
    assert vals == sorted(vals, reverse=True)
    with pytest.raises(InvalidArgument):
        critical_value_pointwise(1.0)


def test_pointwise_region_zero_covariance_is_interval(plp1):
    ds, prof = plp1
    run = bootstrap_draws(ds, prof, "PLP_1D", B=30, identity_weights=True)
    region = pointwise_region(run.point_estimate, run)
    assert region.lower[0] == run.point_estimate.lower
    assert region.upper[0] == run.point_estimate.upper
    assert region.kind is RegionKind.POINTWISE_SET


@pytest.mark.parametrize("root", ["diag", "symmetric"])
def test_pointwise_region_shrinks_with_alpha(plp1, root):
    ds, prof = plp1
    run = bootstrap_draws(ds, prof, "PLP_1D", B=200, seed=3)
    est = run.point_estimate
    widths = []
    for alpha in (0.01, 0.05, 0.2):
        r = pointwise_region(est, run, alpha, root=root)
        assert r.lower[0] <= est.lower <= est.upper <= r.upper[0]
        widths.append(r.upper[0] - r.lower[0])
    assert widths[0] > widths[1] > widths[2]


def test_pointwise_region_diag_uses_bound_sds(plp1):
    ds, prof = plp1
    run = bootstrap_draws(ds, prof, "PLP_1D", B=200, seed=3)
    sd = run.draws.std(axis=0, ddof=1)
    r = pointwise_region(run.point_estimate, run, 0.05)
    assert run.point_estimate.lower - r.lower[0] == pytest.approx(PHI_INV_SQRT_95 * sd[0], rel=1e-9)
    assert r.upper[0] - run.point_estimate.upper == pytest.approx(PHI_INV_SQRT_95 * sd[1], rel=1e-9)
    with pytest.raises(InvalidArgument):
        pointwise_region(run.point_estimate, run, root="cholesky")


def test_pointwise_region_needs_bounds(plp2):
    ds, prof = plp2
    run = bootstrap_draws(ds, prof, "PLP_UNKNOWN_SIGMA", direction_grid(2, 4), B=30)
    with pytest.raises(InvalidArgument):
        pointwise_region(run.point_estimate, run)


def test_uniform_band_dominates_pointwise(plp2):
    ds, prof = plp2
    run = bootstrap_draws(ds, prof, "PLP_UNKNOWN_SIGMA", direction_grid(2, 16), B=300, seed=5)
    band = uniform_band(run.point_estimate, run, 0.05)
    assert band.kind is RegionKind.UNIFORM_BAND
    t = np.abs(run.draws - run.point) / run.draws.std(axis=0, ddof=1)
    assert np.all(band.critical_value >= np.quantile(t, 0.95, axis=0))
    assert np.all(band.lower <= run.point) and np.all(run.point <= band.upper)


def test_uniform_band_single_direction(plp1):
    ds, prof = plp1
    run = bootstrap_draws(ds, prof, "PLP_UNKNOWN_SIGMA", [[1.0]], B=200, seed=6)
    band = uniform_band(run.point_estimate, run, 0.1)
    dev = np.quantile(np.abs(run.draws[:, 0] - run.point[0]), 0.9)
    assert band.upper[0] - run.point[0] == pytest.approx(dev, rel=1e-12)
    assert run.point[0] - band.lower[0] == pytest.approx(dev, rel=1e-12)


def test_uniform_band_skips_zero_sd_points(plp2, caplog):
    ds, prof = plp2
    run = bootstrap_draws(ds, prof, "PLP_UNKNOWN_SIGMA", direction_grid(2, 4), B=120, seed=1)
    draws = run.draws.copy()
    draws[:, 2] = run.point[2]
    flat = BootstrapRun(draws, run.B, run.seed, "EXP1", run.point_estimate)
    band = uniform_band(run.point_estimate, flat)
    assert band.lower[2] == band.upper[2] == run.point[2]
    assert "zero bootstrap SD" in caplog.text
    with pytest.raises(InvalidArgument):
        uniform_band(run.point_estimate, BootstrapRun(draws[:50], 50, 1, "EXP1",
                                                       run.point_estimate))


def test_region_rejects_inverted_bounds():
    with pytest.raises(InvalidArgument):
        ConfidenceRegion(0.95, np.array([1.0]), np.array([0.0]), 1.0, RegionKind.POINTWISE_SET)
    with pytest.raises(InvalidArgument):
        ConfidenceRegion(1.0, np.array([0.0]), np.array([1.0]), 1.0, RegionKind.POINTWISE_SET)
    r = ConfidenceRegion(0.9, np.array([0.0]), np.array([1.0]), 1.5, RegionKind.UNIFORM_BAND)
    assert r.to_dict() == {"level": 0.9, "kind": "UNIFORM_BAND", "critical_value": 1.5,
                           "lower": [0.0], "upper": [1.0]}


def test_singular_draws_are_redrawn(plp2, monkeypatch):
    ds, prof = plp2
    grid = direction_grid(2, 4)
    real = bootstrap.evaluate
    seen = []

    def flaky(kind, dataset, profile, weights=None, **kw):
        seen.append(weights is None)
        # fail the first weighted attempt once
        if weights is not None and seen.count(False) == 1:
            raise DegenerateError("singular")
        return real(kind, dataset, profile, weights=weights, **kw)

    monkeypatch.setattr(bootstrap, "evaluate", flaky)
    run = bootstrap_draws(ds, prof, "PLP_UNKNOWN_SIGMA", grid, B=100, seed=8)
    assert run.flagged == 1
    expected = real("PLP_UNKNOWN_SIGMA", ds, prof, grid, weights=exp_weights(ds.n, 8, 0, 1))
    assert run.draws[0].tobytes() == expected.values.tobytes()

    def always(kind, dataset, profile, weights=None, **kw):
        if weights is not None:
            raise DegenerateError("singular")
        return real(kind, dataset, profile, weights=weights, **kw)

    monkeypatch.setattr(bootstrap, "evaluate", always)
    with pytest.raises(DegenerateError):
        bootstrap_draws(ds, prof, "PLP_UNKNOWN_SIGMA", grid, B=100, seed=8)


def test_bounds_kinds_and_csv_export(tmp_path):
    ds = generate(DgpSpec("LEE", n=800, p=5, sparsity=2, selection_shift=0.5, seed=2))
    prof = crossfit(ds, "LEE")
    run = bootstrap_draws(ds, prof, "LEE_BOUNDS", B=30, seed=1)
    assert run.draws.shape == (30, 2)
    assert EstimatorKind.LEE_BOUNDS.is_bounds and not EstimatorKind.APD.is_bounds
    path = tmp_path / "draws.csv"
    run.to_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "q0,q1" and len(lines) == 31
    assert float(lines[5].split(",")[1]) == run.draws[4, 1]
    with pytest.raises(InvalidArgument):
        bootstrap_draws(ds, prof, "LEE_BOUNDS", B=1)
