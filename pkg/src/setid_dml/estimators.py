"""Second-stage estimators: support functions and bounds from cross-fitted nuisances.

Every estimator takes an optional ``weights`` vector (mean one). The point
estimate uses unit weights; the Bayesian bootstrap reuses the same code with
normalized exponential weights, so identity weights reproduce the point
estimate bit for bit.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri
from scipy.stats import qmc

from .dataset import Model
from .errors import DegenerateError, InvalidArgument
from .moments import (LAMBDA_MAX, LAMBDA_MIN, ProjectionVector, apd_moment, lee_ate_moments,
                      lee_lower_moment, lee_upper_moment, plp_gamma)


@dataclass(frozen=True, eq=False)
class SupportFunctionEstimate:
    grid: np.ndarray
    values: np.ndarray
    sigma_hat: np.ndarray | None
    influence: np.ndarray
    n: int
    model: str = "PLP"
    plugin: bool = False


@dataclass(frozen=True, eq=False)
class BoundsEstimate:
    lower: float
    upper: float
    kind: str
    influence_lower: np.ndarray
    influence_upper: np.ndarray
    n: int


def direction_grid(d, m=64):
    """Unit directions covering the sphere in R^d.

    d = 1 gives (+1, -1); d = 2 gives ``m`` equally spaced angles; d >= 3 maps
    an unscrambled Halton sequence through the normal quantile function.
    """
    if d < 1:
        raise InvalidArgument("dimension must be positive")
    if d == 1:
        return np.array([[1.0], [-1.0]])
    if m < 1:
        raise InvalidArgument("grid size must be positive")
    if d == 2:
        ang = 2 * np.pi * np.arange(m) / m
        return np.column_stack([np.cos(ang), np.sin(ang)])
    pts = qmc.Halton(d, scramble=False).random(m + 1)[1:]
    z = ndtri(np.clip(pts, 1e-12, 1 - 1e-12))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


def _grid(grid, d):
    g = np.atleast_2d(np.asarray(grid, dtype=float))
    if g.shape[1] != d and g.shape[0] == d and d > 1:
        g = g.T
    if g.shape[1] != d:
        raise InvalidArgument(f"grid directions must have dimension {d}")
    norms = np.linalg.norm(g, axis=1)
    if np.any(np.abs(norms - 1) > 1e-12):
        raise InvalidArgument("grid directions must have unit norm")
    return g


def _weights(weights, n):
    if weights is None:
        return np.ones(n)
    w = np.asarray(weights, dtype=float)
    if w.shape != (n,):
        raise InvalidArgument("weights must have one entry per observation")
    return w


def _wmean(w, a):
    """Weighted mean over rows (``w`` has mean one)."""
    if a.ndim == 1:
        return float(np.mean(w * a))
    return np.mean(w[:, None] * a, axis=0)


def _check_spd(sigma, name="Sigma"):
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    if not np.allclose(sigma, sigma.T, rtol=0, atol=1e-12 * max(1.0, np.abs(sigma).max())):
        raise InvalidArgument(f"{name} is not symmetric")
    eig = np.linalg.eigvalsh(sigma)
    if eig[0] <= 0:
        raise InvalidArgument(f"{name} is not positive definite (eigenvalue {eig[0]:.6g})")
    return sigma


# -- partially linear predictor ------------------------------------------------

def _plp_parts(dataset, profile):
    v = dataset.d - profile["eta"]
    return v, plp_gamma(profile.values)


def _plp_scores(dataset, z, gamma, plugin):
    """Per-observation moments for every column of projected residuals ``z``."""
    yq = np.where(z > 0, dataset.y_upper[:, None], dataset.y_lower[:, None])
    m = z * yq
    if plugin:
        return m, yq
    return m + (-z * gamma[:, None]), yq


def support_known_sigma(dataset, profile, sigma, grid, plugin=False, weights=None):
    """Support function with known Sigma: mean of g(W, Sigma^{-1}' q, xi) per direction.

    ``plugin=True`` drops the correction term, which gives the exact support
    function of the sample-level set.
    """
    sigma = _check_spd(sigma)
    v, gamma = _plp_parts(dataset, profile)
    grid = _grid(grid, v.shape[1])
    w = _weights(weights, dataset.n)
    proj = np.linalg.solve(sigma.T, grid.T)
    z = v @ proj
    g, _ = _plp_scores(dataset, z, gamma, plugin)
    values = _wmean(w, g)
    return SupportFunctionEstimate(grid, values, sigma, g - values, dataset.n, "PLP", plugin)


def _sigma_hat(v, w):
    return (v.T @ (w[:, None] * v)) / len(v)


def support_unknown_sigma(dataset, profile, grid, plugin=False, lambda_min=LAMBDA_MIN,
                          lambda_max=LAMBDA_MAX, weights=None):
    """Support function with Sigma estimated by the mean of V V'.

    Computed in regression form: ``beta_q = Sigma_hat^{-1} mean(V (Y_q - gamma))``
    and ``sigma(q) = q' beta_q``, which equals the sample mean of
    ``g(W, Sigma_hat^{-1}' q, xi)``.

    Influence contributions include the Sigma-estimation term
    ``-q' Sigma^{-1} (V V' - Sigma) beta_q``.
    """
    v, gamma = _plp_parts(dataset, profile)
    grid = _grid(grid, v.shape[1])
    w = _weights(weights, dataset.n)
    sigma = _sigma_hat(v, w)
    for q in grid:
        ProjectionVector.from_sigma(q, sigma, lambda_min, lambda_max, estimated=True)
    proj = np.linalg.solve(sigma.T, grid.T)
    z = v @ proj
    yq = np.where(z > 0, dataset.y_upper[:, None], dataset.y_lower[:, None])
    resid = yq if plugin else yq - gamma[:, None]
    values = np.empty(len(grid))
    infl = np.empty((dataset.n, len(grid)))
    for j, q in enumerate(grid):
        moment = v * resid[:, j:j + 1]
        beta = np.linalg.solve(sigma, _wmean(w, moment))
        values[j] = q @ beta
        infl[:, j] = (moment - v * (v @ beta)[:, None]) @ np.linalg.solve(sigma.T, q)
    return SupportFunctionEstimate(grid, values, sigma, infl, dataset.n, "PLP", plugin)


def plp_bounds_1d(dataset, profile, plugin=False, weights=None):
    """Bounds on a scalar partially linear predictor.

    Upper bound: OLS of ``Y_UBG - gamma`` on the residual ``V`` where the
    generator picks ``Y_U`` when ``V > 0`` and ``Y_L`` otherwise; the lower
    bound swaps the branches. ``plugin=True`` gives the naive estimator that
    regresses the generator itself.
    """
    if dataset.k != 1:
        raise InvalidArgument("plp_bounds_1d needs a scalar D")
    v = dataset.d[:, 0] - profile["eta"][:, 0]
    if not np.sum(v * v) > 0:
        raise DegenerateError("sum of squared first-stage residuals is zero")
    est = support_unknown_sigma(dataset, profile, [[1.0], [-1.0]], plugin=plugin, weights=weights)
    return BoundsEstimate(-est.values[1], est.values[0], "PLP_1D",
                          -est.influence[:, 1], est.influence[:, 0], dataset.n)


# -- average partial derivative ------------------------------------------------

def apd_record(dataset, profile, Lambda=None):
    """Moment record with weighting variable ``Lambda^{-1} (D - m(X))``.

    ``Lambda`` defaults to the sample covariance of the residuals.
    """
    v = dataset.d - profile["m"]
    if Lambda is None:
        Lambda = v.T @ v / dataset.n
    Lambda = np.atleast_2d(np.asarray(Lambda, dtype=float))
    if np.linalg.eigvalsh(Lambda)[0] <= 1e-12 * max(1.0, np.abs(Lambda).max()):
        raise DegenerateError("residual covariance is singular")
    rec = dict(profile.values)
    rec["eta"] = np.linalg.solve(Lambda, v.T).T
    rec["Lambda"] = Lambda
    return rec


def apd_support(dataset, profile, grid, plugin=False, Lambda=None, weights=None):
    """Support function of the average-partial-derivative set.

    For each q: residuals ``V = D - m(X)``, generator ``Y_q`` chosen by
    ``1{q' Lambda^{-1} V > 0}``, reduced form ``gamma_q`` and
    ``sigma(q) = q' Lambda^{-1} mean(V (Y_q - gamma_q)) + mean(q' d/dD gamma_q)``.
    The derivative term is what keeps the estimate away from zero; see
    :func:`~setid_dml.moments.apd_moment` for its jump component.
    """
    rec = apd_record(dataset, profile, Lambda)
    grid = _grid(grid, dataset.k)
    w = _weights(weights, dataset.n)
    g = np.empty((dataset.n, len(grid)))
    for j, q in enumerate(grid):
        mv = apd_moment(dataset, q, rec)
        g[:, j] = mv.m if plugin else mv.g
    values = _wmean(w, g)
    return SupportFunctionEstimate(grid, values, rec["Lambda"], g - values, dataset.n, "APD", plugin)


# -- selection model -------------------------------------------------------------

def lee_record(dataset, profile, weights=None):
    w = _weights(weights, dataset.n)
    rec = dict(profile.values)
    rec["p_d0s1"] = _wmean(w, (1 - dataset.d[:, 0]) * dataset.s)
    return rec


def _lee_influence(g, value, a, big_p):
    # the normalizer Pr(D=0, S=1) is itself a sample mean
    return g - value - value * (a - big_p) / big_p


def lee_bounds(dataset, profile, plugin=False, weights=None):
    """Bounds on the outcome mean of always-selected treated units.

    Sample means of the orthogonal moments g_L, g_U; ``plugin=True`` uses the
    trimmed means without correction terms.
    """
    w = _weights(weights, dataset.n)
    rec = lee_record(dataset, profile, w)
    lo = lee_lower_moment(dataset, rec)
    hi = lee_upper_moment(dataset, rec)
    g_l, g_u = (lo.m, hi.m) if plugin else (lo.g, hi.g)
    lower, upper = _wmean(w, g_l), _wmean(w, g_u)
    a = (1 - dataset.d[:, 0]) * dataset.s
    big_p = rec["p_d0s1"]
    return BoundsEstimate(lower, upper, "LEE_OUTCOME", _lee_influence(g_l, lower, a, big_p),
                          _lee_influence(g_u, upper, a, big_p), dataset.n)


def lee_ate(dataset, profile, variant="printed", weights=None):
    """Bounds on the treatment effect for always-selected units.

    ``variant`` is passed to :func:`~setid_dml.moments.lee_ate_moments`.
    """
    w = _weights(weights, dataset.n)
    rec = lee_record(dataset, profile, w)
    theta_l, theta_u = lee_ate_moments(dataset, rec, variant)
    lower, upper = _wmean(w, theta_l), _wmean(w, theta_u)
    return BoundsEstimate(lower, upper, "LEE_ATE", theta_l - lower, theta_u - upper, dataset.n)


# -- result document ---------------------------------------------------------------

def result_document(model, estimate, K, seeds, learner_specs, bounds=None):
    """JSON-ready dict with fields model, n, K, grid, sigma, bounds, meta."""
    doc = {"model": Model(model).value, "n": int(estimate.n), "K": K}
    if isinstance(estimate, SupportFunctionEstimate):
        doc["grid"] = estimate.grid.tolist()
        doc["sigma"] = [float(v) for v in estimate.values]
    else:
        doc["grid"] = [[1.0], [-1.0]]
        doc["sigma"] = [float(estimate.upper), -float(estimate.lower)]
        bounds = estimate
    doc["bounds"] = None if bounds is None else {"lower": float(bounds.lower),
                                                 "upper": float(bounds.upper)}
    specs = {}
    for comp, spec in (learner_specs or {}).items():
        specs[comp] = None if spec is None else (spec if isinstance(spec, dict) else spec.to_dict())
    doc["meta"] = {"seeds": dict(seeds), "learners": specs}
    return doc

