"""Reference values for tests: closed-form population support functions and
exhaustive sample-level maximization.

Nothing here is used by the estimators. The brute-force search deliberately
avoids the package's generator code, since the sign rule is what it checks.
"""

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import ndtr, ndtri

from .dataset import PROB_FLOOR, DgpTruth, Model
from .errors import InvalidArgument, UnsupportedError
from .moments import q_generator

MAX_EXHAUSTIVE_N = 18


@dataclass(frozen=True)
class PopulationTruth:
    model: Model
    sigma_q: Callable = field(repr=False)
    beta_interval: tuple | None
    params: dict

    def __call__(self, q):
        return self.sigma_q(q)


def _gaussian_truth(spec, model):
    beta = np.asarray(spec.beta0, dtype=float)
    sigma = spec.residual_sd ** 2 * np.eye(spec.d)
    sigma_inv = np.linalg.inv(sigma)
    c = float(spec.interval_width)

    def sigma_q(q):
        q = np.asarray(q, dtype=float)
        if q.ndim == 1:
            return float(q @ beta + 0.5 * c * math.sqrt(2 / math.pi) * math.sqrt(q @ sigma_inv @ q))
        quad = np.einsum("ij,jk,ik->i", q, sigma_inv, q)
        return q @ beta + 0.5 * c * math.sqrt(2 / math.pi) * np.sqrt(quad)

    interval = None
    if spec.d == 1:
        interval = (-sigma_q(np.array([-1.0])), sigma_q(np.array([1.0])))
    params = {"beta0": spec.beta0, "interval_width": c, "residual_sd": spec.residual_sd,
              "noise_sd": spec.noise_sd}
    return PopulationTruth(model, sigma_q, interval, params)


def analytic_plp_truth(spec):
    """Population support function of the PLP identified set.

    With V ~ N(0, Sigma) and constant width c,
    ``sigma(q) = q' beta0 + (c / 2) E|q' Sigma^{-1} V|`` and
    ``E|q' Sigma^{-1} V| = sqrt(2 / pi) sqrt(q' Sigma^{-1} q)``.
    """
    if Model(spec.model) is not Model.PLP:
        raise UnsupportedError("analytic_plp_truth needs a PLP spec")
    return _gaussian_truth(spec, Model.PLP)


def analytic_apd_truth(spec):
    """Population support function of the APD identified set.

    Weighting variable ``z = q' Lambda^{-1} V`` with V Gaussian, so
    ``sigma(q) = q' beta0 + c E[max(z, 0)]``, which is the same closed form
    as the PLP case.
    """
    if Model(spec.model) is not Model.APD:
        raise UnsupportedError("analytic_apd_truth needs an APD spec")
    return _gaussian_truth(spec, Model.APD)


def analytic_lee_truth(spec, nodes=80):
    """Population Lee bounds for the synthetic selection design.

    Returns ``{"outcome": (lower, upper), "ate": (lower, upper),
    "control_mean": value}``. The outcome bounds trim the treated, selected
    outcome distribution by ``p0 = s0 / s1``. Because Y given (D=1, S=1, X)
    is normal with sd ``noise_sd``, the trimmed tail mean is closed form:
    ``beta_U = E[s0 mu1 + s1 sd phi(Phi^{-1}(p0))] / E[s0]`` (minus for
    beta_L). The expectation over the standard-normal selection index uses
    Gauss-Hermite quadrature; the binary cell shifts both means by 1/2.
    """
    if Model(spec.model) is not Model.LEE:
        raise UnsupportedError("analytic_lee_truth needs a LEE spec")
    truth = DgpTruth(spec)
    has_index = min(spec.sparsity, spec.p - 1) >= 1
    if has_index:
        t, w = np.polynomial.hermite_e.hermegauss(nodes)
        w = w / w.sum()
    else:
        t, w = np.zeros(1), np.ones(1)
    idx = truth.LEE_INTERCEPT + t
    s0 = np.clip(ndtr(idx), PROB_FLOOR, 1 - PROB_FLOOR)
    s1 = np.clip(ndtr(idx + spec.selection_shift), PROB_FLOOR, 1 - PROB_FLOOR)
    p0 = np.clip(s0 / s1, PROB_FLOOR, 1.0)
    tail = spec.noise_sd * np.exp(-0.5 * ndtri(p0) ** 2) / math.sqrt(2 * math.pi)
    mean_s0 = float(w @ s0)
    mu0 = truth.LEE_OUTCOME_LEVEL + 0.5
    mu1 = mu0 + spec.beta0[0]
    spread = float(w @ (s1 * tail)) / mean_s0
    outcome = (mu1 - spread, mu1 + spread)
    return {"outcome": outcome, "ate": (outcome[0] - mu0, outcome[1] - mu0), "control_mean": mu0}


def _projected(dataset, q, true_nuisance, sigma):
    q = np.atleast_1d(np.asarray(q, dtype=float))
    v = dataset.d - np.asarray(true_nuisance["eta"], dtype=float).reshape(dataset.n, -1)
    p = np.linalg.solve(np.atleast_2d(sigma).T, q)
    return v @ p


def brute_force_sample_support(dataset, q, true_nuisance, sigma):
    """Maximize the sample mean of ``z_i y_i`` over all vertex selections.

    Returns
    -------
    (exhaustive, sign_rule) : tuple of float
        The exhaustive maximum over ``y_i in {y_L,i, y_U,i}`` and the mean
        under the generator's sign rule. Both sums are exactly rounded.

    Raises
    ------
    UnsupportedError
        If ``n`` exceeds the exhaustive cap.
    AssertionError
        If the two disagree.
    """
    n = dataset.n
    if n > MAX_EXHAUSTIVE_N:
        raise UnsupportedError(f"exhaustive mode needs n <= {MAX_EXHAUSTIVE_N}")
    z = _projected(dataset, q, true_nuisance, sigma)
    lo = z * dataset.y_lower
    hi = z * dataset.y_upper
    # row b of `bits` says which observations take their upper endpoint
    bits = (np.arange(2 ** n)[:, None] >> np.arange(n)) & 1
    approx = np.where(bits == 1, hi, lo).sum(axis=1)
    # rescore near-ties exactly so float summation order cannot decide the winner
    cand = np.flatnonzero(approx >= approx.max() - 1e-9 * (1 + np.abs(approx).max()))
    best = max(math.fsum(np.where(bits[b] == 1, hi, lo)) for b in cand) / n
    sign = math.fsum(z * q_generator(dataset.y_lower, dataset.y_upper, z)) / n
    assert best == sign, f"exhaustive {best!r} != sign rule {sign!r}"
    return best, sign


def oracle_plugin_estimator(dataset, q, true_nuisance, sigma=None):
    """Orthogonal estimator at exact population nuisances, without cross-fitting.

    For PLP, ``sigma`` is the known Sigma, or ``None`` for the sample
    ``mean(V V')``. APD data take ``Lambda`` from the nuisance record.
    """
    model = Model(dataset.truth.spec.model) if dataset.truth is not None else Model.PLP
    q = np.atleast_1d(np.asarray(q, dtype=float))
    nu = true_nuisance
    if model is Model.APD:
        lam = np.atleast_2d(nu["Lambda"])
        v = dataset.d - nu["m"]
        z = v @ np.linalg.solve(lam, q)
        up = z > 0
        y_q = np.where(up, dataset.y_upper, dataset.y_lower)
        gamma_q = nu["gamma_l"] + nu["gamma_width"] * up
        grad = nu["gamma_l_grad"] @ q + (nu["gamma_width_grad"] @ q) * up
        grad = grad + nu["gamma_width"] * math.sqrt(q @ np.linalg.solve(lam, q) / (2 * math.pi))
        return math.fsum(z * (y_q - gamma_q) + grad) / dataset.n
    if model is not Model.PLP:
        raise UnsupportedError("oracle plug-in estimator covers PLP and APD")
    v = dataset.d - nu["eta"]
    gamma = nu["gamma_l"] + 0.5 * nu["gamma_width"]
    if sigma is None:
        s_hat = v.T @ v / dataset.n
        z = v @ np.linalg.solve(s_hat.T, q)
        y_q = np.where(z > 0, dataset.y_upper, dataset.y_lower)
        beta = np.linalg.solve(s_hat, (v * (y_q - gamma)[:, None]).mean(axis=0))
        return float(q @ beta)
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    if sigma.shape != (len(q), len(q)):
        raise InvalidArgument("sigma does not match q")
    z = v @ np.linalg.solve(sigma.T, q)
    y_q = np.where(z > 0, dataset.y_upper, dataset.y_lower)
    return math.fsum(z * (y_q - gamma)) / dataset.n
