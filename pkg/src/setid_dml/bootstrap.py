"""Bayesian bootstrap of the second stage and the confidence regions built on it.

Nuisances are never refitted: each draw reweights the observations with
normalized Exp(1) weights and re-evaluates the estimator on the stored
cross-fitted profile.
"""

import csv
import enum
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

from . import _rng
from .errors import DegenerateError, InvalidArgument
from .estimators import (BoundsEstimate, apd_support, lee_ate, lee_bounds, plp_bounds_1d,
                         support_known_sigma, support_unknown_sigma)

log = logging.getLogger(__name__)

MAX_FLAGGED_SHARE = 0.01


class EstimatorKind(str, enum.Enum):
    PLP_KNOWN_SIGMA = "PLP_KNOWN_SIGMA"
    PLP_UNKNOWN_SIGMA = "PLP_UNKNOWN_SIGMA"
    PLP_1D = "PLP_1D"
    APD = "APD"
    LEE_BOUNDS = "LEE_BOUNDS"
    LEE_ATE = "LEE_ATE"

    @property
    def is_bounds(self):
        return self in (EstimatorKind.PLP_1D, EstimatorKind.LEE_BOUNDS, EstimatorKind.LEE_ATE)


class RegionKind(str, enum.Enum):
    POINTWISE_SET = "POINTWISE_SET"
    UNIFORM_BAND = "UNIFORM_BAND"


def evaluate(kind, dataset, profile, grid=None, weights=None, sigma=None, plugin=False,
             variant="printed"):
    """Run the estimator of ``kind`` and return it.

    Bounds kinds return a :class:`BoundsEstimate`, the rest a
    :class:`SupportFunctionEstimate` over ``grid``.
    """
    kind = EstimatorKind(kind)
    if kind is EstimatorKind.PLP_KNOWN_SIGMA:
        if sigma is None:
            raise InvalidArgument("known-Sigma estimator needs sigma")
        return support_known_sigma(dataset, profile, sigma, grid, plugin=plugin, weights=weights)
    if kind is EstimatorKind.PLP_UNKNOWN_SIGMA:
        return support_unknown_sigma(dataset, profile, grid, plugin=plugin, weights=weights)
    if kind is EstimatorKind.PLP_1D:
        return plp_bounds_1d(dataset, profile, plugin=plugin, weights=weights)
    if kind is EstimatorKind.APD:
        return apd_support(dataset, profile, grid, plugin=plugin, weights=weights)
    if kind is EstimatorKind.LEE_BOUNDS:
        return lee_bounds(dataset, profile, plugin=plugin, weights=weights)
    return lee_ate(dataset, profile, variant=variant, weights=weights)


def as_vector(estimate):
    """Values of an estimate as a flat vector; bounds become (lower, upper)."""
    if isinstance(estimate, BoundsEstimate):
        return np.array([estimate.lower, estimate.upper])
    return np.asarray(estimate.values, dtype=float)


def exp_weights(n, seed, b, attempt=0):
    """Exp(1) weights for draw ``b`` divided by their mean."""
    e = _rng.substream(seed, "bootstrap", b, attempt).standard_exponential(n)
    return e / e.mean()


@dataclass(frozen=True, eq=False)
class BootstrapRun:
    draws: np.ndarray
    B: int
    seed: int
    weights_scheme: str
    point_estimate: object
    flagged: int = 0

    @property
    def point(self):
        return as_vector(self.point_estimate)

    @property
    def n(self):
        return self.point_estimate.n

    def to_csv(self, path):
        """One row per draw, one column per grid index."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"q{j}" for j in range(self.draws.shape[1])])
            for row in self.draws:
                w.writerow([repr(float(v)) for v in row])


def _threads(n_jobs):
    if n_jobs is None:
        n_jobs = int(os.environ.get("SETID_DML_THREADS", "1"))
    return max(1, int(n_jobs))


def bootstrap_draws(dataset, profile, kind, grid=None, B=500, seed=0, sigma=None,
                    plugin=False, variant="printed", identity_weights=False, n_jobs=None):
    """Bayesian bootstrap draws of an estimator.

    Parameters
    ----------
    kind : EstimatorKind or str
    grid : array, optional
        Directions for support-function kinds.
    identity_weights : bool
        Test hook: every draw uses unit weights, so every row equals the
        point estimate.
    n_jobs : int, optional
        Worker threads; defaults to ``SETID_DML_THREADS`` or 1. Rows depend
        only on ``(seed, b)``.

    Returns
    -------
    BootstrapRun
    """
    if B < 2:
        raise InvalidArgument("B must be at least 2")
    kind = EstimatorKind(kind)
    opts = {"grid": grid, "sigma": sigma, "plugin": plugin, "variant": variant}
    point = evaluate(kind, dataset, profile, **opts)
    n = dataset.n
    max_flagged = int(np.floor(MAX_FLAGGED_SHARE * B))

    def draw(b):
        # a singular reweighted Sigma is redrawn from the next attempt stream
        flagged = 0
        while True:
            w = np.ones(n) if identity_weights else exp_weights(n, seed, b, flagged)
            try:
                return as_vector(evaluate(kind, dataset, profile, weights=w, **opts)), flagged
            except DegenerateError:
                flagged += 1
                if flagged > max_flagged:
                    raise DegenerateError(f"bootstrap draw {b}: more than {MAX_FLAGGED_SHARE:.0%} "
                                          "of draws singular")

    jobs = _threads(n_jobs)
    if jobs == 1:
        results = [draw(b) for b in range(B)]
    else:
        with ThreadPoolExecutor(jobs) as ex:
            results = list(ex.map(draw, range(B)))
    draws = np.vstack([r[0] for r in results])
    flagged = sum(r[1] for r in results)
    if flagged > max_flagged:
        raise DegenerateError(f"{flagged} of {B} bootstrap draws singular")
    if flagged:
        log.warning("%d bootstrap draws had a singular Sigma and were redrawn", flagged)
    return BootstrapRun(draws, B, seed, "EXP1", point, flagged)


def covariance_estimate(run):
    """N times the covariance of the draws across bootstrap replications."""
    if run.B < 30:
        raise InvalidArgument("covariance estimate needs B >= 30")
    # shifting by the first draw makes constant columns exactly zero
    dev = run.draws - run.draws[0]
    dev = dev - dev.mean(axis=0)
    omega = run.n * (dev.T @ dev) / (run.B - 1)
    return (omega + omega.T) / 2


@dataclass(frozen=True)
class ConfidenceRegion:
    level: float
    lower: np.ndarray
    upper: np.ndarray
    critical_value: float
    kind: RegionKind

    def __post_init__(self):
        if not 0 < self.level < 1:
            raise InvalidArgument("level must lie in (0, 1)")
        if np.any(np.asarray(self.lower) > np.asarray(self.upper)):
            raise InvalidArgument("region has lower > upper")

    def to_dict(self):
        return {"level": self.level, "kind": self.kind.value,
                "critical_value": float(self.critical_value),
                "lower": [float(v) for v in np.atleast_1d(self.lower)],
                "upper": [float(v) for v in np.atleast_1d(self.upper)]}


def _psd_sqrt(omega):
    vals, vecs = np.linalg.eigh(omega)
    if vals.min() < 0:
        if vals.min() < -1e-10 * max(1.0, abs(vals).max()):
            log.warning("bootstrap covariance not PSD (eigenvalue %.3g); clipped at 0", vals.min())
        vals = np.clip(vals, 0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def critical_value_pointwise(alpha):
    """Phi^{-1}(sqrt(1 - alpha)): each one-sided miss has probability 1 - sqrt(1 - alpha)."""
    if not 0 < alpha < 1:
        raise InvalidArgument("alpha must lie in (0, 1)")
    return float(ndtri(np.sqrt(1 - alpha)))


def pointwise_region(estimate, run, alpha=0.05, root="diag"):
    """Confidence region for the interval [beta_L, beta_U].

    ``[L - C_lo / sqrt(N), U + C_hi / sqrt(N)]`` with ``(C_lo, C_hi) = Omega^{1/2} (c, c)``,
    ``c = Phi^{-1}(sqrt(1 - alpha))`` and ``Omega`` the bootstrap covariance.

    ``root="diag"`` takes Omega^{1/2} as the diagonal of bound standard
    deviations, which matches the critical value (it controls each one-sided
    miss at ``1 - sqrt(1 - alpha)``). ``root="symmetric"`` uses the symmetric
    PSD matrix root; with strongly correlated bounds it over-covers.
    """
    if not isinstance(estimate, BoundsEstimate):
        raise InvalidArgument("pointwise_region needs a bounds estimate")
    c = critical_value_pointwise(alpha)
    omega = covariance_estimate(run)
    if root == "diag":
        d = np.diag(omega).copy()
        if d.min() < 0:
            log.warning("negative bootstrap variance clipped at 0")
        half = np.sqrt(np.clip(d, 0, None)) * c
    elif root == "symmetric":
        half = _psd_sqrt(omega) @ np.array([c, c])
    else:
        raise InvalidArgument(f"unknown root {root!r}")
    half = np.clip(half, 0, None)
    scale = 1 / np.sqrt(run.n)
    return ConfidenceRegion(1 - alpha, np.array([estimate.lower - scale * half[0]]),
                            np.array([estimate.upper + scale * half[1]]), c,
                            RegionKind.POINTWISE_SET)


def uniform_band(estimate, run, alpha=0.05):
    """Sup-t band for the support function over the grid.

    Draws are centred at the point estimate and studentized by their
    bootstrap SD; the critical value is the (1 - alpha) quantile of the
    maximum absolute studentized deviation. Grid points with zero SD are
    left out of the maximum and get a zero-width band.
    """
    values = as_vector(estimate)
    if len(values) < 1:
        raise InvalidArgument("empty grid")
    if run.B < 100:
        raise InvalidArgument("uniform band needs B >= 100")
    sd = (run.draws - run.draws[0]).std(axis=0, ddof=1)
    ok = sd > 0
    if not ok.all():
        log.warning("%d grid points with zero bootstrap SD excluded", int((~ok).sum()))
    if not ok.any():
        return ConfidenceRegion(1 - alpha, values.copy(), values.copy(), 0.0,
                                RegionKind.UNIFORM_BAND)
    t = np.abs(run.draws[:, ok] - values[ok]) / sd[ok]
    crit = float(np.quantile(t.max(axis=1), 1 - alpha))
    return ConfidenceRegion(1 - alpha, values - crit * sd, values + crit * sd, crit,
                            RegionKind.UNIFORM_BAND)
