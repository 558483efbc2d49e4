"""Moment functions for the three models and a finite-difference orthogonality probe.

All functions are vectorized: ``obs`` is a :class:`~setid_dml.dataset.Dataset`
(one row per observation) and a nuisance record is a mapping from component
name to per-observation arrays, as produced by :mod:`setid_dml.crossfit`.

Each moment returns a :class:`MomentValue` with the non-orthogonal part ``m``,
the bias-correction term and their sum ``g``.
"""

from dataclasses import dataclass

import numpy as np

from scipy.special import ndtr

from .dataset import PROB_FLOOR
from .errors import DegenerateError, IncompleteProfileError, InvalidArgument, ProjectionSetError

LAMBDA_MIN = 1e-4
LAMBDA_MAX = 1e4


@dataclass(frozen=True, eq=False)
class ProjectionVector:
    """Projection ``p = (Sigma^{-1})' q`` of a direction ``q``.

    ``lambda_min`` and ``lambda_max`` bound the eigenvalues of Sigma; when
    Sigma is estimated its eigenvalues must stay within
    ``[0.5 * lambda_min, 2 * lambda_max]``, which keeps ``|p|`` bounded.
    """

    p: np.ndarray
    source_q: np.ndarray | None = None
    lambda_min: float = LAMBDA_MIN
    lambda_max: float = LAMBDA_MAX

    @classmethod
    def from_sigma(cls, q, sigma, lambda_min=LAMBDA_MIN, lambda_max=LAMBDA_MAX, estimated=True):
        sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
        eig = np.linalg.eigvalsh(sigma)
        lo, hi = (0.5 * lambda_min, 2 * lambda_max) if estimated else (lambda_min, lambda_max)
        bad = eig[(eig < lo) | (eig > hi)]
        if len(bad):
            raise ProjectionSetError(f"Sigma eigenvalue {bad[0]:.6g} outside [{lo:.3g}, {hi:.3g}]")
        q = np.atleast_1d(np.asarray(q, dtype=float))
        return cls(np.linalg.solve(sigma.T, q), q, lambda_min, lambda_max)


@dataclass(frozen=True, eq=False)
class MomentValue:
    g: np.ndarray
    m: np.ndarray
    correction: np.ndarray
    model: str


def _vec(p):
    if isinstance(p, ProjectionVector):
        p = p.p
    return np.atleast_1d(np.asarray(p, dtype=float))


def _need(record, *names):
    missing = [k for k in names if k not in record or record[k] is None]
    if missing:
        raise IncompleteProfileError(f"nuisance record lacks {', '.join(missing)}")


def q_generator(y_lower, y_upper, z):
    """Interval endpoint selected by the sign of ``z``: lower if z <= 0, else upper."""
    y_lower = np.asarray(y_lower, dtype=float)
    y_upper = np.asarray(y_upper, dtype=float)
    if np.any(y_lower > y_upper):
        raise InvalidArgument("y_lower > y_upper")
    out = np.where(np.asarray(z) > 0, y_upper, y_lower)
    return out[()] if out.ndim == 0 else out


def _step(a, smooth=None):
    """1{a >= 0}, or its Gaussian-cdf smoothing with bandwidth ``smooth``."""
    if smooth is None:
        return (np.asarray(a) >= 0).astype(float)
    return ndtr(np.asarray(a) / smooth)


def _generator(y_lower, y_upper, z, smooth):
    if smooth is None:
        return q_generator(y_lower, y_upper, z)
    return y_lower + (y_upper - y_lower) * ndtr(z / smooth)


def plp_gamma(record):
    """Reduced form gamma(p, X) = gamma_L + gamma_{U-L} / 2 under symmetric residuals."""
    return record["gamma_l"] + 0.5 * record["gamma_width"]


def plp_moment(obs, p, record, smooth=None):
    """Partially linear predictor moment for projection vector ``p``.

    ``g = p'V (Y_p - gamma)``, ``m = p'V Y_p`` with ``V = D - eta(X)``.
    ``smooth`` replaces the generator's indicator by a normal cdf (probe use only).
    """
    _need(record, "eta", "gamma_l", "gamma_width")
    p = _vec(p)
    z = (obs.d - record["eta"]) @ p
    yp = _generator(obs.y_lower, obs.y_upper, z, smooth)
    m = z * yp
    corr = -z * plp_gamma(record)
    return MomentValue(m + corr, m, corr, "PLP")


def apd_moment(obs, q, record, smooth=None):
    """Average partial derivative moment for direction ``q``.

    ``g = z Y_q - z gamma_q + q' d/dD gamma_q`` with ``z = q' eta(D, X)``.

    The D-derivative of ``gamma_q`` contains the jump of the indicator
    ``1{z > 0}``. When the record carries the residual covariance ``Lambda``
    that jump is included: with ``smooth=None`` its expectation over a
    Gaussian first-stage residual, ``gamma_{U-L} sqrt(q' Lambda^{-1} q / 2 pi)``;
    with a bandwidth, the derivative of the smoothed indicator. Records
    without ``Lambda`` use the almost-everywhere derivative only.
    """
    _need(record, "eta", "gamma_l", "gamma_width", "gamma_l_grad", "gamma_width_grad")
    q = _vec(q)
    z = record["eta"] @ q
    up = (z > 0).astype(float) if smooth is None else ndtr(z / smooth)
    yq = _generator(obs.y_lower, obs.y_upper, z, smooth)
    gamma_q = record["gamma_l"] + record["gamma_width"] * up
    grad_q = (record["gamma_l_grad"] + record["gamma_width_grad"] * up[:, None]) @ q
    if "Lambda" in record:
        curv = float(q @ np.linalg.solve(np.atleast_2d(record["Lambda"]), q))
        if smooth is None:
            jump = np.sqrt(curv / (2 * np.pi))
        else:
            jump = curv * np.exp(-0.5 * (z / smooth) ** 2) / (smooth * np.sqrt(2 * np.pi))
        grad_q = grad_q + record["gamma_width"] * jump
    m = z * yq
    corr = -z * gamma_q + grad_q
    return MomentValue(m + corr, m, corr, "APD")


# -- selection model -----------------------------------------------------------

def trimming_share(s0, s1):
    """p0(X) = s(0,X) / s(1,X), clipped to [PROB_FLOOR, 1]."""
    return np.clip(np.asarray(s0) / np.asarray(s1), PROB_FLOOR, 1.0)


def lee_record(obs, s0, s1, quantile, pi1=None, gamma_control=None, p_d0s1=None):
    """Assemble a selection-model record from nuisance values.

    ``quantile(u, x)`` is the conditional quantile of Y given D=1, S=1, X.
    Thresholds are evaluated at the trimming share implied by ``s0, s1``.
    ``p_d0s1`` defaults to the sample frequency of (D=0, S=1).
    """
    s0 = np.asarray(s0, dtype=float)
    s1 = np.asarray(s1, dtype=float)
    p0 = trimming_share(s0, s1)
    if pi1 is None:
        pi1 = np.full(obs.n, 0.5)
    if p_d0s1 is None:
        p_d0s1 = float(np.mean((1 - obs.d[:, 0]) * obs.s))
    rec = {"s0": s0, "s1": s1, "pi1": np.asarray(pi1, dtype=float), "p0": p0,
           "q_upper": np.asarray(quantile(1 - p0, obs.x), dtype=float),
           "q_lower": np.asarray(quantile(p0, obs.x), dtype=float),
           "p_d0s1": p_d0s1}
    if gamma_control is not None:
        rec["gamma_control"] = np.asarray(gamma_control, dtype=float)
    return rec


def _lee_parts(obs, record):
    _need(record, "s0", "s1", "pi1", "q_upper", "q_lower", "p_d0s1")
    s0, s1, pi1 = record["s0"], record["s1"], record["pi1"]
    pi0 = 1 - pi1
    floor = PROB_FLOOR * (1 - 1e-9)
    for name, arr in (("s(0,X)", s0), ("s(1,X)", s1), ("Pr(D=1|X)", pi1), ("Pr(D=0|X)", pi0)):
        bad = np.flatnonzero(arr < floor)
        if len(bad):
            raise DegenerateError(f"{name} below probability floor at rows {bad[:10].tolist()}",
                                  rows=bad)
    big_p = float(record["p_d0s1"])
    if not big_p > 0:
        raise DegenerateError("no observations with D = 0 and S = 1")
    d = obs.d[:, 0]
    s = obs.s
    sel = (d == 1) & (s == 1)
    y = np.where(s == 1, obs.y, 0.0)
    p0 = trimming_share(s0, s1)
    return d, s, y, sel, s0, s1, pi1, pi0, big_p, p0


def _lee_bound(obs, record, upper, smooth=None):
    d, s, y, sel, s0, s1, pi1, pi0, big_p, p0 = _lee_parts(obs, record)
    t = record["q_upper"] if upper else record["q_lower"]
    below = _step(t - y, smooth)
    keep = _step(y - t, smooth) if upper else below
    scale = pi0 / (big_p * pi1)
    m = np.where(sel, y * keep, 0.0) * scale
    # first-stage selection probabilities: s(0,X) and s(1,X)
    a_s0 = t * pi0 / big_p * ((1 - d) * s / pi0 - s0)
    a_s1 = -t * pi0 * s0 / (big_p * s1) * (d * s / pi1 - s1)
    # quantile threshold, density-cancelled and restricted to the D=1, S=1 cell
    if upper:
        a_q = t * scale * sel * (below - (1 - p0))
    else:
        a_q = -t * scale * sel * (below - p0)
    corr = a_s0 + a_s1 + a_q
    return MomentValue(m + corr, m, corr, "LEE")


def lee_upper_moment(obs, record, smooth=None):
    """Orthogonal moment for the upper trimmed-mean bound on E[Y(1) | always selected].

    ``m_U = D S Y 1{Y >= y_(1-p0)} Pr(D=0|X) / (Pr(D=0,S=1) Pr(D=1|X))`` plus
    correction terms for s(0,X), s(1,X) and the quantile threshold.
    """
    return _lee_bound(obs, record, upper=True, smooth=smooth)


def lee_lower_moment(obs, record, smooth=None):
    """Orthogonal moment for the lower trimmed-mean bound (trimming from above)."""
    return _lee_bound(obs, record, upper=False, smooth=smooth)


def lee_ate_moments(obs, record, variant="printed"):
    """Per-observation contributions to the lower and upper treatment-effect bounds.

    Both subtract the control-arm term ``(1-D) S Y / (Pr(D=0|X) s(0,X))`` and
    add a correction proportional to ``(1-D) S / Pr(D=0|X) - s(0,X)``.

    ``variant="printed"`` uses coefficient ``-gamma(X)`` for the lower bound and
    ``-gamma(X) / s(0,X)^2`` for the upper bound. ``variant="orthogonal"`` uses
    ``+gamma(X) / s(0,X)`` for both, the coefficient that makes the control
    term insensitive to first-order errors in s(0,X).
    """
    _need(record, "gamma_control")
    d, s, y, sel, s0, s1, pi1, pi0, big_p, p0 = _lee_parts(obs, record)
    gamma = record["gamma_control"]
    control = (1 - d) * s * y / (pi0 * s0)
    resid = (1 - d) * s / pi0 - s0
    g_l = lee_lower_moment(obs, record).g
    g_u = lee_upper_moment(obs, record).g
    if variant == "printed":
        theta_l = g_l - control - gamma * resid
        theta_u = g_u - control - gamma / s0 ** 2 * resid
    elif variant == "orthogonal":
        theta_l = g_l - control + gamma / s0 * resid
        theta_u = g_u - control + gamma / s0 * resid
    else:
        raise InvalidArgument(f"unknown variant {variant!r}")
    return theta_l, theta_u


# -- orthogonality probe -------------------------------------------------------

@dataclass(frozen=True)
class GateauxResult:
    derivative: float
    second_order_residual: float
    curvature: float
    se: float
    h: float

    @property
    def bound(self):
        """Tolerance 5 * (sampling SE + |curvature| h^2) for a zero derivative."""
        return 5 * (self.se + abs(self.curvature) * self.h ** 2)


def gateaux_probe(moment, obs, record, perturbation, h=1e-3, use="g", build=None, smooth=None):
    """Central-difference derivative of the mean moment along a nuisance direction.

    Parameters
    ----------
    moment : callable
        ``moment(obs, record) -> MomentValue``; bind directions with
        ``functools.partial``.
    record : mapping
        Nuisance values at the point of evaluation (normally the truth).
    perturbation : mapping
        Component name -> direction array; ``record[k] + r * perturbation[k]``.
    use : {"g", "m"}
        Orthogonal moment or its non-orthogonal part.
    build : callable, optional
        Maps the perturbed record to the one passed to ``moment`` (used when
        some entries, such as quantile thresholds, are derived from others).
    smooth : float, optional
        Bandwidth forwarded to ``moment`` to replace indicators by normal
        cdfs. With hard indicators only a handful of rows change sign at
        small ``h``, which makes the difference quotient noisy.

    Returns
    -------
    GateauxResult
        ``derivative = (F(h) - F(-h)) / 2h``, the curvature
        ``(F(h) - 2F(0) + F(-h)) / h^2``, the remainder ``F(h) - F(0) - h * derivative``
        and the sampling SE of the per-observation difference quotients.
    """
    if not h > 0:
        raise InvalidArgument("h must be positive")

    def values(r):
        rec = dict(record)
        for k, direction in perturbation.items():
            rec[k] = np.asarray(record[k]) + r * np.asarray(direction)
        if build is not None:
            rec = build(rec)
        kw = {} if smooth is None else {"smooth": smooth}
        return getattr(moment(obs, rec, **kw), use)

    plus, zero, minus = values(h), values(0.0), values(-h)
    quot = (plus - minus) / (2 * h)
    deriv = float(np.mean(quot))
    f_plus, f_zero, f_minus = float(np.mean(plus)), float(np.mean(zero)), float(np.mean(minus))
    curv = (f_plus - 2 * f_zero + f_minus) / h ** 2
    se = float(np.std(quot, ddof=1) / np.sqrt(len(quot))) if len(quot) > 1 else 0.0
    return GateauxResult(deriv, f_plus - f_zero - h * deriv, curv, se, h)
