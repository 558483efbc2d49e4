"""First-stage learners behind a common fit/predict interface.

Penalized least squares and penalized logistic regression are solved by
cyclic coordinate descent on the (weighted) Gram matrix. The conditional
quantile learner stores sorted outcomes per discrete covariate cell.
"""

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from . import _rng
from .dataset import PROB_FLOOR, kfold_partition
from .errors import ConvergenceError, InvalidArgument, MissingCellError, UnsupportedError


class Kind(str, enum.Enum):
    LASSO = "LASSO"
    LOGISTIC_LASSO = "LOGISTIC_LASSO"
    EMPIRICAL_QUANTILE = "EMPIRICAL_QUANTILE"
    ORACLE = "ORACLE"
    # intercept-only fit; handy as a transparent reference learner
    MEAN = "MEAN"
    # lasso that partially interpolates its own training rows
    MEMORIZING = "MEMORIZING"


@dataclass(frozen=True)
class Penalty:
    """Penalty rule: ``PLUGIN`` (times ``scale``), ``FIXED`` at ``lam`` or ``CV`` over ``folds``."""

    kind: str = "PLUGIN"
    lam: float = 0.0
    folds: int = 5
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in ("PLUGIN", "FIXED", "CV"):
            raise InvalidArgument(f"unknown penalty kind {self.kind!r}")
        if self.kind == "FIXED" and not self.lam >= 0:
            raise InvalidArgument("FIXED penalty needs lam >= 0")
        if self.kind == "CV" and self.folds < 2:
            raise InvalidArgument("CV penalty needs at least 2 folds")
        if self.scale <= 0:
            raise InvalidArgument("penalty scale must be positive")

    @classmethod
    def fixed(cls, lam):
        return cls("FIXED", lam=float(lam))

    @classmethod
    def cv(cls, folds=5):
        return cls("CV", folds=int(folds))

    @classmethod
    def plugin(cls, scale=1.0):
        return cls("PLUGIN", scale=float(scale))

    def to_dict(self):
        return {"kind": self.kind, "lam": self.lam, "folds": self.folds, "scale": self.scale}


@dataclass(frozen=True)
class LearnerSpec:
    kind: Kind = Kind.LASSO
    penalty: Penalty = field(default_factory=Penalty)
    quantile_cells: tuple = ()
    max_iter: int = 10_000
    tol: float = 1e-7
    jitter_sd: float | None = None
    # share of the training residual added back on training rows (MEMORIZING)
    memorize: float = 0.5
    # refit OLS on the selected support (LASSO and MEMORIZING)
    post_selection: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        object.__setattr__(self, "quantile_cells", tuple(int(c) for c in self.quantile_cells))
        if isinstance(self.penalty, dict):
            object.__setattr__(self, "penalty", Penalty(**self.penalty))
        if not self.tol > 0:
            raise InvalidArgument("tol must be positive")
        if self.max_iter < 1:
            raise InvalidArgument("max_iter must be positive")
        if not 0 <= self.memorize < 1:
            raise InvalidArgument("memorize must lie in [0, 1)")

    def to_dict(self):
        return {"kind": self.kind.value, "penalty": self.penalty.to_dict(),
                "quantile_cells": list(self.quantile_cells), "max_iter": self.max_iter,
                "tol": self.tol, "jitter_sd": self.jitter_sd, "memorize": self.memorize,
                "post_selection": self.post_selection}


@dataclass(frozen=True, eq=False)
class FittedModel:
    """Result of a fit. ``predict`` is a pure function of the model and ``x``."""

    kind: Kind
    coefficients: np.ndarray = None
    intercept: float = 0.0
    cell_quantile_tables: dict = None
    cells: tuple = ()
    training_fold: int | None = None
    lam: float | None = None
    n_iter: int = 0
    # MEMORIZING only: training rows and the residual share to add back
    memory: dict = field(default=None, repr=False)

    def linear_predictor(self, x):
        x = np.asarray(x, dtype=float)
        return self.intercept + x @ self.coefficients

    def predict(self, x):
        if self.kind is Kind.EMPIRICAL_QUANTILE:
            raise InvalidArgument("quantile models are evaluated with quantile(u, x)")
        out = self.linear_predictor(x)
        if self.kind is Kind.LOGISTIC_LASSO:
            return np.clip(expit(out), PROB_FLOOR, 1 - PROB_FLOOR)
        if self.kind is Kind.MEMORIZING and self.memory:
            x = np.ascontiguousarray(x, dtype=float)
            table = self.memory["residual"]
            extra = np.array([table.get(row.tobytes(), 0.0) for row in x])
            out = out + self.memory["share"] * extra
        return out

    def gradient_at(self, x):
        """d predict / d x for the linear kinds, one row per point of ``x``."""
        return np.tile(self.coefficients, (len(x), 1))

    def quantile(self, u, x):
        """Linearly interpolated empirical u-quantile of each row's cell."""
        if self.kind is not Kind.EMPIRICAL_QUANTILE:
            raise InvalidArgument("not a quantile model")
        x = np.asarray(x, dtype=float)
        u = np.broadcast_to(np.asarray(u, dtype=float), (len(x),))
        if np.any((u < 0) | (u > 1)):
            raise InvalidArgument("quantile level must lie in [0, 1]")
        keys = _cell_keys(x, self.cells)
        out = np.empty(len(x))
        for key in dict.fromkeys(keys):
            if key not in self.cell_quantile_tables:
                raise MissingCellError(key)
            rows = np.array([k == key for k in keys])
            v = self.cell_quantile_tables[key]
            h = (len(v) - 1) * u[rows]
            lo = np.floor(h).astype(int)
            hi = np.minimum(lo + 1, len(v) - 1)
            out[rows] = v[lo] + (h - lo) * (v[hi] - v[lo])
        return out


def _cell_keys(x, cells):
    if not cells:
        return [()] * len(x)
    return [tuple(float(v) for v in row) for row in x[:, list(cells)]]


def _check_xy(x, y):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.ndim != 2 or y.ndim != 1 or x.shape[0] != y.shape[0]:
        raise InvalidArgument("x must be n-by-p and y length n")
    if x.shape[0] < 2:
        raise InvalidArgument("need at least 2 observations")
    if not (np.isfinite(x).all() and np.isfinite(y).all()):
        raise InvalidArgument("non-finite values in learner input")
    return x, y


def _soft(a, lam):
    return math.copysign(max(abs(a) - lam, 0.0), a)


def _kkt_violation(grad, beta, lam):
    nz = beta != 0
    v = np.where(nz, np.abs(grad - lam * np.sign(beta)), np.maximum(np.abs(grad) - lam, 0.0))
    return float(v.max()) if len(v) else 0.0


def _lasso_gram(gram, corr, lam, beta, max_iter, tol):
    """Minimize 0.5 b'Gb - c'b + lam*|b|_1 by cyclic coordinate descent.

    Returns (beta, sweeps). Convergence is declared when the largest
    soft-threshold KKT violation falls below ``tol``.
    """
    beta = beta.copy()
    diag = np.diag(gram).copy()
    live = np.flatnonzero(diag > 0)
    beta[diag <= 0] = 0.0
    grad = corr - gram @ beta

    def cd_pass(idx):
        largest = 0.0
        for j in idx:
            old = beta[j]
            new = _soft(grad[j] + diag[j] * old, lam) / diag[j]
            if new != old:
                grad[:] -= gram[:, j] * (new - old)
                beta[j] = new
                largest = max(largest, abs(new - old) * diag[j])
        return largest

    for sweep in range(1, max_iter + 1):
        cd_pass(live)
        # iterate on the active set until it settles, then re-check everything
        for _ in range(max_iter):
            if cd_pass(live[beta[live] != 0]) <= 0.1 * tol:
                break
        grad[:] = corr - gram @ beta
        if len(live) == 0 or _kkt_violation(grad[live], beta[live], lam) <= tol:
            return beta, sweep
    raise ConvergenceError("coordinate descent did not converge", max_iter)


def _weighted_center(x, w):
    xm = (w @ x) / w.sum()
    return x - xm, xm


def _ridge_sigma(x, y):
    """Residual scale from a ridge fit with GCV-chosen penalty."""
    n = len(y)
    xc = x - x.mean(axis=0)
    yc = y - y.mean()
    u, d, _ = np.linalg.svd(xc, full_matrices=False)
    uy = u.T @ yc
    resid0 = yc @ yc - uy @ uy
    best = None
    top = max(d[0] ** 2, 1e-12) if len(d) else 1.0
    for alpha in top * np.logspace(-6, 2, 60):
        shrink = d ** 2 / (d ** 2 + alpha)
        df = shrink.sum()
        rss = resid0 + np.sum(((1 - shrink) * uy) ** 2)
        denom = n - 1 - df
        if denom <= 0.5:
            continue
        gcv = rss / denom ** 2
        if best is None or gcv < best[0]:
            best = (gcv, rss / denom)
    if best is None:
        return float(np.std(y))
    return math.sqrt(max(best[1], 0.0))


def plugin_lambda(x, y, scale=1.0):
    """Plug-in penalty sigma_hat * sqrt(2 log(2pn) / n)."""
    n, p = x.shape
    return scale * _ridge_sigma(x, y) * math.sqrt(2 * math.log(2 * p * n) / n)


def _lasso_path_fit(x, y, lam, spec, beta_start=None):
    xc, xm = _weighted_center(x, np.ones(len(y)))
    ym = y.mean()
    n = len(y)
    gram = xc.T @ xc / n
    corr = xc.T @ (y - ym) / n
    start = np.zeros(x.shape[1]) if beta_start is None else beta_start
    beta, sweeps = _lasso_gram(gram, corr, lam, start, spec.max_iter, spec.tol)
    return beta, ym - xm @ beta, sweeps


def _lambda_max(x, y):
    xc = x - x.mean(axis=0)
    return float(np.max(np.abs(xc.T @ (y - y.mean())) / len(y))) if x.shape[1] else 0.0


def _cv_lambda(x, y, spec, fit_fn, loss_fn, lam_max):
    part = kfold_partition(len(y), spec.penalty.folds, seed=0)
    grid = lam_max * np.logspace(0, -3, 30)
    loss = np.zeros(len(grid))
    for k in range(1, part.K + 1):
        te = part.rows(k)
        tr = part.assignments != k
        beta = None
        for g, lam in enumerate(grid):
            beta, b0 = fit_fn(x[tr], y[tr], lam, beta)
            loss[g] += loss_fn(y[te], b0 + x[te] @ beta)
    return float(grid[int(np.argmin(loss))])


def _resolve_lambda(x, y, spec, fit_fn, loss_fn, lam_max, plugin):
    pen = spec.penalty
    if pen.kind == "FIXED":
        return pen.lam
    if pen.kind == "PLUGIN":
        return plugin
    return _cv_lambda(x, y, spec, fit_fn, loss_fn, lam_max)


def _refit_support(x, y, beta, b0):
    """Least squares on the lasso support; keeps the lasso fit if that is not identified."""
    support = np.flatnonzero(beta)
    if support.size == 0 or support.size >= len(y) - 1:
        return beta, b0
    design = np.column_stack([np.ones(len(y)), x[:, support]])
    coef, _, rank, _ = np.linalg.lstsq(design, y, rcond=None)
    if rank < design.shape[1]:
        return beta, b0
    out = np.zeros_like(beta)
    out[support] = coef[1:]
    return out, float(coef[0])


def fit_lasso(x, y, spec=None):
    """Penalized least squares with unpenalized intercept.

    Minimizes ``(1/2n) sum (y_i - b0 - x_i'b)^2 + lam * |b|_1``.
    """
    spec = spec or LearnerSpec()
    x, y = _check_xy(x, y)

    def fit_fn(xt, yt, lam, start):
        beta, b0, _ = _lasso_path_fit(xt, yt, lam, spec, start)
        return beta, b0

    plugin = None
    if spec.penalty.kind == "PLUGIN":
        plugin = plugin_lambda(x, y, spec.penalty.scale)
    lam = _resolve_lambda(x, y, spec, fit_fn, lambda a, b: float(np.sum((a - b) ** 2)),
                          _lambda_max(x, y), plugin)
    beta, b0, sweeps = _lasso_path_fit(x, y, lam, spec)
    if spec.post_selection:
        beta, b0 = _refit_support(x, y, beta, b0)
    return FittedModel(Kind.LASSO, coefficients=beta, intercept=float(b0), lam=lam, n_iter=sweeps)


SEPARATION_TOL = 1e-4


def _logistic_fit(x, y, lam, spec, start=None):
    """IRLS outer loop with a weighted lasso inner solve."""
    n, p = x.shape
    beta = np.zeros(p) if start is None else start[0].copy()
    b0 = math.log(y.mean() / (1 - y.mean())) if start is None else start[1]

    def objective(b0_, beta_):
        eta = b0_ + x @ beta_
        return float(np.mean(np.logaddexp(0, eta) - y * eta) + lam * np.abs(beta_).sum())

    obj = objective(b0, beta)
    for it in range(1, spec.max_iter + 1):
        eta = b0 + x @ beta
        mu = expit(eta)
        w = np.maximum(mu * (1 - mu), 1e-5)
        z = eta + (y - mu) / w
        xc, xm = _weighted_center(x, w)
        zm = (w @ z) / w.sum()
        gram = xc.T @ (w[:, None] * xc) / n
        corr = xc.T @ (w * (z - zm)) / n
        new_beta, _ = _lasso_gram(gram, corr, lam, beta, spec.max_iter, spec.tol * 0.1)
        new_b0 = zm - xm @ new_beta
        # step halving keeps the penalized deviance monotone
        step = 1.0
        while True:
            cand_beta = beta + step * (new_beta - beta)
            cand_b0 = b0 + step * (new_b0 - b0)
            cand = objective(cand_b0, cand_beta)
            if cand <= obj + 1e-12 or step < 1e-6:
                break
            step /= 2
        change = max(abs(cand_b0 - b0), float(np.max(np.abs(cand_beta - beta), initial=0.0)))
        beta, b0, obj = cand_beta, cand_b0, cand
        if change <= spec.tol:
            return beta, float(b0), it
        # separated data: coefficients diverge, so stop once every label is fitted
        if np.all(np.abs(y - expit(b0 + x @ beta)) < SEPARATION_TOL):
            return beta, float(b0), it
    raise ConvergenceError("IRLS did not converge", spec.max_iter)


def fit_logistic_lasso(x, y, spec=None):
    """L1-penalized logistic regression; predictions are clamped probabilities."""
    spec = spec or LearnerSpec(kind=Kind.LOGISTIC_LASSO)
    x, y = _check_xy(x, y)
    if not np.isin(y, (0.0, 1.0)).all():
        raise InvalidArgument("logistic response must be 0/1")
    if y.min() == y.max():
        raise InvalidArgument("logistic response has a single class")

    def fit_fn(xt, yt, lam, start):
        if yt.min() == yt.max():
            return np.zeros(xt.shape[1]), math.log(PROB_FLOOR)
        beta, b0, _ = _logistic_fit(xt, yt, lam, spec, None if start is None else (start, 0.0))
        return beta, b0

    def loss_fn(yt, eta):
        return float(np.sum(np.logaddexp(0, eta) - yt * eta))

    n, p = x.shape
    xc = x - x.mean(axis=0)
    lam_max = float(np.max(np.abs(xc.T @ (y - y.mean())) / n)) if p else 0.0
    # score of the logistic likelihood is bounded by 1, with sd at most 1/2
    plugin = spec.penalty.scale * 0.5 * math.sqrt(2 * math.log(2 * p * n) / n)
    lam = _resolve_lambda(x, y, spec, fit_fn, loss_fn, lam_max, plugin)
    beta, b0, it = _logistic_fit(x, y, lam, spec)
    return FittedModel(Kind.LOGISTIC_LASSO, coefficients=beta, intercept=b0, lam=lam, n_iter=it)


def fit_mean(x, y, spec=None):
    x, y = _check_xy(x, y)
    return FittedModel(Kind.MEAN, coefficients=np.zeros(x.shape[1]), intercept=float(y.mean()))


def fit_memorizing(x, y, spec=None):
    """Lasso fit plus memory of its own training residuals.

    On a training row the prediction moves ``spec.memorize`` of the way
    toward the observed label; elsewhere it equals the lasso prediction.
    """
    spec = spec or LearnerSpec(kind=Kind.MEMORIZING)
    base = fit_lasso(x, y, LearnerSpec(Kind.LASSO, spec.penalty, max_iter=spec.max_iter, tol=spec.tol,
                                       post_selection=spec.post_selection))
    x = np.ascontiguousarray(x, dtype=float)
    resid = np.asarray(y, dtype=float) - base.predict(x)
    table = {row.tobytes(): float(r) for row, r in zip(x, resid)}
    return FittedModel(Kind.MEMORIZING, coefficients=base.coefficients, intercept=base.intercept,
                       lam=base.lam, n_iter=base.n_iter,
                       memory={"residual": table, "share": spec.memorize})


def fit_conditional_quantile(x, y, cells=(), jitter_sd=None, seed=None):
    """Store sorted outcomes per cell of the discrete covariates ``cells``.

    With ``jitter_sd`` set, N(0, jitter_sd^2) noise (stream keyed by ``seed``)
    is added to the outcomes before sorting to break ties.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if not np.isfinite(y).all():
        raise InvalidArgument("quantile learner needs observed outcomes")
    if jitter_sd:
        y = y + jitter_sd * _rng.substream(seed or 0, "jitter").standard_normal(len(y))
    keys = _cell_keys(x, tuple(cells))
    groups = {}
    for key, v in zip(keys, y):
        groups.setdefault(key, []).append(v)
    tables = {}
    for key, vals in groups.items():
        if len(vals) < 2:
            raise InvalidArgument(f"quantile cell {key!r} has fewer than 2 observations")
        arr = np.sort(np.asarray(vals))
        arr.setflags(write=False)
        tables[key] = arr
    return FittedModel(Kind.EMPIRICAL_QUANTILE, cell_quantile_tables=tables, cells=tuple(cells))


@dataclass(frozen=True, eq=False)
class OracleModel:
    """Learner stand-in returning a true nuisance function of the design."""

    kind: Kind
    fn: object
    grad_fn: object = None
    training_fold: int | None = None

    def predict(self, *args):
        return self.fn(*args)

    def quantile(self, u, x):
        return self.fn(u, x)

    def gradient_at(self, x):
        if self.grad_fn is None:
            raise UnsupportedError("oracle nuisance has no gradient")
        return self.grad_fn(x)


def oracle_learner(truth, component, gradient=None):
    """Return a model whose predictions are the true nuisance ``component``.

    ``component`` (and optionally ``gradient``) name
    :class:`~setid_dml.dataset.DgpTruth` methods, e.g. ``"m0"``, ``"s0"``,
    ``"quantile"``.
    """
    if truth is None:
        raise UnsupportedError("oracle learner needs data generated by this package")

    def lookup(name):
        fn = getattr(truth, name, None)
        if fn is None or not callable(fn):
            raise UnsupportedError(f"design has no nuisance {name!r}")
        return fn

    return OracleModel(Kind.ORACLE, lookup(component), None if gradient is None else lookup(gradient))


_FITTERS = {
    Kind.LASSO: fit_lasso,
    Kind.LOGISTIC_LASSO: fit_logistic_lasso,
    Kind.MEAN: fit_mean,
    Kind.MEMORIZING: fit_memorizing,
}


def fit(spec, x, y):
    """Dispatch on ``spec.kind`` for the regression-type learners."""
    try:
        fitter = _FITTERS[spec.kind]
    except KeyError:
        raise InvalidArgument(f"{spec.kind.value} is not a regression learner") from None
    return fitter(x, y, spec)
