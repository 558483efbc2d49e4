"""Observations, synthetic data-generating processes and fold partitions.

Three synthetic designs are provided:

* PLP: partially linear predictor with an interval-valued outcome,
  ``D = eta0(X) + V`` and ``Y = D'beta0 + f0(X) + U``.
* APD: the same Gaussian design read as an average partial derivative
  problem, with weighting variable ``Lambda^{-1} (D - m0(X))``.
* LEE: randomized treatment with monotone endogenous selection.

Every generated dataset carries a :class:`DgpTruth` so that oracle
learners and analytic checks can evaluate the true nuisance functions.
"""

import csv
import dataclasses
import enum
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr, ndtri

from . import _rng
from .errors import InvalidArgument, SchemaError, ValidationError

PROB_FLOOR = 1e-6


class Model(str, enum.Enum):
    PLP = "PLP"
    APD = "APD"
    LEE = "LEE"


def _frozen(a, dtype=float, ndim=None):
    if a is None:
        return None
    arr = np.array(a, dtype=dtype, copy=True)
    if ndim == 2 and arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable table of observations W = (D, X, S, Y, Y_L, Y_U).

    Missing optional columns are ``None``; a missing cell inside a present
    column is ``nan`` (only ``y`` may have missing cells, for unselected
    rows of the selection model).
    """

    d: np.ndarray
    x: np.ndarray
    s: np.ndarray | None = None
    y: np.ndarray | None = None
    y_lower: np.ndarray | None = None
    y_upper: np.ndarray | None = None
    truth: "DgpTruth | None" = field(default=None, repr=False)

    def __post_init__(self):
        set_ = object.__setattr__
        set_(self, "d", _frozen(self.d, ndim=2))
        set_(self, "x", _frozen(self.x, ndim=2))
        for name in ("s", "y", "y_lower", "y_upper"):
            set_(self, name, _frozen(getattr(self, name)))
        n = self.d.shape[0]
        if self.x.shape[0] != n:
            raise InvalidArgument("d and x must have the same number of rows")
        for name in ("s", "y", "y_lower", "y_upper"):
            col = getattr(self, name)
            if col is not None and col.shape != (n,):
                raise InvalidArgument(f"column {name} must have length {n}")

    @property
    def n(self):
        return self.d.shape[0]

    @property
    def k(self):
        return self.d.shape[1]

    @property
    def p(self):
        return self.x.shape[1]

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def take(self, rows):
        """Row subset (keeps the truth handle)."""
        rows = np.asarray(rows)
        cols = {}
        for name in ("s", "y", "y_lower", "y_upper"):
            col = getattr(self, name)
            cols[name] = None if col is None else col[rows]
        return Dataset(self.d[rows], self.x[rows], truth=self.truth, **cols)


@dataclass(frozen=True)
class FoldPartition:
    assignments: np.ndarray
    K: int
    seed: int

    def rows(self, k):
        """Indices of observations in fold ``k`` (1-based)."""
        return np.flatnonzero(self.assignments == k)

    def sizes(self):
        return np.bincount(self.assignments, minlength=self.K + 1)[1:]


def kfold_partition(n, K, seed):
    """Uniformly random partition of ``range(n)`` into ``K`` folds.

    Fold sizes are ``floor(n/K)`` or ``ceil(n/K)``; the folds that receive
    the extra rows are the first ``n mod K`` labels in shuffled order.
    """
    n, K = int(n), int(K)
    if K < 2 or K > n:
        raise InvalidArgument(f"need 2 <= K <= n, got K={K}, n={n}")
    perm = _rng.substream(seed, "folds", n, K).permutation(n)
    assignments = np.empty(n, dtype=np.int64)
    assignments[perm] = np.arange(n) % K + 1
    assignments.setflags(write=False)
    return FoldPartition(assignments, K, int(seed))


@dataclass(frozen=True)
class DgpSpec:
    """Parameters of a synthetic design.

    ``beta0`` sets the dimension of D for PLP/APD; for LEE it is the scalar
    treatment effect on the outcome. ``selection_shift`` moves the selection
    index under treatment (LEE only); zero means treatment does not affect
    selection, so the trimming share is identically one.
    """

    model: Model
    n: int
    p: int
    sparsity: int
    beta0: tuple = (1.0,)
    interval_width: float = 1.0
    noise_sd: float = 1.0
    residual_sd: float = 1.0
    seed: int = 0
    selection_shift: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "model", Model(self.model))
        object.__setattr__(self, "beta0", tuple(float(b) for b in np.atleast_1d(self.beta0)))
        if self.n < 1 or self.p < 1:
            raise InvalidArgument("n and p must be positive")
        if not 0 <= self.sparsity <= self.p:
            raise InvalidArgument("sparsity must lie in [0, p]")
        if self.interval_width < 0:
            raise InvalidArgument("interval_width must be nonnegative")
        if self.noise_sd <= 0 or self.residual_sd <= 0:
            raise InvalidArgument("noise_sd and residual_sd must be positive")
        if self.selection_shift < 0:
            raise InvalidArgument("selection_shift must be nonnegative (monotone selection)")
        if self.model is Model.LEE and len(self.beta0) != 1:
            raise InvalidArgument("LEE design takes a scalar beta0")

    @property
    def d(self):
        return len(self.beta0)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


class DgpTruth:
    """Population nuisance functions of a :class:`DgpSpec`."""

    # selection index intercept for the LEE design
    LEE_INTERCEPT = 0.5

    def __init__(self, spec):
        self.spec = spec

    # -- PLP / APD ---------------------------------------------------------
    def _support(self, j):
        s, p = self.spec.sparsity, self.spec.p
        return [(j * s + k) % p for k in range(s)]

    def m0(self, x):
        """E[D | X], one column per component of D."""
        x = np.asarray(x, dtype=float)
        cols = [x[:, self._support(j)].sum(axis=1) for j in range(self.spec.d)]
        return np.column_stack(cols)

    def f0(self, x):
        x = np.asarray(x, dtype=float)
        return x[:, self._support(0)].sum(axis=1)

    @property
    def sigma(self):
        """Covariance of the first-stage residual V."""
        return self.spec.residual_sd ** 2 * np.eye(self.spec.d)

    def plp_nuisance(self, x):
        """True (eta, gamma_l, gamma_width) for the partially linear predictor."""
        beta = np.asarray(self.spec.beta0)
        eta = self.m0(x)
        c = self.spec.interval_width
        gamma_l = eta @ beta + self.f0(x) - c / 2
        return {"eta": eta, "gamma_l": gamma_l, "gamma_width": np.full(len(gamma_l), c)}

    def plp_gamma_l(self, x):
        """E[Y_L | X] in the PLP design."""
        c = self.spec.interval_width
        return self.m0(x) @ np.asarray(self.spec.beta0) + self.f0(x) - c / 2

    def gamma_width(self, x):
        """E[Y_U - Y_L | X] (constant) in the PLP/APD designs."""
        return np.full(len(x), float(self.spec.interval_width))

    def _split(self, z):
        z = np.asarray(z, dtype=float)
        return z[:, :self.spec.d], z[:, self.spec.d:]

    def apd_gamma_l(self, z):
        """E[Y_L | D, X] evaluated at stacked features ``z = [d, x]``."""
        d, x = self._split(z)
        return d @ np.asarray(self.spec.beta0) + self.f0(x) - self.spec.interval_width / 2

    def apd_gamma_l_grad(self, z):
        return np.tile(np.asarray(self.spec.beta0), (len(z), 1))

    def apd_gamma_width(self, z):
        return np.full(len(z), float(self.spec.interval_width))

    def apd_gamma_width_grad(self, z):
        return np.zeros((len(z), self.spec.d))

    def apd_nuisance(self, d, x):
        """True APD record: weighting variable, reduced forms and D-gradients."""
        beta = np.asarray(self.spec.beta0)
        d = np.asarray(d, dtype=float).reshape(len(x), -1)
        m = self.m0(x)
        lam = self.spec.residual_sd ** 2
        c = self.spec.interval_width
        n = len(x)
        return {
            "m": m,
            "eta": (d - m) / lam,
            "gamma_l": d @ beta + self.f0(x) - c / 2,
            "gamma_l_grad": np.tile(beta, (n, 1)),
            "gamma_width": np.full(n, c),
            "gamma_width_grad": np.zeros((n, len(beta))),
            "Lambda": lam * np.eye(len(beta)),
        }

    # -- LEE ---------------------------------------------------------------
    def _lee_index(self, x):
        x = np.asarray(x, dtype=float)
        s = self.spec.sparsity
        cols = list(range(1, min(s, self.spec.p - 1) + 1))
        if not cols:
            return np.full(len(x), self.LEE_INTERCEPT)
        return self.LEE_INTERCEPT + x[:, cols].sum(axis=1) / math.sqrt(len(cols))

    def s0(self, x):
        """Pr(S=1 | D=0, X), clamped like fitted probabilities."""
        return np.clip(ndtr(self._lee_index(x)), PROB_FLOOR, 1 - PROB_FLOOR)

    def s1(self, x):
        return np.clip(ndtr(self._lee_index(x) + self.spec.selection_shift),
                       PROB_FLOOR, 1 - PROB_FLOOR)

    # outcome location away from zero so trimming thresholds carry weight
    LEE_OUTCOME_LEVEL = 2.0

    def outcome_mean(self, treated, x):
        x = np.asarray(x, dtype=float)
        return self.LEE_OUTCOME_LEVEL + self.spec.beta0[0] * treated + x[:, 0]

    def quantile(self, u, x):
        """Quantile of Y given D=1, S=1, X=x.

        The share is clipped to [PROB_FLOOR, 1-PROB_FLOOR] so that
        trimming at share zero yields finite thresholds.
        """
        u = np.clip(np.asarray(u, dtype=float), PROB_FLOOR, 1 - PROB_FLOOR)
        return self.outcome_mean(1.0, x) + self.spec.noise_sd * ndtri(u)

    def gamma_control(self, x):
        """E[Y | S=1, D=0, X]."""
        return self.outcome_mean(0.0, x)

    def propensity(self, x):
        return np.full(len(x), 0.5)


def _check_model(spec, *models):
    if spec.model not in models:
        raise InvalidArgument(f"spec.model is {spec.model.value}, expected one of "
                              f"{[m.value for m in models]}")


def _gaussian_design(spec):
    rng = _rng.substream(spec.seed, "data")
    truth = DgpTruth(spec)
    x = rng.standard_normal((spec.n, spec.p))
    v = spec.residual_sd * rng.standard_normal((spec.n, spec.d))
    u = spec.noise_sd * rng.standard_normal(spec.n)
    d = truth.m0(x) + v
    y = d @ np.asarray(spec.beta0) + truth.f0(x) + u
    half = spec.interval_width / 2
    return Dataset(d, x, y=y, y_lower=y - half, y_upper=y + half, truth=truth)


def generate_plp(spec):
    """Draw a partially linear predictor dataset with interval outcome."""
    _check_model(spec, Model.PLP)
    return _gaussian_design(spec)


def generate_apd(spec):
    """Draw an average partial derivative dataset (Gaussian first stage)."""
    _check_model(spec, Model.APD)
    return _gaussian_design(spec)


def generate_lee(spec):
    """Draw a randomized experiment with monotone sample selection.

    ``x[:, 0]`` is a binary cell variable and the only driver of the outcome
    location; the remaining columns are Gaussian and drive selection.
    """
    _check_model(spec, Model.LEE)
    rng = _rng.substream(spec.seed, "data")
    truth = DgpTruth(spec)
    n, p = spec.n, spec.p
    x = np.empty((n, p))
    x[:, 0] = rng.integers(0, 2, size=n)
    x[:, 1:] = rng.standard_normal((n, p - 1))
    d = rng.integers(0, 2, size=n).astype(float)
    eps = rng.standard_normal(n)
    u = spec.noise_sd * rng.standard_normal(n)
    index = truth._lee_index(x)
    s0 = (index + eps > 0).astype(float)
    s1 = np.maximum(s0, (index + spec.selection_shift + eps > 0).astype(float))
    s = d * s1 + (1 - d) * s0
    y = truth.outcome_mean(d, x) + u
    y = np.where(s == 1, y, np.nan)
    return Dataset(d, x, s=s, y=y, truth=truth)


def generate(spec):
    return {Model.PLP: generate_plp, Model.APD: generate_apd,
            Model.LEE: generate_lee}[spec.model](spec)


def validate(dataset, model):
    """Check the data contract for ``model``; raise ValidationError on the first bad row."""
    model = Model(model)
    ds = dataset
    for name, arr in (("d", ds.d), ("x", ds.x)):
        bad = ~np.isfinite(arr).all(axis=1)
        if bad.any():
            raise ValidationError(f"row {np.argmax(bad)}: non-finite value in {name}",
                                  row=int(np.argmax(bad)))
    if model is Model.LEE:
        if ds.s is None or ds.y is None:
            raise ValidationError("selection model needs columns s and y")
        if ds.k != 1:
            raise ValidationError("selection model needs a single binary d column")
        for name, col in (("d", ds.d[:, 0]), ("s", ds.s)):
            bad = ~np.isin(col, (0.0, 1.0))
            if bad.any():
                i = int(np.argmax(bad))
                raise ValidationError(f"row {i}: {name} must be 0 or 1", row=i)
        observed = ~np.isnan(ds.y)
        bad = observed != (ds.s == 1)
        if bad.any():
            i = int(np.argmax(bad))
            raise ValidationError(f"row {i}: y must be present exactly when s = 1", row=i)
        if np.isinf(ds.y).any():
            i = int(np.argmax(np.isinf(ds.y)))
            raise ValidationError(f"row {i}: infinite y", row=i)
        return True

    if ds.y_lower is None or ds.y_upper is None:
        raise ValidationError(f"{model.value} needs columns y_lower and y_upper")
    for name in ("y_lower", "y_upper"):
        bad = ~np.isfinite(getattr(ds, name))
        if bad.any():
            i = int(np.argmax(bad))
            raise ValidationError(f"row {i}: missing or non-finite {name}", row=i)
    bad = ds.y_lower > ds.y_upper
    if bad.any():
        i = int(np.argmax(bad))
        raise ValidationError(f"row {i}: y_lower > y_upper", row=i)
    if ds.y is not None:
        present = ~np.isnan(ds.y)
        bad = present & ((ds.y < ds.y_lower) | (ds.y > ds.y_upper))
        if bad.any():
            i = int(np.argmax(bad))
            raise ValidationError(f"row {i}: y outside [y_lower, y_upper]", row=i)
    return True


# -- CSV ---------------------------------------------------------------------

_OPTIONAL = ("s", "y", "y_lower", "y_upper")


def _indexed(header, prefix):
    cols = [h for h in header if h.startswith(prefix + "_")]
    expected = [f"{prefix}_{j}" for j in range(1, len(cols) + 1)]
    if cols != expected:
        raise SchemaError(f"{prefix} columns must be {', '.join(expected) or prefix + '_1'} in order",
                          line=1)
    return cols


def read_csv(path):
    """Load a dataset from CSV; empty cells are missing values."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError("empty file", line=1) from None
        header = [h.strip() for h in header]
        known = set(_OPTIONAL)
        for h in header:
            if h not in known and not (h.startswith("d_") or h.startswith("x_")):
                raise SchemaError(f"unknown column {h!r}", line=1)
        if len(set(header)) != len(header):
            raise SchemaError("duplicate column names", line=1)
        d_cols, x_cols = _indexed(header, "d"), _indexed(header, "x")
        if not d_cols:
            raise SchemaError("at least one d_ column is required", line=1)
        if not x_cols:
            raise SchemaError("at least one x_ column is required", line=1)
        pos = {h: j for j, h in enumerate(header)}
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise SchemaError(f"expected {len(header)} fields, got {len(row)}", line=lineno)
            vals = []
            for h, cell in zip(header, row):
                cell = cell.strip()
                if cell == "":
                    if h.startswith(("d_", "x_")):
                        raise SchemaError(f"missing value in {h}", line=lineno)
                    vals.append(math.nan)
                    continue
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise SchemaError(f"non-numeric value {cell!r} in {h}", line=lineno) from None
            rows.append(vals)
    if not rows:
        raise SchemaError("no data rows", line=2)
    table = np.array(rows, dtype=float)
    cols = {h: table[:, pos[h]] for h in _OPTIONAL if h in pos}
    return Dataset(table[:, [pos[h] for h in d_cols]], table[:, [pos[h] for h in x_cols]], **cols)


def _fmt(v):
    if np.isnan(v):
        return ""
    return repr(float(v))


def write_csv(dataset, path):
    """Write ``dataset`` in the same layout :func:`read_csv` accepts."""
    header = [f"d_{j}" for j in range(1, dataset.k + 1)]
    header += [f"x_{j}" for j in range(1, dataset.p + 1)]
    extra = [h for h in _OPTIONAL if getattr(dataset, h) is not None]
    header += extra
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(dataset.n):
            row = [_fmt(v) for v in dataset.d[i]] + [_fmt(v) for v in dataset.x[i]]
            row += [_fmt(getattr(dataset, h)[i]) for h in extra]
            w.writerow(row)
