"""K-fold cross-fitting of first-stage nuisances.

For each fold k the learners are fitted on the other folds and evaluated on
fold k, so an observation's nuisance values never depend on its own data.

Nuisance components per model
-----------------------------
PLP   ``eta`` (n x d) = E[D|X], ``gamma_l`` = E[Y_L|X], ``gamma_width`` = E[Y_U - Y_L|X]
APD   ``m`` (n x d) = E[D|X], ``gamma_l``/``gamma_width`` = E[. | D, X] and their
      D-gradients ``gamma_l_grad``/``gamma_width_grad`` (n x d)
LEE   ``s0``, ``s1`` = Pr(S=1 | D=d, X), ``p0`` = s0/s1, ``pi1`` = Pr(D=1|X),
      ``q_upper``/``q_lower`` = quantiles of Y | D=1, S=1, X at 1-p0 and p0,
      ``gamma_control`` = E[Y | D=0, S=1, X]
"""

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import learners
from .dataset import Model, kfold_partition, validate
from .errors import FoldError, InvalidArgument, SetIdError
from .learners import Kind, LearnerSpec
from .moments import trimming_share

COMPONENTS = {
    Model.PLP: ("eta", "gamma_l", "gamma_width"),
    Model.APD: ("m", "gamma_l", "gamma_width"),
    Model.LEE: ("s0", "s1", "quantile", "gamma_control", "propensity"),
}

# truth methods backing the oracle learner, per (model, component)
_ORACLE = {
    (Model.PLP, "eta"): ("m0", None),
    (Model.PLP, "gamma_l"): ("plp_gamma_l", None),
    (Model.PLP, "gamma_width"): ("gamma_width", None),
    (Model.APD, "m"): ("m0", None),
    (Model.APD, "gamma_l"): ("apd_gamma_l", "apd_gamma_l_grad"),
    (Model.APD, "gamma_width"): ("apd_gamma_width", "apd_gamma_width_grad"),
    (Model.LEE, "s0"): ("s0", None),
    (Model.LEE, "s1"): ("s1", None),
    (Model.LEE, "quantile"): ("quantile", None),
    (Model.LEE, "gamma_control"): ("gamma_control", None),
    (Model.LEE, "propensity"): ("propensity", None),
}


def default_learners(model):
    """Default learner per nuisance component (``propensity: None`` means known = 1/2).

    Regressions default to post-selection lasso: plain lasso shrinkage enters
    the orthogonal moments as a product of two first-stage errors, which is
    large next to the sampling error at moderate n.
    """
    model = Model(model)
    lasso = LearnerSpec(Kind.LASSO, post_selection=True)
    if model is Model.LEE:
        return {"s0": LearnerSpec(Kind.LOGISTIC_LASSO), "s1": LearnerSpec(Kind.LOGISTIC_LASSO),
                "quantile": LearnerSpec(Kind.EMPIRICAL_QUANTILE, quantile_cells=(0,)),
                "gamma_control": lasso, "propensity": None}
    return {c: lasso for c in COMPONENTS[model]}


def resolve_learners(model, learner_specs=None):
    """Merge user choices over the defaults.

    ``learner_specs`` may be a single LearnerSpec (used for every component
    it can serve) or a mapping from component name to LearnerSpec.
    """
    model = Model(model)
    specs = default_learners(model)
    if learner_specs is None:
        return specs
    if isinstance(learner_specs, LearnerSpec):
        if learner_specs.kind is Kind.ORACLE:
            return {c: learner_specs for c in COMPONENTS[model]}
        for c in specs:
            if model is Model.LEE and c in ("s0", "s1", "quantile", "propensity"):
                continue
            specs[c] = learner_specs
        return specs
    for c, spec in learner_specs.items():
        if c not in COMPONENTS[model]:
            raise InvalidArgument(f"{model.value} has no nuisance component {c!r}")
        specs[c] = spec
    return specs


@dataclass(frozen=True, eq=False)
class NuisanceProfile:
    """Cross-fitted nuisance values, one entry per observation.

    ``fold_of`` is ``None`` for full-sample (no split) profiles.
    """

    model: Model
    values: dict
    fold_of: object
    provenance: dict = field(default_factory=dict)

    def __getitem__(self, name):
        return self.values[name]

    @property
    def n(self):
        return len(next(iter(self.values.values())))

    def to_csv(self, path):
        """One row per observation, one column per nuisance component."""
        cols, names = [], []
        if self.fold_of is not None:
            cols.append(self.fold_of.assignments.astype(float))
            names.append("fold")
        for key in sorted(self.values):
            arr = np.asarray(self.values[key], dtype=float)
            if arr.ndim == 1:
                cols.append(arr)
                names.append(key)
            else:
                for j in range(arr.shape[1]):
                    cols.append(arr[:, j])
                    names.append(f"{key}_{j + 1}")
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(names)
            for row in zip(*cols):
                w.writerow([repr(float(v)) for v in row])


def _fit(spec, x, y, component, fold):
    try:
        return learners.fit(spec, x, y)
    except SetIdError as exc:
        raise FoldError(fold, component, exc) from exc


def _oracle(dataset, model, component):
    name, grad = _ORACLE[(model, component)]
    return learners.oracle_learner(dataset.truth, name, grad)


def _fit_predict(dataset, model, specs, train, test, fold):
    """Fit every component on rows ``train`` and evaluate on rows ``test``."""
    ds = dataset
    out = {}
    xtr, xte = ds.x[train], ds.x[test]

    def regress(component, features_tr, target, features_te):
        spec = specs[component]
        if spec.kind is Kind.ORACLE:
            model_ = _oracle(ds, model, component)
        else:
            model_ = _fit(spec, features_tr, target, component, fold)
        return model_, model_.predict(features_te)

    if model is Model.PLP:
        cols = []
        spec = specs["eta"]
        if spec.kind is Kind.ORACLE:
            cols = _oracle(ds, model, "eta").predict(xte)
        else:
            cols = np.column_stack([_fit(spec, xtr, ds.d[train, j], f"eta[{j}]", fold).predict(xte)
                                    for j in range(ds.k)])
        out["eta"] = np.asarray(cols, dtype=float).reshape(len(test), ds.k)
        _, out["gamma_l"] = regress("gamma_l", xtr, ds.y_lower[train], xte)
        _, out["gamma_width"] = regress("gamma_width", xtr,
                                        ds.y_upper[train] - ds.y_lower[train], xte)
        return out

    if model is Model.APD:
        spec = specs["m"]
        if spec.kind is Kind.ORACLE:
            m = _oracle(ds, model, "m").predict(xte)
        else:
            m = np.column_stack([_fit(spec, xtr, ds.d[train, j], f"m[{j}]", fold).predict(xte)
                                 for j in range(ds.k)])
        out["m"] = np.asarray(m, dtype=float).reshape(len(test), ds.k)
        ztr = np.hstack([ds.d[train], xtr])
        zte = np.hstack([ds.d[test], xte])
        targets = {"gamma_l": ds.y_lower[train],
                   "gamma_width": ds.y_upper[train] - ds.y_lower[train]}
        for comp, target in targets.items():
            fitted, out[comp] = regress(comp, ztr, target, zte)
            out[comp + "_grad"] = np.asarray(fitted.gradient_at(zte), dtype=float)[:, :ds.k]
        return out

    # selection model
    d_tr = ds.d[train, 0]
    s_tr = ds.s[train]
    for comp, arm in (("s0", 0.0), ("s1", 1.0)):
        rows = d_tr == arm
        _, out[comp] = regress(comp, xtr[rows], s_tr[rows], xte)
    if specs.get("propensity") is None:
        out["pi1"] = np.full(len(test), 0.5)
    else:
        _, out["pi1"] = regress("propensity", xtr, d_tr, xte)
    out["p0"] = trimming_share(out["s0"], out["s1"])
    qspec = specs["quantile"]
    if qspec.kind is Kind.ORACLE:
        qmodel = _oracle(ds, model, "quantile")
    else:
        rows = (d_tr == 1) & (s_tr == 1)
        try:
            qmodel = learners.fit_conditional_quantile(
                xtr[rows], ds.y[train][rows], qspec.quantile_cells, qspec.jitter_sd, seed=fold)
        except SetIdError as exc:
            raise FoldError(fold, "quantile", exc) from exc
    try:
        out["q_upper"] = np.asarray(qmodel.quantile(1 - out["p0"], xte), dtype=float)
        out["q_lower"] = np.asarray(qmodel.quantile(out["p0"], xte), dtype=float)
    except SetIdError as exc:
        raise FoldError(fold, "quantile", exc) from exc
    rows = (d_tr == 0) & (s_tr == 1)
    _, out["gamma_control"] = regress("gamma_control", xtr[rows], ds.y[train][rows], xte)
    return out


def _provenance(model, specs, K, seed, split):
    return {"model": model.value, "K": K, "seed": seed, "split": split,
            "learners": {c: (None if s is None else s.to_dict()) for c, s in specs.items()},
            "specs": specs}


def _assemble(n, parts):
    values = {}
    for rows, part in parts:
        for key, arr in part.items():
            arr = np.asarray(arr, dtype=float)
            if key not in values:
                values[key] = np.empty((n,) + arr.shape[1:])
            values[key][rows] = arr
    for arr in values.values():
        arr.setflags(write=False)
    return values


def crossfit(dataset, model, learner_specs=None, K=2, seed=0, n_jobs=1):
    """Cross-fitted nuisance profile.

    Parameters
    ----------
    dataset : Dataset
    model : Model or str
    learner_specs : LearnerSpec or dict, optional
        See :func:`resolve_learners`.
    K : int
        Number of folds (K >= 2).
    seed : int
        Seed of the fold partition.
    n_jobs : int
        Folds are fitted on up to this many threads; the result does not
        depend on it.
    """
    model = Model(model)
    validate(dataset, model)
    specs = resolve_learners(model, learner_specs)
    folds = kfold_partition(dataset.n, K, seed)

    def work(k):
        test = folds.rows(k)
        train = np.flatnonzero(folds.assignments != k)
        return test, _fit_predict(dataset, model, specs, train, test, k)

    ks = range(1, K + 1)
    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            parts = list(pool.map(work, ks))
    else:
        parts = [work(k) for k in ks]
    return NuisanceProfile(model, _assemble(dataset.n, parts), folds,
                           _provenance(model, specs, K, seed, True))


def full_sample_profile(dataset, model, learner_specs=None, seed=0):
    """Fit on all rows and evaluate on the same rows (no sample splitting)."""
    model = Model(model)
    validate(dataset, model)
    specs = resolve_learners(model, learner_specs)
    rows = np.arange(dataset.n)
    part = _fit_predict(dataset, model, specs, rows, rows, 0)
    return NuisanceProfile(model, _assemble(dataset.n, [(rows, part)]), None,
                           _provenance(model, specs, None, seed, False))


def _perturb_row(dataset, i, model):
    changes = {}
    names = [n for n in ("y", "y_lower", "y_upper")
             if getattr(dataset, n) is not None and not np.isnan(getattr(dataset, n)[i])]
    # one common shift keeps y inside [y_lower, y_upper]
    shift = 1.0 + max((abs(getattr(dataset, n)[i]) for n in names), default=0.0)
    for name in names:
        col = getattr(dataset, name).copy()
        col[i] += shift
        changes[name] = col
    if model is Model.PLP:
        # D is only a regression target in this model
        d = dataset.d.copy()
        d[i] += 1.0 + np.abs(d[i])
        changes["d"] = d
    return dataset.replace(**changes)


def leakage_probe(dataset, profile, i, engine=None):
    """True iff row ``i``'s nuisance values are bit-identical after changing its outcome.

    The outcome columns of row ``i`` (and D for PLP, where it is only a
    first-stage target) are shifted, the profile is rebuilt with the same
    learners, folds and seed, and row ``i`` is compared. ``engine`` replaces
    :func:`crossfit` (used for negative controls).
    """
    prov = profile.provenance
    model = Model(prov["model"])
    engine = engine or crossfit
    changed = _perturb_row(dataset, i, model)
    kw = {"seed": prov["seed"]}
    if prov.get("K") is not None:
        kw["K"] = prov["K"]
    redo = engine(changed, model, prov["specs"], **kw)
    for key, arr in profile.values.items():
        a = np.ascontiguousarray(arr[i])
        b = np.ascontiguousarray(redo.values[key][i])
        if a.tobytes() != b.tobytes():
            return False
    return True
