"""Command-line front end and the Monte Carlo drivers behind it.

``setid-dml estimate|simulate|coverage --config run.toml [overrides]``

Exit codes: 0 success, 2 bad input (config, CSV schema, validation),
3 numerical failure (degenerate design or too many failed replications).
"""

import argparse
import csv
import dataclasses
import json
import logging
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from importlib import resources

import jsonschema
import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import _rng
from .bootstrap import (BootstrapRun, EstimatorKind, bootstrap_draws, pointwise_region,
                        uniform_band)
from .crossfit import crossfit, full_sample_profile, resolve_learners
from .dataset import DgpSpec, Model, generate, read_csv
from .errors import (DegenerateError, InvalidArgument, SchemaError, SetIdError,
                     ValidationError)
from .estimators import (BoundsEstimate, apd_support, direction_grid, lee_ate, lee_bounds,
                         plp_bounds_1d, result_document, support_unknown_sigma)
from .learners import Kind, LearnerSpec
from .oracle import analytic_apd_truth, analytic_lee_truth, analytic_plp_truth

log = logging.getLogger("setid_dml")

VARIANTS = ("ORTHOGONAL_CROSSFIT", "ORTHOGONAL_NOSPLIT", "NAIVE", "ORACLE")
COMMANDS = ("ESTIMATE", "SIMULATE", "COVERAGE")
REGIONS = ("POINTWISE_SET", "UNIFORM_BAND")
MAX_FAILURE_SHARE = 0.05


class SimulationFailure(SetIdError):
    """Too many Monte Carlo replications failed."""


@dataclass(frozen=True)
class RunConfig:
    command: str
    model: Model
    dgp: DgpSpec | None = None
    data_path: str | None = None
    learners: dict | None = None
    K: int = 2
    grid_size: int = 16
    B: int = 300
    alpha: float = 0.05
    M: int = 100
    estimator_variants: tuple = ("ORTHOGONAL_CROSSFIT", "NAIVE")
    seed: int = 0
    output_dir: str = "out"
    lee_target: str = "OUTCOME"
    ate_variant: str = "printed"
    regions: tuple = REGIONS

    def __post_init__(self):
        object.__setattr__(self, "command", str(self.command).upper())
        object.__setattr__(self, "model", Model(self.model))
        object.__setattr__(self, "estimator_variants", tuple(self.estimator_variants))
        object.__setattr__(self, "regions", tuple(self.regions))
        if self.command not in COMMANDS:
            raise InvalidArgument(f"unknown command {self.command!r}")
        if self.command == "ESTIMATE":
            if self.data_path is None or self.dgp is not None:
                raise InvalidArgument("estimate needs data_path and no dgp")
        elif self.dgp is None or self.data_path is not None:
            raise InvalidArgument(f"{self.command.lower()} needs dgp and no data_path")
        if self.dgp is not None and self.dgp.model is not self.model:
            raise InvalidArgument("dgp.model differs from model")
        if self.M < 1:
            raise InvalidArgument("M must be at least 1")
        if not 0 < self.alpha < 1:
            raise InvalidArgument("alpha must lie in (0, 1)")
        if self.K < 2:
            raise InvalidArgument("K must be at least 2")
        bad = set(self.estimator_variants) - set(VARIANTS)
        if bad or not self.estimator_variants:
            raise InvalidArgument(f"estimator_variants must be a nonempty subset of {VARIANTS}")
        if set(self.regions) - set(REGIONS):
            raise InvalidArgument(f"regions must be a subset of {REGIONS}")
        if self.lee_target not in ("OUTCOME", "ATE"):
            raise InvalidArgument("lee_target must be OUTCOME or ATE")
        if self.command == "COVERAGE" and (self.M < 50 or self.B < 100):
            raise InvalidArgument("coverage needs M >= 50 and B >= 100")

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


# -- config parsing --------------------------------------------------------------

def _learners_from_table(table):
    if table is None:
        return None
    out = {}
    for comp, spec in table.items():
        out[comp] = None if spec in (None, "none", "NONE") else LearnerSpec(**spec)
    return out


def config_from_dict(raw, command=None):
    """Build a RunConfig from a TOML-shaped dict (field names as in RunConfig)."""
    raw = dict(raw)
    fields = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(raw) - fields
    if unknown:
        raise InvalidArgument(f"unknown config fields: {sorted(unknown)}")
    if command is not None:
        raw["command"] = command
    if "model" not in raw and isinstance(raw.get("dgp"), dict) and "model" in raw["dgp"]:
        raw["model"] = raw["dgp"]["model"]
    if "model" not in raw:
        raise InvalidArgument("config needs a model")
    if isinstance(raw.get("dgp"), dict):
        dgp = dict(raw["dgp"])
        dgp.setdefault("model", raw["model"])
        try:
            raw["dgp"] = DgpSpec(**dgp)
        except TypeError as exc:
            raise InvalidArgument(f"bad dgp table: {exc}") from None
    raw["learners"] = _learners_from_table(raw.get("learners"))
    return RunConfig(**raw)


def _parse_scalar(text):
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    if text.lower() in ("true", "false"):
        return text.lower() == "true"
    return text


def _build_parser():
    parser = argparse.ArgumentParser(prog="setid-dml")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("estimate", "simulate", "coverage"):
        p = sub.add_parser(name)
        p.add_argument("--config", help="TOML file with RunConfig fields")
        p.add_argument("--model")
        p.add_argument("--data-path")
        p.add_argument("--K", "--k", dest="K", type=int)
        p.add_argument("--grid-size", type=int)
        p.add_argument("--B", "--b", dest="B", type=int)
        p.add_argument("--alpha", type=float)
        p.add_argument("--M", "--m", dest="M", type=int)
        p.add_argument("--estimator-variants", help="comma-separated")
        p.add_argument("--seed", type=int)
        p.add_argument("--output-dir")
        p.add_argument("--lee-target")
        p.add_argument("--ate-variant")
        p.add_argument("--regions", help="comma-separated")
        p.add_argument("--dgp", action="append", default=[], metavar="FIELD=VALUE",
                       help="override one dgp field (repeatable)")
    return parser


def load_config(args):
    raw = {}
    if args.config:
        try:
            with open(args.config, "rb") as fh:
                raw = tomllib.load(fh)
        except OSError as exc:
            raise InvalidArgument(f"cannot read config: {exc}") from None
        except tomllib.TOMLDecodeError as exc:
            raise InvalidArgument(f"{args.config}: {exc}") from None
    for name in ("model", "data_path", "K", "grid_size", "B", "alpha", "M", "seed",
                 "output_dir", "lee_target", "ate_variant"):
        value = getattr(args, name)
        if value is not None:
            raw[name] = value
    for name in ("estimator_variants", "regions"):
        value = getattr(args, name)
        if value is not None:
            raw[name] = [v.strip().upper() for v in value.split(",") if v.strip()]
    if args.dgp:
        dgp = dict(raw.get("dgp") or {})
        for item in args.dgp:
            key, sep, value = item.partition("=")
            if not sep:
                raise InvalidArgument(f"--dgp expects FIELD=VALUE, got {item!r}")
            key = key.strip().replace("-", "_")
            dgp[key] = ([_parse_scalar(v) for v in value.split(",")] if key == "beta0"
                        else _parse_scalar(value))
        raw["dgp"] = dgp
    return config_from_dict(raw, args.command.upper())


# -- estimation helpers ----------------------------------------------------------

def _profile(variant, dataset, model, learners, K, seed):
    if variant == "ORTHOGONAL_NOSPLIT":
        return full_sample_profile(dataset, model, learners, seed)
    if variant == "ORACLE":
        return crossfit(dataset, model, LearnerSpec(Kind.ORACLE), K, seed)
    return crossfit(dataset, model, learners, K, seed)


def _axis_grid(d):
    e = np.zeros((2, d))
    e[0, 0], e[1, 0] = 1.0, -1.0
    return e


def _support_to_bounds(est, kind):
    return BoundsEstimate(-float(est.values[1]), float(est.values[0]), kind,
                          -est.influence[:, 1], est.influence[:, 0], est.n)


def bounds_for(config, dataset, profile, plugin=False):
    """Bounds on the first coordinate (PLP, APD) or the Lee target."""
    model = config.model
    if model is Model.LEE:
        if config.lee_target == "ATE":
            if plugin:
                raise InvalidArgument("no plug-in variant for the treatment-effect bounds")
            return lee_ate(dataset, profile, config.ate_variant)
        return lee_bounds(dataset, profile, plugin=plugin)
    if model is Model.PLP and dataset.k == 1:
        return plp_bounds_1d(dataset, profile, plugin=plugin)
    grid = _axis_grid(dataset.k)
    if model is Model.PLP:
        return _support_to_bounds(support_unknown_sigma(dataset, profile, grid, plugin), "PLP")
    return _support_to_bounds(apd_support(dataset, profile, grid, plugin), "APD")


def _support_kind(model):
    return EstimatorKind.PLP_UNKNOWN_SIGMA if model is Model.PLP else EstimatorKind.APD


def support_for(config, dataset, profile):
    grid = direction_grid(dataset.k, config.grid_size)
    if config.model is Model.PLP:
        return support_unknown_sigma(dataset, profile, grid)
    return apd_support(dataset, profile, grid)


def bounds_bootstrap(config, dataset, profile, seed):
    """Bootstrap run whose two columns are (lower, upper)."""
    model = config.model
    if model is Model.LEE:
        kind = EstimatorKind.LEE_ATE if config.lee_target == "ATE" else EstimatorKind.LEE_BOUNDS
        return bootstrap_draws(dataset, profile, kind, B=config.B, seed=seed,
                               variant=config.ate_variant)
    if model is Model.PLP and dataset.k == 1:
        return bootstrap_draws(dataset, profile, EstimatorKind.PLP_1D, B=config.B, seed=seed)
    run = bootstrap_draws(dataset, profile, _support_kind(model), _axis_grid(dataset.k),
                          B=config.B, seed=seed)
    draws = np.column_stack([-run.draws[:, 1], run.draws[:, 0]])
    point = _support_to_bounds(run.point_estimate, model.value)
    return BootstrapRun(draws, run.B, run.seed, run.weights_scheme, point, run.flagged)


def true_bounds(config, spec):
    if config.model is Model.LEE:
        truth = analytic_lee_truth(spec)
        return truth["ate"] if config.lee_target == "ATE" else truth["outcome"]
    truth = _truth(spec)
    e = _axis_grid(spec.d)
    return (-truth(e[1]), truth(e[0]))


def _truth(spec):
    return analytic_plp_truth(spec) if spec.model is Model.PLP else analytic_apd_truth(spec)


def _rep_seed(seed, m):
    return int(_rng.substream(seed, "replication", m).integers(0, 2 ** 32))


def _threads():
    return max(1, int(os.environ.get("SETID_DML_THREADS", "1")))


def _map_reps(fn, M):
    """Run ``fn(m)`` for every replication; returns results in index order."""
    jobs = _threads()
    if jobs == 1:
        return [fn(m) for m in range(M)]
    with ThreadPoolExecutor(jobs) as pool:
        return list(pool.map(fn, range(M)))


def _guarded(fn):
    def run(m):
        try:
            return fn(m)
        except SetIdError as exc:
            log.warning("replication %d failed: %s", m, exc)
            return None
    return run


def _check_failures(results, M):
    failed = sum(r is None for r in results)
    if failed > MAX_FAILURE_SHARE * M:
        raise SimulationFailure(f"{failed} of {M} replications failed")
    return failed


# -- simulate -------------------------------------------------------------------

def run_simulation(config):
    """Monte Carlo comparison of estimator variants.

    Returns
    -------
    rows : list of dict
        One row per (rep, variant, bound) with the estimate and the truth.
    summary : dict
        Per-variant, per-bound bias, SD, RMSE and Monte Carlo SE of the bias.
    """
    spec = config.dgp
    truth = true_bounds(config, spec)

    def one(m):
        rep_seed = _rep_seed(config.seed, m)
        ds = generate(spec.replace(seed=rep_seed))
        out = []
        for variant in config.estimator_variants:
            profile = _profile(variant, ds, config.model, config.learners, config.K, rep_seed)
            est = bounds_for(config, ds, profile, plugin=(variant == "NAIVE"))
            out.append((variant, est.lower, est.upper))
        return out

    results = _map_reps(_guarded(one), config.M)
    failed = _check_failures(results, config.M)
    rows = []
    for m, res in enumerate(results):
        if res is None:
            continue
        for variant, lower, upper in res:
            rows.append({"rep": m, "variant": variant, "bound": "lower",
                         "estimate": float(lower), "truth": float(truth[0])})
            rows.append({"rep": m, "variant": variant, "bound": "upper",
                         "estimate": float(upper), "truth": float(truth[1])})
    return rows, summarize(rows, config, failed)


def summarize(rows, config, failed=0):
    variants = {}
    for variant in config.estimator_variants:
        variants[variant] = {}
        for bound in ("lower", "upper"):
            err = np.array([r["estimate"] - r["truth"] for r in rows
                            if r["variant"] == variant and r["bound"] == bound])
            k = len(err)
            sd = float(err.std(ddof=1)) if k > 1 else 0.0
            variants[variant][bound] = {
                "bias": float(err.mean()) if k else None,
                "sd": sd,
                "rmse": float(np.sqrt(np.mean(err ** 2))) if k else None,
                "mc_se": sd / math.sqrt(k) if k else None,
                "n": k,
            }
    return {"model": config.model.value, "n": config.dgp.n, "M": config.M,
            "completed": config.M - failed, "failures": failed, "variants": variants}


def histogram_rows(rows, bins=30):
    """Histogram of estimate - truth per (variant, bound) on a shared range per bound."""
    out = []
    for bound in ("lower", "upper"):
        errs = {}
        for r in rows:
            if r["bound"] == bound:
                errs.setdefault(r["variant"], []).append(r["estimate"] - r["truth"])
        if not errs:
            continue
        allv = np.concatenate([np.asarray(v) for v in errs.values()])
        edges = np.histogram_bin_edges(allv, bins=bins)
        for variant, v in errs.items():
            counts, _ = np.histogram(v, bins=edges)
            for j, c in enumerate(counts):
                out.append({"variant": variant, "bound": bound, "bin_left": float(edges[j]),
                            "bin_right": float(edges[j + 1]), "count": int(c)})
    return out


# -- coverage -------------------------------------------------------------------

def run_coverage(config):
    """Monte Carlo coverage of the pointwise region and the uniform band."""
    spec = config.dgp
    model = config.model
    want_point = "POINTWISE_SET" in config.regions
    want_band = "UNIFORM_BAND" in config.regions and model is not Model.LEE
    truth_b = true_bounds(config, spec) if want_point else None
    grid = direction_grid(spec.d, config.grid_size)
    truth_s = _truth(spec)(grid) if want_band else None

    def one(m):
        rep_seed = _rep_seed(config.seed, m)
        ds = generate(spec.replace(seed=rep_seed))
        profile = crossfit(ds, model, config.learners, config.K, rep_seed)
        point = band = None
        if want_point:
            run = bounds_bootstrap(config, ds, profile, rep_seed)
            reg = pointwise_region(run.point_estimate, run, config.alpha)
            point = bool(reg.lower[0] <= truth_b[0] and reg.upper[0] >= truth_b[1])
        if want_band:
            run = bootstrap_draws(ds, profile, _support_kind(model), grid, B=config.B,
                                  seed=rep_seed)
            reg = uniform_band(run.point_estimate, run, config.alpha)
            band = bool(np.all((reg.lower <= truth_s) & (truth_s <= reg.upper)))
        return point, band

    results = _map_reps(_guarded(one), config.M)
    failed = _check_failures(results, config.M)
    done = [r for r in results if r is not None]

    def rate(idx):
        hits = [r[idx] for r in done if r[idx] is not None]
        if not hits:
            return None
        c = float(np.mean(hits))
        return {"coverage": c, "mc_se": math.sqrt(c * (1 - c) / len(hits)), "reps": len(hits)}

    return {"model": model.value, "n": spec.n, "M": config.M, "B": config.B,
            "alpha": config.alpha, "grid_size": int(len(grid)), "completed": len(done),
            "failures": failed, "pointwise": rate(0), "uniform": rate(1)}


# -- commands -------------------------------------------------------------------

def _schema(name):
    text = resources.files("setid_dml").joinpath("schemas", f"{name}.schema.json").read_text()
    return json.loads(text)


def write_json(doc, path, schema):
    jsonschema.validate(doc, _schema(schema))
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_rows(rows, path, columns):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def cmd_estimate(config):
    os.makedirs(config.output_dir, exist_ok=True)
    ds = read_csv(config.data_path)
    model = config.model
    profile = crossfit(ds, model, config.learners, config.K, config.seed)
    specs = resolve_learners(model, config.learners)
    seeds = {"folds": config.seed, "bootstrap": config.seed}
    bounds = None
    if model is Model.LEE or ds.k == 1:
        bounds = bounds_for(config, ds, profile)
    region = {"B": config.B, "seed": config.seed, "alpha": config.alpha,
              "pointwise": None, "uniform": None}
    if model is Model.LEE:
        estimate = bounds
        run = bounds_bootstrap(config, ds, profile, config.seed)
        region["pointwise"] = pointwise_region(bounds, run, config.alpha).to_dict()
    else:
        estimate = support_for(config, ds, profile)
        run = bootstrap_draws(ds, profile, _support_kind(model), estimate.grid, B=config.B,
                              seed=config.seed)
        region["uniform"] = uniform_band(estimate, run, config.alpha).to_dict()
        if bounds is not None:
            brun = bounds_bootstrap(config, ds, profile, config.seed)
            region["pointwise"] = pointwise_region(bounds, brun, config.alpha).to_dict()
    doc = result_document(model, estimate, config.K, seeds, specs, bounds)
    write_json(doc, os.path.join(config.output_dir, "results.json"), "results")
    write_json(region, os.path.join(config.output_dir, "region.json"), "region")
    return doc, region


def cmd_simulate(config):
    os.makedirs(config.output_dir, exist_ok=True)
    rows, summary = run_simulation(config)
    _write_rows(rows, os.path.join(config.output_dir, "sim.csv"),
                ["rep", "variant", "bound", "estimate", "truth"])
    _write_rows(histogram_rows(rows), os.path.join(config.output_dir, "hist.csv"),
                ["variant", "bound", "bin_left", "bin_right", "count"])
    write_json(summary, os.path.join(config.output_dir, "summary.json"), "summary")
    return rows, summary


def cmd_coverage(config):
    os.makedirs(config.output_dir, exist_ok=True)
    doc = run_coverage(config)
    write_json(doc, os.path.join(config.output_dir, "coverage.json"), "coverage")
    return doc


_COMMANDS = {"ESTIMATE": cmd_estimate, "SIMULATE": cmd_simulate, "COVERAGE": cmd_coverage}


def main(argv=None):
    args = _build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = load_config(args)
        _COMMANDS[config.command](config)
    except (SchemaError, ValidationError, InvalidArgument) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DegenerateError, SimulationFailure) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except SetIdError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
