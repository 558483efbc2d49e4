import csv
import json

import jsonschema
import numpy as np
import pytest

from setid_dml import cli
from setid_dml.cli import RunConfig, config_from_dict, main, run_coverage, write_json
from setid_dml.dataset import DgpSpec, generate, write_csv
from setid_dml.errors import DegenerateError, InvalidArgument
from setid_dml.oracle import oracle_plugin_estimator


def _csv(tmp_path, spec, name="data.csv"):
    path = tmp_path / name
    write_csv(generate(spec), path)
    return path


def _read(path):
    return json.loads(path.read_text())


def test_estimate_point_identified(tmp_path):
    data = _csv(tmp_path, DgpSpec("PLP", n=400, p=6, sparsity=2, interval_width=0.0, seed=1))
    out = tmp_path / "out"
    code = main(["estimate", "--model", "PLP", "--data-path", str(data), "--B", "100",
                 "--output-dir", str(out)])
    assert code == 0
    res = _read(out / "results.json")
    assert res["bounds"]["lower"] == res["bounds"]["upper"]
    assert res["n"] == 400 and res["K"] == 2
    region = _read(out / "region.json")
    assert region["pointwise"]["lower"][0] <= res["bounds"]["lower"]
    assert region["uniform"]["kind"] == "UNIFORM_BAND"


def test_estimate_rerun_is_byte_identical(tmp_path):
    data = _csv(tmp_path, DgpSpec("PLP", n=300, p=5, sparsity=2, beta0=(1.0, 0.5), seed=2))
    args = ["estimate", "--model", "PLP", "--data-path", str(data), "--B", "100",
            "--grid-size", "8", "--seed", "4"]
    assert main(args + ["--output-dir", str(tmp_path / "a")]) == 0
    assert main(args + ["--output-dir", str(tmp_path / "b")]) == 0
    for name in ("results.json", "region.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    res = _read(tmp_path / "a" / "results.json")
    assert len(res["grid"]) == 8 and res["bounds"] is None


def test_estimate_lee(tmp_path):
    data = _csv(tmp_path, DgpSpec("LEE", n=1000, p=5, sparsity=2, selection_shift=0.5, seed=3))
    out = tmp_path / "out"
    assert main(["estimate", "--model", "LEE", "--data-path", str(data), "--B", "100",
                 "--output-dir", str(out), "--lee-target", "ATE"]) == 0
    res = _read(out / "results.json")
    assert res["bounds"]["lower"] <= res["bounds"]["upper"]
    assert _read(out / "region.json")["uniform"] is None


def test_missing_interval_column_exits_2(tmp_path, capsys):
    path = _csv(tmp_path, DgpSpec("PLP", n=50, p=3, sparsity=1))
    rows = list(csv.reader(path.open()))
    drop = rows[0].index("y_upper")
    with path.open("w", newline="") as fh:
        csv.writer(fh).writerows([r[:drop] + r[drop + 1:] for r in rows])
    code = main(["estimate", "--model", "PLP", "--data-path", str(path),
                 "--output-dir", str(tmp_path / "out")])
    assert code == 2
    assert "y_upper" in capsys.readouterr().err


def test_malformed_row_reports_line(tmp_path, capsys):
    path = _csv(tmp_path, DgpSpec("PLP", n=20, p=3, sparsity=1))
    lines = path.read_text().splitlines()
    lines[5] = lines[5] + ",7"
    path.write_text("\n".join(lines) + "\n")
    assert main(["estimate", "--model", "PLP", "--data-path", str(path),
                 "--output-dir", str(tmp_path / "out")]) == 2
    assert "line 6" in capsys.readouterr().err


def test_constant_treatment_exits_3(tmp_path):
    ds = generate(DgpSpec("PLP", n=60, p=3, sparsity=1, seed=0))
    path = tmp_path / "flat.csv"
    write_csv(ds.replace(d=np.ones((60, 1))), path)
    assert main(["estimate", "--model", "PLP", "--data-path", str(path),
                 "--output-dir", str(tmp_path / "out")]) == 3


def _sim_args(out, *extra):
    return ["simulate", "--model", "PLP", "--dgp", "n=200", "--dgp", "p=5", "--dgp", "sparsity=2",
            "--output-dir", str(out), *extra]


def test_simulate_table_shape(tmp_path):
    out = tmp_path / "sim"
    assert main(_sim_args(out, "--M", "3", "--estimator-variants",
                          "ORTHOGONAL_CROSSFIT,ORTHOGONAL_NOSPLIT,NAIVE")) == 0
    with (out / "sim.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 3 * 3 * 2
    assert set(rows[0]) == {"rep", "variant", "bound", "estimate", "truth"}
    summary = _read(out / "summary.json")
    assert summary["completed"] == 3
    assert summary["variants"]["NAIVE"]["upper"]["n"] == 3
    assert (out / "hist.csv").read_text().startswith("variant,bound,bin_left,bin_right,count")


def test_oracle_variant_passes_through(tmp_path):
    spec = DgpSpec("PLP", n=300, p=5, sparsity=2)
    config = RunConfig("SIMULATE", "PLP", dgp=spec, M=1, estimator_variants=("ORACLE",), seed=6)
    rows, _ = cli.run_simulation(config)
    ds = generate(spec.replace(seed=cli._rep_seed(6, 0)))
    truth = ds.truth.plp_nuisance(ds.x)
    est = {r["bound"]: r["estimate"] for r in rows}
    assert est["upper"] == pytest.approx(oracle_plugin_estimator(ds, [1.0], truth), abs=1e-10)
    assert est["lower"] == pytest.approx(-oracle_plugin_estimator(ds, [-1.0], truth), abs=1e-10)


def test_simulation_ignores_thread_count(tmp_path, monkeypatch):
    monkeypatch.setenv("SETID_DML_THREADS", "1")
    assert main(_sim_args(tmp_path / "a", "--M", "4")) == 0
    monkeypatch.setenv("SETID_DML_THREADS", "3")
    assert main(_sim_args(tmp_path / "b", "--M", "4")) == 0
    for name in ("sim.csv", "summary.json", "hist.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_too_many_failed_replications_exit_3(tmp_path, monkeypatch):
    def broken(*args, **kw):
        raise DegenerateError("singular")

    monkeypatch.setattr(cli, "bounds_for", broken)
    assert main(_sim_args(tmp_path / "out", "--M", "2")) == 3


def test_coverage_regions_nest():
    spec = DgpSpec("PLP", n=300, p=5, sparsity=2, seed=0)
    base = RunConfig("COVERAGE", "PLP", dgp=spec, M=50, B=100, grid_size=8, seed=1)
    wide = run_coverage(base)
    narrow = run_coverage(base.replace(alpha=0.5))
    for key in ("pointwise", "uniform"):
        assert narrow[key]["coverage"] <= wide[key]["coverage"]
        c = wide[key]["coverage"]
        assert wide[key]["mc_se"] == pytest.approx(np.sqrt(c * (1 - c) / 50))
    assert narrow["pointwise"]["coverage"] < wide["pointwise"]["coverage"]


def test_coverage_writes_valid_json(tmp_path):
    out = tmp_path / "cov"
    assert main(["coverage", "--model", "PLP", "--dgp", "n=200", "--dgp", "p=4",
                 "--dgp", "sparsity=1", "--M", "50", "--B", "100", "--grid-size", "4",
                 "--regions", "POINTWISE_SET", "--output-dir", str(out)]) == 0
    doc = _read(out / "coverage.json")
    assert doc["uniform"] is None and doc["pointwise"]["reps"] == 50


def test_config_file_and_overrides(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text(
        'model = "PLP"\nB = 150\nestimator_variants = ["NAIVE"]\n'
        '[dgp]\nn = 500\np = 10\nsparsity = 3\nbeta0 = [1.0, 0.5]\n'
        '[learners.eta]\nkind = "LASSO"\npost_selection = true\n'
        '[learners.eta.penalty]\nkind = "PLUGIN"\nscale = 2.0\n')
    args = cli._build_parser().parse_args(["simulate", "--config", str(path), "--B", "200",
                                           "--dgp", "n=800", "--dgp", "beta0=1,2,3"])
    config = cli.load_config(args)
    assert config.B == 200 and config.dgp.n == 800 and config.dgp.p == 10
    assert config.dgp.beta0 == (1.0, 2.0, 3.0)
    assert config.estimator_variants == ("NAIVE",)
    assert config.learners["eta"].post_selection and config.learners["eta"].penalty.scale == 2.0


@pytest.mark.parametrize("raw", [
    {"model": "PLP", "data_path": "x.csv", "dgp": {"n": 10, "p": 2, "sparsity": 1}},
    {"model": "PLP", "dgp": {"n": 10, "p": 2, "sparsity": 1}, "alpha": 1.5},
    {"model": "PLP", "dgp": {"n": 10, "p": 2, "sparsity": 1}, "estimator_variants": ["BOGUS"]},
    {"model": "PLP", "dgp": {"n": 10, "p": 2, "sparsity": 1}, "colour": "red"},
])
def test_config_rejects_bad_fields(raw):
    with pytest.raises(InvalidArgument):
        config_from_dict(raw, "SIMULATE")


def test_coverage_config_needs_enough_draws():
    with pytest.raises(InvalidArgument):
        config_from_dict({"model": "PLP", "dgp": {"n": 10, "p": 2, "sparsity": 1}, "M": 10},
                         "COVERAGE")
    assert main(["coverage", "--model", "PLP", "--dgp", "n=20", "--dgp", "p=2",
                 "--dgp", "sparsity=1", "--M", "5"]) == 2


def test_outputs_are_schema_checked(tmp_path):
    with pytest.raises(jsonschema.ValidationError):
        write_json({"model": "PLP"}, tmp_path / "x.json", "results")
    assert not (tmp_path / "x.json").exists()
