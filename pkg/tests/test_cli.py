import json

from pathlib import Path

import pandas as pd
import pytest

from averaging import cli
from averaging.cli import HANDLERS, build_parser, main
from averaging.experiments import load_scenario


def test_parser_requires_config():
    parser = build_parser()
    with pytest.raises(SystemExit):
        parser.parse_args(["simulate"])
    with pytest.raises(SystemExit):
        parser.parse_args(["--config", "x.toml"])


def test_parser_subcommands():
    args = build_parser().parse_args(
        ["appendix-verify", "--config", "x.toml", "--seed", "3", "--threads", "2"]
    )
    assert args.command == "appendix-verify"
    assert args.config == "x.toml"
    assert args.seed == 3
    assert args.threads == 2
    assert args.out is None
    assert set(HANDLERS) == {
        "simulate",
        "orderfn",
        "density",
        "induce",
        "suspend",
        "appendix-verify",
        "counterexample",
        "rates",
    }


def test_missing_config_exits_with_error(tmp_path):
    assert main(["simulate", "--config", str(tmp_path / "none.toml")]) == 2


def test_simulate(scenario_file, tmp_path):
    assert main(["simulate", "--config", str(scenario_file)]) == 0
    out = tmp_path / "out"
    for name in ("summary.csv", "orbits.csv", "rates.csv", "path.csv"):
        assert (out / name).exists()
    summary = pd.read_csv(out / "summary.csv")
    assert list(summary["seed"].unique()) == [7]

    report = json.loads((out / "verdicts.json").read_text(encoding="utf-8"))
    assert report["scenario"] == "small"
    assert report["command"] == "simulate"
    assert report["seed"] == 7
    assert all(v["holds"] for v in report["verdicts"] if v["asserted"])


def test_seed_and_out_override(scenario_file, tmp_path):
    out = tmp_path / "elsewhere"
    argv = ["counterexample", "--config", str(scenario_file), "--seed", "11"]
    assert main(argv + ["--out", str(out)]) == 0
    report = json.loads((out / "verdicts.json").read_text(encoding="utf-8"))
    assert report["seed"] == 11
    names = {v["name"] for v in report["verdicts"]}
    assert {"constructed endpoint", "random initial conditions"} <= names
    table = pd.read_csv(out / "counterexample.csv")
    assert list(table["N"]) == [10]


def test_failed_inequality_exit_code(scenario_file, tmp_path):
    text = scenario_file.read_text(encoding="utf-8")
    scenario_file.write_text(
        text.replace("random_bound = 0.5", "random_bound = 0.0"), encoding="utf-8"
    )
    assert main(["counterexample", "--config", str(scenario_file)]) == 1


QUADRATIC_SCENARIO = """
name = "quad"

[family]
kind = "quadratic"
a0 = 2.0
slope = -1.0

[field]
d = 1
L1 = 1.0

[[field.terms]]
psi = "linear"

[run]
eps = [0.01]
seed = 5
ulam_bins = 64

[density]
orbit_steps = 4000
reference = "arcsine"
tolerance = 0.2
"""


def test_quadratic_density_never_builds_ulam(monkeypatch, tmp_path):
    def no_ulam(*args, **kwargs):
        raise AssertionError("a Ulam operator was built")

    monkeypatch.setattr("averaging.density.ulam_matrix", no_ulam)
    path = tmp_path / "quad.toml"
    out = tmp_path / "quad"
    path.write_text(
        QUADRATIC_SCENARIO + f'\n[output]\ndir = "{out.as_posix()}"\n',
        encoding="utf-8",
    )
    verdicts = cli.density(load_scenario(path))
    methods = {v.details["method"] for v in verdicts if "method" in v.details}
    assert methods == {"orbit"}
    for name in ("density_0.csv", "density_0.01.csv"):
        assert set(pd.read_csv(out / name)["method"]) == {"orbit"}
    assert set(pd.read_csv(out / "stability.csv")["method"]) == {"orbit"}
    assert not (out / "matrix_0.csv").exists()


def test_shipped_quadratic_scenario_uses_orbits():
    s = load_scenario(Path(__file__).parents[1] / "scenarios/density_quadratic.toml")
    assert s.family.kind == "quadratic"
    assert s.table("density")["method"] == "orbit"


def test_simulate_is_reproducible(scenario_file, tmp_path):
    runs = []
    for name in ("first", "second"):
        out = tmp_path / name
        argv = ["simulate", "--config", str(scenario_file), "--out", str(out)]
        assert main(argv) == 0
        runs.append(out)
    names = sorted(p.name for p in runs[0].glob("*.csv"))
    assert names == sorted(p.name for p in runs[1].glob("*.csv"))
    assert "orbits.csv" in names
    for name in names:
        assert (runs[0] / name).read_bytes() == (runs[1] / name).read_bytes()
