from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

from averaging.density import ulam_matrix
from averaging.experiments import (
    Scenario,
    counterexample_ensemble,
    counterexample_run,
    load_scenario,
    lq_summary,
    predicted_delta_exponent,
    reference_density_gap,
    run_scenario,
)
from averaging.maps import FastFamily
from averaging.utils.checks import PreconditionError, UsageError
from averaging.utils.verdicts import all_hold

SCENARIOS = sorted((Path(__file__).parents[1] / "scenarios").glob("*.toml"))


def test_load_scenario(scenario_file, tmp_path):
    s = load_scenario(scenario_file)
    assert s.name == "small"
    assert s.family.kind == "doubling-drift"
    assert s.eps == [0.0625, 0.03125, 0.015625]
    assert s.q == [1.0, 2.0]
    assert s.size == 24
    assert s.seed == 7
    assert s.ulam_bins == 256
    assert s.out == tmp_path / "out"
    assert s.table("rates") == {"z_slope": [0.0, 1.5]}
    assert s.table("counterexample")["deltas"] == [0.01]
    assert s.table("missing") == {}


def test_load_scenario_overrides(scenario_file, tmp_path):
    s = load_scenario(scenario_file, seed=99, out=tmp_path / "other", threads=3)
    assert s.seed == 99
    assert s.out == tmp_path / "other"
    assert s.threads == 3


@pytest.mark.parametrize("path", SCENARIOS, ids=lambda p: p.stem)
def test_shipped_scenarios_load(path):
    s = load_scenario(path)
    assert s.eps


def test_missing_scenario(tmp_path):
    with pytest.raises(UsageError):
        load_scenario(tmp_path / "nope.toml")


def test_malformed_scenario(tmp_path):
    path = tmp_path / "bad.toml"
    path.write_text("[family\nkind = 1", encoding="utf-8")
    with pytest.raises(UsageError):
        load_scenario(path)
    path.write_text('[family]\nkind = "doubling-drift"\n', encoding="utf-8")
    with pytest.raises(UsageError):
        load_scenario(path)


def test_scenario_validation(doubling, cos_field):
    with pytest.raises(UsageError):
        Scenario("s", doubling, cos_field, eps=[])
    with pytest.raises(UsageError):
        Scenario("s", doubling, cos_field, eps=[0.01, 0.1])
    with pytest.raises(UsageError):
        Scenario("s", doubling, cos_field, eps=[1.5])
    with pytest.raises(UsageError):
        Scenario("s", doubling, cos_field, eps=[0.1], law="gaussian")
    with pytest.raises(UsageError):
        Scenario("s", doubling, cos_field, eps=[0.1], law="fixed")
    s = Scenario("s", doubling, cos_field, eps=[0.1], law="fixed", points=["1/3", 0.5])
    assert s.size == 2


def test_lq_summary():
    out = lq_summary(np.array([3.0, 4.0]), [1, 2])
    assert out["L1"] == pytest.approx(3.5)
    assert out["L2"] == pytest.approx(np.sqrt(12.5))


@pytest.mark.parametrize(
    "p, q, d, expected",
    [
        (3.0, 2.0, 1, 1 / 3),
        (3.0, 6.0, 1, 1 / 6),
        (1.5, 1.0, 1, 0.25 / 2.25),
        (1.5, 4.0, 1, 0.25 / 6.0),
        (2.0, 2.0, 2, 1 / 6),
    ],
)
def test_predicted_delta_exponent(p, q, d, expected):
    assert predicted_delta_exponent(p, q, d) == pytest.approx(expected)


def test_predicted_delta_exponent_range():
    with pytest.raises(UsageError):
        predicted_delta_exponent(1.0, 2.0, 1)


def test_counterexample_run():
    records = counterexample_run(1.0, [1e-2, 1e-4], 0.3)
    assert [r.N for r in records] == [10, 100]
    for rec in records:
        assert 0 < rec.eps <= rec.delta
        assert rec.frozen_from is not None and rec.frozen_from <= rec.N
        assert rec.x_end >= 1.0 - 5.0 * (rec.eps**0.5 + rec.eps)
        assert isinstance(rec.drift, Fraction)
    assert records[-1].x_end >= 0.9


def test_counterexample_exact_start():
    (rec,) = counterexample_run(1.0, [1e-3], "1/3")
    assert rec.N == 31
    assert rec.drift > 0
    assert float(rec.drift) == pytest.approx(rec.eps)


def test_counterexample_precondition():
    with pytest.raises(PreconditionError) as info:
        counterexample_run(1.0, [0.5], 0.3)
    assert info.value.threshold == 0.5


def test_counterexample_bad_start():
    with pytest.raises(UsageError):
        counterexample_run(1.0, [1e-2], 1.5)
    with pytest.raises(UsageError):
        counterexample_run(0.0, [1e-2], 0.3)


def test_counterexample_random_starts(rng):
    (rec,) = counterexample_run(1.0, [1e-3], 0.3)
    z = counterexample_ensemble(1.0, rec.eps, rec.drift, 200, rng)
    assert z.shape == (200,)
    # Typical orbits do not see the fixed point and stay near the averaged path.
    assert np.mean(z) < 0.5 < rec.x_end


def test_reference_density_gap():
    family = FastFamily("doubling-drift", {"drift": 0.0})
    op = ulam_matrix(family, 0.01, k=64)
    assert reference_density_gap(op, "uniform") < 1e-10
    with pytest.raises(UsageError):
        reference_density_gap(op, "gaussian")


def test_run_scenario(scenario_file):
    s = load_scenario(scenario_file)
    res = run_scenario(s)
    assert len(res.summary) == 6
    assert set(res.summary["q"]) == {1.0, 2.0}
    assert set(res.summary["density_method"]) == {"ulam"}
    assert len(res.orbits) == 3 * 24
    assert np.all(res.orbits["z"] <= 2.0)
    assert [r.label for r in res.rates] == [
        "z_norm L1",
        "delta_norm L1",
        "z_norm L2",
        "delta_norm L2",
    ]
    assert all_hold(res.verdicts)


def test_run_scenario_independent_of_threads(scenario_file):
    s = load_scenario(scenario_file)
    s.eps = s.eps[:1]
    s.block_size = 5
    one = run_scenario(s)
    s.threads = 3
    three = run_scenario(s)
    np.testing.assert_array_equal(one.orbits["z"], three.orbits["z"])
    np.testing.assert_array_equal(one.orbits["stream"], three.orbits["stream"])
