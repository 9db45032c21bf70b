import numpy as np
import pytest

from averaging.density import invariant_density, observable_means, ulam_matrix
from averaging.maps import FastFamily
from averaging.suspension import (
    SuspensionFlow,
    continuous_averaging_check,
    continuous_fluctuation_integral,
    estimate_k2,
    flow,
    flow_from_config,
    flow_stability,
    induced_flow_observable,
    lap_times,
    rollover_counts,
    ssflow_check,
    suspension_means,
    suspension_measure,
    vw_comparison,
)
from averaging.utils.checks import DomainError, UsageError

EPS = 2.0**-4


@pytest.fixture
def unit_flow(doubling) -> SuspensionFlow:
    return SuspensionFlow(doubling, roof="constant", value=1.0)


@pytest.fixture
def sine_flow(doubling) -> SuspensionFlow:
    return SuspensionFlow(doubling, roof="sine", amplitude=0.5)


def test_k1(doubling, unit_flow, sine_flow):
    assert unit_flow.K1 == 2.0
    assert SuspensionFlow(doubling, value=0.25).K1 == 4.0
    assert sine_flow.K1 == pytest.approx(np.pi)


def test_roof_heights(unit_flow, sine_flow):
    np.testing.assert_array_equal(unit_flow.height(np.array([0.1, 0.9])), 1.0)
    assert sine_flow.height(0.25) == pytest.approx(1.5)
    assert sine_flow.height(0.75) == pytest.approx(0.5)


@pytest.mark.parametrize(
    "kwargs",
    [
        {"roof": "sine", "amplitude": 1.0},
        {"roof": "constant", "value": 0.0},
        {"roof": "square"},
        {"K2": 0.5},
    ],
)
def test_bad_flows(doubling, kwargs):
    with pytest.raises(DomainError):
        SuspensionFlow(doubling, **kwargs)


def test_cylinder_base_rejected():
    viana = FastFamily("viana", {"a0": 1.5436890126920764, "alpha": 0.01})
    with pytest.raises(DomainError):
        SuspensionFlow(viana)


def test_flow_from_config(doubling):
    fs = flow_from_config({"roof": "sine", "amplitude": 0.3, "K2": 16}, doubling)
    assert fs.roof == "sine"
    assert fs.amplitude == 0.3
    assert fs.K2 == 16.0


def test_flow_one_lap(unit_flow):
    y, u = flow(unit_flow, EPS, 0.25, 0.5, 1.0)
    np.testing.assert_array_equal(y, [0.5 + EPS])
    np.testing.assert_array_equal(u, [0.5])


def test_flow_additivity(unit_flow):
    y = np.arange(8) / 8
    u = np.full(8, 0.25)
    s, t = 0.75, 1.5
    y_st, u_st = flow(unit_flow, EPS, y, u, s + t)
    y_s, u_s = flow(unit_flow, EPS, y, u, s)
    y_t, u_t = flow(unit_flow, EPS, y_s, u_s, t)
    np.testing.assert_array_equal(y_st, y_t)
    np.testing.assert_array_equal(u_st, u_t)


def test_flow_stays_on_suspension(sine_flow, rng):
    y = rng.random(50)
    u = sine_flow.height(y) * rng.random(50)
    y1, u1 = flow(sine_flow, EPS, y, u, 3.7)
    assert np.all(u1 >= 0)
    assert np.all(u1 < sine_flow.height(y1))


def test_flow_errors(unit_flow):
    with pytest.raises(UsageError):
        flow(unit_flow, EPS, 0.2, 0.1, -1.0)
    with pytest.raises(DomainError):
        flow(unit_flow, EPS, 0.2, 1.0, 0.5)


def test_rollover_counts(unit_flow):
    laps = rollover_counts(unit_flow, EPS, [0.1, 0.2, 0.3], [0.25, 0.0, 0.9], 2.0)
    np.testing.assert_array_equal(laps, [2, 2, 2])
    laps = rollover_counts(unit_flow, EPS, 0.1, 0.25, 0.5)
    np.testing.assert_array_equal(laps, [0])


def test_lap_times(unit_flow, sine_flow):
    orbit = np.array([[0.1], [0.2], [0.3]])
    times = lap_times(unit_flow, orbit, [0.25])[:, 0]
    np.testing.assert_allclose(times, [0, 0.75, 1.75])
    orbit = np.array([[0.25], [0.75], [0.0]])
    np.testing.assert_allclose(lap_times(sine_flow, orbit, [0.5])[:, 0], [0, 1.0, 1.5])


def test_fluctuation_integral(unit_flow):
    total = continuous_fluctuation_integral(
        lambda y, u: np.ones_like(u), unit_flow, EPS, 0.2, 0.0, 2.5, 0.01
    )
    assert float(total) == pytest.approx(2.5)
    total = continuous_fluctuation_integral(
        lambda y, u: u, unit_flow, EPS, 0.2, 0.0, 2.5, 0.01
    )
    assert float(total) == pytest.approx(1.125)


def test_fluctuation_integral_step(unit_flow):
    with pytest.raises(UsageError):
        continuous_fluctuation_integral(
            lambda y, u: u, unit_flow, EPS, 0.2, 0.0, 1.0, 0.1
        )


def test_induced_flow_observable(sine_flow):
    y = np.array([0.1, 0.25, 0.6])
    h = sine_flow.height(y)
    ones = induced_flow_observable(lambda yy, s: np.ones_like(s), sine_flow, y)
    np.testing.assert_allclose(ones, h)
    heights = induced_flow_observable(lambda yy, s: s, sine_flow, y)
    np.testing.assert_allclose(heights, h**2 / 2)


def test_constant_roof_means_match_base(cos_field, unit_flow):
    op = ulam_matrix(unit_flow.family, EPS, k=256)
    invariant_density(op)
    np.testing.assert_allclose(
        suspension_means(op, cos_field, unit_flow),
        observable_means(op, cos_field),
        atol=1e-12,
    )


def test_suspension_measure(sine_flow, rng):
    op = ulam_matrix(sine_flow.family, EPS, k=256)
    y, u = suspension_measure(sine_flow, op, rng, 500)
    assert y.shape == u.shape == (500,)
    assert np.all((u >= 0) & (u < sine_flow.height(y)))
    # The base law is weighted by h, so the upper half of the sine is favoured.
    assert np.mean(y < 0.5) > 0.55


def test_estimate_k2(unit_flow, rng):
    k2 = estimate_k2(unit_flow, EPS, rng, size=500)
    assert 1.0 <= k2 <= 4.0 + 1e-6


def test_flow_stability_same_measure(cos_field, unit_flow):
    op = ulam_matrix(unit_flow.family, EPS, k=256)
    invariant_density(op)
    assert flow_stability(cos_field, unit_flow, EPS, op, op) == pytest.approx(EPS)


def test_ssflow_check(cos_field, sine_flow):
    op_eps = ulam_matrix(sine_flow.family, EPS, k=256)
    op_zero = ulam_matrix(sine_flow.family, 0.0, k=256)
    verdict = ssflow_check(cos_field, sine_flow, EPS, op_eps, op_zero)
    assert verdict.holds


@pytest.mark.slow
def test_vw_comparison(cos_field, unit_flow):
    rng = np.random.default_rng(7)
    op = ulam_matrix(unit_flow.family, 2.0**-6, k=1024)
    result = vw_comparison(cos_field, unit_flow, 2.0**-6, rng, 200, op=op)
    assert result.verdict.holds
    assert result.delta_norm > 0


@pytest.mark.slow
def test_continuous_averaging(cos_field, unit_flow):
    rng = np.random.default_rng(11)
    run = continuous_averaging_check(cos_field, unit_flow, 2.0**-6, rng, 10)
    assert run.verdict.holds
    assert len(run.paths) == 10
    assert run.paths[0].tau[0] == 0.0
