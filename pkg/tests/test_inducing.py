import numpy as np
import pytest

from averaging.inducing import (
    expansion_check,
    first_return,
    induced_moment_growth,
    induced_observable,
    induced_sums,
    preimage_sequence,
    return_time_moment,
    return_times,
    tail_estimate,
)
from averaging.maps import FastFamily, lsv_apply
from averaging.utils.checks import DomainError, TruncationError, UsageError


def cos_observable(y: np.ndarray) -> np.ndarray:
    return np.cos(2.0 * np.pi * y)


@pytest.mark.parametrize("y", [0.75, 0.8, 0.99, 1.0])
def test_single_step_returns(lsv, y):
    sample = first_return(lsv, 0.0, y)
    assert sample.tau == 1
    assert sample.Fy == pytest.approx(2 * y - 1)


def test_first_return_by_hand(lsv):
    point, n = 0.6, 0
    while True:
        point = lsv_apply(0.5, point)
        n += 1
        if point >= 0.5:
            break
    sample = first_return(lsv, 0.0, 0.6)
    assert sample.tau == n == 3
    assert sample.Fy == point
    assert len(sample.orbit) == 3


def test_first_return_truncation(lsv):
    with pytest.raises(TruncationError) as info:
        first_return(lsv, 0.0, 0.5 + 1e-9, cap=5)
    assert len(info.value.partial_orbit) == 6


def test_first_return_domain(lsv, doubling):
    with pytest.raises(DomainError):
        first_return(lsv, 0.0, 0.3)
    with pytest.raises(UsageError):
        first_return(doubling, 0.0, 0.6)


def test_vectorised_returns_agree(lsv, rng):
    y = 0.5 + 0.5 * rng.random(50)
    tau, truncated = return_times(lsv, 0.1, y)
    assert not truncated.any()
    assert list(tau) == [first_return(lsv, 0.1, yi).tau for yi in y]


def test_induced_sums_cap(lsv):
    run = induced_sums(lsv, 0.0, np.array([0.9, 0.5 + 1e-9]), cap=4)
    assert list(run.truncated) == [False, True]
    assert run.tau[1] == 4


def test_induced_observable(lsv):
    y = 0.6
    tau = first_return(lsv, 0.0, y).tau
    assert induced_observable(np.ones_like, lsv, 0.0, y) == tau
    assert induced_observable(np.zeros_like, lsv, 0.0, y) == 0.0
    assert induced_observable(cos_observable, lsv, 0.0, 0.8) == pytest.approx(
        np.cos(1.6 * np.pi)
    )


def test_induced_sums_of_one_are_return_times(lsv, rng):
    y = 0.5 + 0.5 * rng.random(20)
    run = induced_sums(lsv, 0.0, y, v=np.ones_like)
    assert np.array_equal(run.V, run.tau.astype(float))


def test_preimage_sequence(lsv):
    xs = preimage_sequence(0.5, 6)
    assert xs[0] == 0.5
    assert np.all(np.diff(xs) < 0)
    for prev, cur in zip(xs, xs[1:]):
        assert lsv_apply(0.5, cur) == pytest.approx(prev, rel=1e-12)


def test_tail_first_point(lsv):
    est = tail_estimate(lsv, 0.0, n_max=100, samples=20_000, seed=1, exact=True)
    assert est.n[0] == 1
    assert est.survival[0] == pytest.approx(0.5, abs=0.02)
    assert est.exact[0] == 0.5
    assert np.all(np.diff(est.counts) <= 0)
    assert est.series.extra["expected_slope"] == pytest.approx(-2.0)


def test_tail_needs_samples(lsv):
    with pytest.raises(UsageError):
        tail_estimate(lsv, 0.0, n_max=100, samples=100, seed=1)


def test_growth_zero_observable(lsv):
    series = induced_moment_growth(
        np.zeros_like, lsv, 0.0, [1, 2, 4], p=2.0, samples=100, seed=2
    )
    assert all(v == 0 for _, v in series.points)
    assert not series.fitted


def test_growth_bad_moment(lsv):
    with pytest.raises(UsageError):
        induced_moment_growth(cos_observable, lsv, 0.0, [1], p=1.0, samples=100, seed=2)


def test_expansion(lsv):
    verdict = expansion_check(lsv, 0.0, samples=2000, seed=4)
    assert verdict.holds
    assert verdict.details["pairs"] > 1000


def test_return_time_moment(lsv):
    verdict = return_time_moment(lsv, 0.0, p=1.2, samples=20_000, seed=5)
    assert verdict.holds


@pytest.mark.slow
@pytest.mark.parametrize("a", [0.5, 0.8])
def test_tail_exponent(a):
    family = FastFamily("lsv-intermittent", {"a0": a, "slope": 1.0}, eps0=0.1)
    est = tail_estimate(family, 0.0, n_max=1000, samples=100_000, seed=7)
    assert abs(est.slope + 1.0 / a) <= 0.15 / a


@pytest.mark.slow
def test_induced_growth_exponent(lsv):
    n_list = [2**j for j in range(4, 11)]
    series = induced_moment_growth(
        cos_observable, lsv, 0.0, n_list, p=4.0, samples=10_000, seed=8
    )
    assert 0.4 <= series.slope <= 0.65
