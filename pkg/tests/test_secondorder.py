import numpy as np
import pytest

from averaging.secondorder import (
    UFunction,
    discrete_gronwall_check,
    euler_sequence,
    u_function,
    verify_appendix,
    w_sequence,
)


def test_gronwall_extremal_sequence_holds():
    C, D = 0.3, 0.05
    b = C * (1 + D) ** np.arange(50)
    verdict = discrete_gronwall_check(b, C, D)
    assert verdict.precondition_holds
    assert verdict.conclusion_holds
    assert bool(verdict)


def test_gronwall_violation():
    verdict = discrete_gronwall_check(np.array([1.0, 5.0]), 1.0, 1.0)
    assert not verdict.precondition_holds
    assert not verdict.conclusion_holds
    assert verdict.precondition_slack == pytest.approx(3.0)
    assert verdict.conclusion_slack == pytest.approx(3.0)


def test_gronwall_negative_sequence():
    verdict = discrete_gronwall_check(np.array([0.1, -0.2]), 1.0, 1.0)
    assert not verdict


def test_euler_constant_field():
    z = euler_sequence(lambda x: np.ones(1), np.zeros(1), 0.1, 10)
    assert z.shape == (11, 1)
    np.testing.assert_allclose(z[:, 0], 0.1 * np.arange(11))


def test_euler_linear_field():
    z = euler_sequence(lambda x: -x, np.ones(1), 0.25, 4)
    np.testing.assert_allclose(z[:, 0], 0.75 ** np.arange(5))


def test_u_on_alternating_orbit(cos_field):
    orbit = np.array([0.0, 0.5, 0.0, 0.5, 0.0])
    u = UFunction(cos_field, np.zeros(1), orbit, delta=0.5, eps=0.25)
    assert not u.degenerate
    x = np.zeros(1)
    np.testing.assert_allclose(u(x, 0), [0.0])
    np.testing.assert_allclose(u(x, 1), [0.5])
    np.testing.assert_allclose(u(x, 2), [0.0], atol=1e-15)
    value = u_function(cos_field, np.zeros(1), orbit, 0.5, x, 3, 0.25)
    np.testing.assert_allclose(value, [0.5])


def test_u_degenerate_is_zero(cos_field):
    orbit = np.array([0.0, 0.5, 0.0])
    u = UFunction(cos_field, np.zeros(1), orbit, delta=0.0, eps=0.5)
    assert u.degenerate
    np.testing.assert_array_equal(u(np.zeros(1), 1), [0.0])


def test_w_equals_x_when_degenerate(cos_field):
    orbit = np.array([0.0, 0.5, 0.0])
    u = UFunction(cos_field, np.zeros(1), orbit, delta=0.0, eps=0.5)
    x = np.array([[0.0], [0.5], [0.5]])
    w, residuals = w_sequence(x, u, lambda v: np.zeros(1))
    np.testing.assert_array_equal(w, x)
    np.testing.assert_allclose(residuals, [0.5, 0.0])


def test_w_removes_fluctuations(cos_field):
    # x_n - x_0 = eps B(n) for a y-only field, so w stays at x_0.
    orbit = np.array([0.0, 0.5, 0.0, 0.5, 0.0])
    eps = 0.25
    sums = np.concatenate([[0.0], np.cumsum(np.cos(2 * np.pi * orbit[:-1]))])
    x = (eps * sums)[:, None]
    u = UFunction(cos_field, np.zeros(1), orbit, delta=0.5, eps=eps)
    w, residuals = w_sequence(x, u, lambda v: np.zeros(1))
    np.testing.assert_allclose(w, 0.0, atol=1e-15)
    np.testing.assert_allclose(residuals, 0.0, atol=1e-15)


def test_verify_appendix_small(cos_field, doubling, rng):
    y0 = rng.random(5)
    result = verify_appendix(cos_field, doubling, 2.0**-6, y0, rng=rng)
    assert len(result.traces) + result.skipped == 5
    names = {v.name for v in result.verdicts}
    assert "second-order averaging bound" in names
    assert "w-z Gronwall conclusion" in names
    for trace in result.traces:
        frame = trace.to_frame()
        assert list(frame.columns) == ["n", "x_1", "w_1", "z_1", "r"]
        assert len(frame) == 65
        assert np.isnan(frame["r"].iloc[-1])


@pytest.mark.slow
def test_appendix_acceptance(cos_field, doubling):
    rng = np.random.default_rng(2024)
    y0 = rng.random(100)
    result = verify_appendix(cos_field, doubling, 2.0**-8, y0, rng=rng)
    by_name = {v.name: v for v in result.verdicts}
    for name in (
        "w drift bound",
        "x-z gap",
        "euler vs ode",
        "second-order averaging bound",
    ):
        assert by_name[name].holds
        assert by_name[name].violations == 0
