import numpy as np
import pytest

from averaging.fastslow import (
    CouplingTerm,
    SlowField,
    SlowPath,
    deviation_z,
    field_from_config,
    iterate_fast_slow,
    num_steps,
    ode_grid,
    slow_increment_check,
    solve_averaged_ode,
)
from averaging.utils.checks import DomainError, NumericError, UsageError


def constant_field(c: float) -> SlowField:
    return SlowField(d=1, x0=np.zeros(1), terms=[CouplingTerm(psi="one", coef=c)], L1=c)


@pytest.mark.parametrize("eps, n", [(0.01, 100), (0.1, 10), (2.0**-10, 1024), (0.3, 3)])
def test_num_steps(eps, n):
    assert num_steps(eps) == n


def test_constant_field_telescopes(doubling, rng):
    fld = constant_field(0.5)
    path, orbit = iterate_fast_slow(fld, doubling, 0.01, rng.random(3), rng=rng)
    assert path.samples.shape == (101, 3, 1)
    assert orbit.shape == (101, 3)
    expected = 0.5 * 0.01 * np.arange(101)
    assert path.samples[:, :, 0] == pytest.approx(np.tile(expected[:, None], 3))


def test_fixed_point_orbit(doubling, cos_field):
    path, orbit = iterate_fast_slow(cos_field, doubling.frozen(), 0.01, [0.0])
    assert np.all(orbit == 0.0)
    assert path.samples[-1, 0, 0] == pytest.approx(1.0)


def test_iterate_rejects_zero_eps(doubling, cos_field):
    with pytest.raises(DomainError):
        iterate_fast_slow(cos_field, doubling, 0.0, [0.1])


def test_iterate_rejects_short_orbit(doubling, cos_field):
    with pytest.raises(UsageError):
        iterate_fast_slow(cos_field, doubling, 0.1, None, orbit=np.zeros((5, 1)))


def test_overflow_raises_numeric_error(lsv):
    fld = SlowField(
        d=1,
        x0=np.full(1, 1e308),
        terms=[CouplingTerm(psi="one", coef=1e308)],
        L1=1e308,
    )
    with pytest.raises(NumericError):
        iterate_fast_slow(fld, lsv, 0.25, [0.3])


def test_slow_increment(doubling, coupled_field, rng):
    path, _ = iterate_fast_slow(coupled_field, doubling, 0.05, rng.random(5), rng=rng)
    assert slow_increment_check(path, coupled_field).holds


def test_field_a_and_jacobian(coupled_field):
    x = np.array([[0.3, 0.1]])
    y = np.array([0.25])
    a = coupled_field.a(x, y, 0.0)
    assert a[0] == pytest.approx([np.cos(np.pi / 2), 0.5 * np.sin(0.3) * 0.25])
    jac = coupled_field.jacobian(x, y, 0.0)
    assert jac.shape == (1, 2, 2)
    assert jac[0] == pytest.approx([[0.0, 0.0], [0.5 * np.cos(0.3) * 0.25, 0.0]])


def test_ball_grid(cos_field, coupled_field):
    grid = cos_field.ball_grid(4)
    assert grid.shape == (9, 1)
    assert grid.min() == -1.0 and grid.max() == 1.0
    assert coupled_field.ball_grid(2).shape == (25, 2)
    assert cos_field.grid_mesh(4) == 0.25


def test_check_budgets(lsv, coupled_field, rng):
    report = coupled_field.check_budgets(lsv, rng, n_samples=500)
    assert report.jacobian_error < 1e-5


def test_field_from_config():
    fld = field_from_config(
        {"d": 2, "L1": 2.0, "terms": [{"psi": "one"}, {"component": 1, "phi": "sin"}]}
    )
    assert fld.d == 2
    assert fld.n_terms == 2
    assert fld.x_dependent
    assert np.array_equal(fld.x0, [0.0, 0.0])
    with pytest.raises(UsageError):
        field_from_config({"d": 1, "L1": 1.0})
    with pytest.raises(DomainError):
        field_from_config({"d": 1, "L1": 1.0, "terms": [{"psi": "exp"}]})


def test_ode_zero_field():
    X = solve_averaged_ode(lambda x: np.zeros_like(x), np.array([0.7]))
    assert np.all(X.x == 0.7)


@pytest.mark.parametrize("rate, expected", [(1.0, np.e), (-2.0, np.exp(-2.0))])
def test_ode_exponential(rate, expected):
    X = solve_averaged_ode(lambda x: rate * x, np.array([1.0]))
    assert X.t[-1] == pytest.approx(1.0)
    assert X.x[-1, 0] == pytest.approx(expected, abs=1e-8)


def test_ode_grid_contains_sample_times():
    eps = 0.03
    grid = ode_grid(1e-2, eps)
    times = eps * np.arange(num_steps(eps) + 1)
    assert np.all(np.isin(times, grid))
    assert grid[0] == 0.0 and grid[-1] == 1.0


def test_deviation_identical_paths():
    eps = 0.1
    t = eps * np.arange(11)
    X = solve_averaged_ode(lambda x: np.zeros_like(x), np.zeros(1), grid=t)
    path = SlowPath(eps, np.zeros((11, 2, 1)))
    assert np.all(deviation_z(path, X) == 0.0)


def test_deviation_constant_field(doubling, rng):
    eps, c = 0.01, 0.5
    fld = constant_field(c)
    path, _ = iterate_fast_slow(fld, doubling, eps, rng.random(4), rng=rng)
    grid = ode_grid(1e-3, eps)
    X = solve_averaged_ode(lambda x: np.full_like(x, c), fld.x0, grid=grid)
    z = deviation_z(path, X)
    assert np.all(z <= eps * c + 1e-12)
    assert np.all(z >= 0.9 * eps * c)


def test_deviation_matches_brute_force(doubling, cos_field, rng):
    eps = 2.0**-10
    path, orbit = iterate_fast_slow(cos_field, doubling, eps, rng.random(3), rng=rng)
    grid = ode_grid(1e-3, eps)
    X = solve_averaged_ode(lambda x: np.zeros_like(x), cos_field.x0, grid=grid)
    z = deviation_z(path, X)

    for i in range(3):
        x, best = 0.0, 0.0
        for n in range(num_steps(eps)):
            x += eps * np.cos(2.0 * np.pi * orbit[n, i])
            best = max(best, abs(x))
        assert z[i] == pytest.approx(best, rel=1e-9)
