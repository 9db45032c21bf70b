"""First returns of the intermittent family to Y = [1/2, 1].

Return times, their tail, induced observables V = sum of v over an excursion,
and the growth of induced Birkhoff sums.
"""

import logging

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from scipy.optimize import brentq

from averaging.maps import FastFamily, lsv_apply
from averaging.utils.checks import (
    TruncationError,
    UsageError,
    check_interval,
    check_sample_size,
)
from averaging.utils.rates import RateSeries, fit_rate
from averaging.utils.utils import DEFAULT_RETURN_CAP, lq_norm, make_rng
from averaging.utils.verdicts import Verdict, compare

logger = logging.getLogger()

Y_LOW = 0.5

Observable = Callable[[np.ndarray], np.ndarray]


@dataclass
class ReturnSample:
    """One excursion from Y back to Y.

    Attributes:
        y: The starting point in Y.
        tau: The first return time.
        Fy: The return point T^tau y.
        orbit: The points y, T y, ..., T^(tau-1) y, when kept.
    """

    y: float
    tau: int
    Fy: float
    orbit: Optional[np.ndarray] = None


@dataclass
class TailEstimate:
    """Empirical survival function of the return time.

    Attributes:
        n: The evaluation points.
        survival: m(tau > n) / m(Y) on the sample.
        counts: Number of surviving samples at every n.
        series: The log-log fit over the usable points.
        exact: The exact values x_n from the preimage sequence.
        truncated: Number of excursions that hit the cap.
    """

    n: np.ndarray
    survival: np.ndarray
    counts: np.ndarray
    series: RateSeries
    exact: Optional[np.ndarray] = None
    truncated: int = 0

    @property
    def slope(self) -> float:
        return self.series.slope


@dataclass
class InducedRun:
    """Return times, induced sums and return points of an ensemble."""

    tau: np.ndarray
    V: np.ndarray
    Fy: np.ndarray
    truncated: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))


def _exponent(family: FastFamily, eps: float) -> float:
    if family.kind != "lsv-intermittent":
        raise UsageError("Inducing is only supported for the intermittent family.")
    return family.schedule(eps)["a"]


def first_return(
    family: FastFamily,
    eps: float,
    y: float,
    cap: int = DEFAULT_RETURN_CAP,
    keep_orbit: bool = True,
) -> ReturnSample:
    """Iterates T_eps from y in Y until the orbit re-enters Y.

    Args:
        family: The intermittent family.
        eps: The parameter.
        y: The starting point, in [1/2, 1].
        cap: The largest admissible return time.
        keep_orbit: Whether to record the excursion.

    Returns:
        The excursion.

    Raises:
        TruncationError: When no return happens within cap steps.
    """
    a = _exponent(family, eps)
    check_interval("y", y, Y_LOW, 1.0)
    if cap < 1:
        raise UsageError("The cap must be at least 1.")

    orbit = [y] if keep_orbit else None
    point = float(y)
    for n in range(1, cap + 1):
        point = lsv_apply(a, point)
        if point >= Y_LOW:
            return ReturnSample(
                y=y, tau=n, Fy=point, orbit=np.array(orbit) if keep_orbit else None
            )
        if keep_orbit:
            orbit.append(point)

    raise TruncationError(
        f"No return to Y within {cap} steps from y={y!r}",
        np.array(orbit) if keep_orbit else np.array([point]),
    )


def induced_sums(
    family: FastFamily,
    eps: float,
    y: np.ndarray,
    v: Optional[Observable] = None,
    cap: int = DEFAULT_RETURN_CAP,
) -> InducedRun:
    """Return times and induced sums for many starting points at once.

    Finished excursions are dropped from the working arrays after every step.
    Excursions reaching the cap are flagged as truncated and report tau = cap.

    Args:
        family: The intermittent family.
        eps: The parameter.
        y: Starting points in Y.
        v: The observable summed along excursions; none when None.
        cap: The largest admissible return time.

    Returns:
        The run.
    """
    a = _exponent(family, eps)
    y = np.asarray(y, dtype=float)
    m = len(y)
    tau = np.full(m, cap, dtype=np.int64)
    if v is None:
        V = np.zeros(m)
    else:
        V = np.zeros((m,) + np.shape(v(y[:1]))[1:])
    Fy = np.full(m, np.nan)

    idx = np.arange(m)
    point = y.copy()
    for n in range(1, cap + 1):
        if v is not None:
            V[idx] += v(point)
        point = lsv_apply(a, point)
        back = point >= Y_LOW
        if np.any(back):
            tau[idx[back]] = n
            Fy[idx[back]] = point[back]
            idx, point = idx[~back], point[~back]
        if idx.size == 0:
            break

    truncated = np.zeros(m, dtype=bool)
    truncated[idx] = True
    if idx.size:
        logger.warning(f"{idx.size} excursions reached the cap of {cap} steps.")

    return InducedRun(tau=tau, V=V, Fy=Fy, truncated=truncated)


def return_times(
    family: FastFamily, eps: float, y: np.ndarray, cap: int = DEFAULT_RETURN_CAP
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised first return times.

    Args:
        family: The intermittent family.
        eps: The parameter.
        y: Starting points in Y.
        cap: The largest admissible return time.

    Returns:
        The return times (cap for truncated excursions) and the truncation flags.
    """
    run = induced_sums(family, eps, y, cap=cap)
    return run.tau, run.truncated


def preimage_sequence(a: float, n: int) -> np.ndarray:
    """x_1 = 1/2 and x_{k+1} the left-branch preimage of x_k, for k < n.

    Args:
        a: The intermittency exponent.
        n: The length of the sequence.

    Returns:
        Array of x_1..x_n.
    """
    check_interval("a", a, 0.0, 1.0, closed=(False, False))
    xs = np.empty(n)
    xs[0] = 0.5
    for k in range(1, n):
        target = xs[k - 1]
        xs[k] = brentq(
            lambda s: s + 2.0**a * s ** (1.0 + a) - target,
            0.0,
            target,
            xtol=1e-300,
            rtol=1e-15,
        )
    return xs


def tail_estimate(
    family: FastFamily,
    eps: float,
    n_max: int,
    samples: int,
    seed: int,
    n_min: int = 10,
    n_points: int = 30,
    min_count: int = 10,
    cap: int = DEFAULT_RETURN_CAP,
    exact: bool = True,
) -> TailEstimate:
    """Empirical m(tau > n) / m(Y) with a log-log slope over [n_min, n_max].

    Only points with at least min_count surviving samples enter the fit; the
    decay exponent of the fit should sit near -1/a_eps.

    Args:
        family: The intermittent family.
        eps: The parameter.
        n_max: The largest n.
        samples: Uniform draws on Y, at least 10^4.
        seed: The master seed.
        n_min: The smallest n of the fit.
        n_points: Number of log-spaced evaluation points.
        min_count: Survivors needed for a point to enter the fit.
        cap: The largest admissible return time.
        exact: Whether to add the exact values x_n.

    Returns:
        The estimate.
    """
    a = _exponent(family, eps)
    check_sample_size(samples, 10_000)
    rng = make_rng(seed, 0)
    y = Y_LOW + (1.0 - Y_LOW) * rng.random(samples)
    tau, truncated = return_times(family, eps, y, cap=cap)

    n = np.unique(np.geomspace(1, n_max, n_points).astype(int))
    n = np.union1d(n, [n_min])
    ordered = np.sort(tau)
    # Truncated excursions report tau = cap, so they survive every n < cap.
    counts = samples - np.searchsorted(ordered, n, side="right")
    survival = counts / samples

    usable = (n >= n_min) & (counts >= min_count)
    if usable.sum() < int(((n >= n_min) & (n <= n_max)).sum()):
        logger.warning(
            f"Only {int(usable.sum())} tail points have {min_count}+ survivors;"
            f" the fit stops at n={int(n[usable].max()) if usable.any() else 0}."
        )
    series = fit_rate(
        list(zip(n[usable], survival[usable])), label=f"tail a={a:g}"
    )
    series.extra = {"expected_slope": -1.0 / a}

    exact_vals = preimage_sequence(a, int(n.max()))[n - 1] if exact else None

    return TailEstimate(
        n=n,
        survival=survival,
        counts=counts,
        series=series,
        exact=exact_vals,
        truncated=int(truncated.sum()),
    )


def induced_observable(
    v: Observable,
    family: FastFamily,
    eps: float,
    y: float,
    cap: int = DEFAULT_RETURN_CAP,
) -> np.ndarray:
    """V(y) = sum over the excursion of v(T^l y), l < tau(y).

    Args:
        v: The observable on [0, 1].
        family: The intermittent family.
        eps: The parameter.
        y: The starting point in Y.
        cap: The largest admissible return time.

    Returns:
        The induced value.

    Raises:
        TruncationError: When the excursion hits the cap.
    """
    sample = first_return(family, eps, y, cap=cap, keep_orbit=True)
    return np.sum(np.asarray(v(sample.orbit), dtype=float), axis=0)


def induced_moment_growth(
    v: Observable,
    family: FastFamily,
    eps: float,
    n_list: Sequence[int],
    p: float,
    samples: int,
    seed: int,
    cap: int = DEFAULT_RETURN_CAP,
) -> RateSeries:
    """|| max_{j<=n} |V_j| ||_p for the induced Birkhoff sums V_j.

    V_j = sum_{i<j} (V(F^i y) - Vbar), with Vbar the pooled mean of V over all
    simulated excursions so that the induced observable is centred.

    Args:
        v: The observable.
        family: The intermittent family.
        eps: The parameter.
        n_list: The values of n.
        p: The moment, > 1.
        samples: The ensemble size, at least 100.
        seed: The master seed.
        cap: The largest admissible return time.

    Returns:
        The series of (n, L^p norm) with its fit; 'expected_exponent' in extra.
    """
    check_sample_size(samples)
    if p <= 1:
        raise UsageError("The moment p must exceed 1.")
    n_list = sorted(int(n) for n in n_list)
    n_max = n_list[-1]
    rng = make_rng(seed, 0)
    y = Y_LOW + (1.0 - Y_LOW) * rng.random(samples)

    values = np.empty((n_max, samples))
    for j in range(n_max):
        run = induced_sums(family, eps, y, v=v, cap=cap)
        values[j] = run.V if run.V.ndim == 1 else np.abs(run.V).max(axis=-1)
        y = np.where(run.truncated, Y_LOW + (1.0 - Y_LOW) * rng.random(samples), run.Fy)

    centred = values - values.mean()
    running = np.maximum.accumulate(np.abs(np.cumsum(centred, axis=0)), axis=0)
    points = [(n, lq_norm(running[n - 1], p)) for n in n_list]

    if all(val == 0 for _, val in points):
        series = RateSeries(points=points, label="induced growth")
    elif len(points) >= 3:
        series = fit_rate(points, label="induced growth")
    else:
        series = RateSeries(points=points, label="induced growth")
    series.extra = {"expected_exponent": max(0.5, 1.0 / p), "p": p}

    return series


def expansion_check(
    family: FastFamily,
    eps: float,
    samples: int,
    seed: int,
    h: float = 1e-7,
    cap: int = DEFAULT_RETURN_CAP,
) -> Verdict:
    """Checks |F y - F y'| >= 2 |y - y'| for pairs in the same partition element.

    Pairs (y, y + h) with equal return time lie in the same element of the
    first-return partition.

    Args:
        family: The intermittent family.
        eps: The parameter.
        samples: The number of pairs.
        seed: The master seed.
        h: The pair spacing.
        cap: The largest admissible return time.

    Returns:
        The verdict of 2 (1 - 1e-9) |y - y'| - |F y - F y'| <= 0.
    """
    rng = make_rng(seed, 1)
    y = Y_LOW + (1.0 - Y_LOW - h) * rng.random(samples)
    yp = y + h
    r1 = induced_sums(family, eps, y, cap=cap)
    r2 = induced_sums(family, eps, yp, cap=cap)
    same = (r1.tau == r2.tau) & ~r1.truncated & ~r2.truncated
    lhs = 2.0 * (1.0 - 1e-9) * np.abs(yp - y)[same]
    rhs = np.abs(r2.Fy - r1.Fy)[same]

    return compare("uniform expansion", lhs, rhs, atol=0.0, pairs=int(same.sum()))


def return_time_moment(
    family: FastFamily,
    eps: float,
    p: float,
    samples: int,
    seed: int,
    rel_tol: float = 0.25,
    cap: int = DEFAULT_RETURN_CAP,
) -> Verdict:
    """Checks that the Monte Carlo moment of tau^p is stable under doubling samples.

    Args:
        family: The intermittent family.
        eps: The parameter.
        p: The moment, below 1/a_eps.
        samples: The smaller sample size.
        seed: The master seed.
        rel_tol: Admissible relative change between the two estimates.
        cap: The largest admissible return time.

    Returns:
        The verdict, both estimates in its details.
    """
    a = _exponent(family, eps)
    if p >= 1.0 / a:
        logger.warning(
            f"tau^{p} is not integrable for a={a:g}; the estimate will drift."
        )
    estimates = []
    for stream, size in ((2, samples), (3, 2 * samples)):
        rng = make_rng(seed, stream)
        y = Y_LOW + (1.0 - Y_LOW) * rng.random(size)
        tau, _ = return_times(family, eps, y, cap=cap)
        estimates.append(float(np.mean(tau.astype(float) ** p)))

    change = abs(estimates[1] - estimates[0]) / estimates[0]
    return compare(
        "return time moment",
        change,
        rel_tol,
        atol=0.0,
        p=p,
        small=estimates[0],
        large=estimates[1],
    )
